#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>

namespace crosstrace {

// Row-major so matrix rows are per-position vectors and checkpoint payloads
// serialize without a transpose.
template <class Scalar>
using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = Mat<double>;
using Vector = Vec<double>;

using MatrixRef = Eigen::Ref<Matrix>;
using ConstMatrixRef = Eigen::Ref<const Matrix>;
using ConstVectorRef = Eigen::Ref<const Vector>;

// Ordered set of sequence positions.
using PositionList = std::vector<int>;

}  // namespace crosstrace
