#pragma once

#include "crosstrace/types.hpp"

namespace crosstrace {

/// Dimension-checked dense product.
Matrix matmul(const Matrix& a, const Matrix& b);

/// Numerically stable softmax (max-subtracted). Input must be nonempty.
Vector softmax(const Vector& v);

/// Standardize v to mean 0 / variance 1, then apply gain and bias.
Vector layernorm(const Vector& v, const Vector& gain, const Vector& bias,
                 double eps);

}  // namespace crosstrace
