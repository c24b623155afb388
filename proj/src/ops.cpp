#include "crosstrace/ops.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace crosstrace {

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: inner dimensions differ (" +
                                std::to_string(a.cols()) + " vs " +
                                std::to_string(b.rows()) + ")");
  }
  return a * b;
}

Vector softmax(const Vector& v) {
  if (v.size() == 0) throw std::invalid_argument("softmax: empty input");
  const double m = v.maxCoeff();
  Vector e = (v.array() - m).exp();
  return e / e.sum();
}

Vector layernorm(const Vector& v, const Vector& gain, const Vector& bias,
                 double eps) {
  if (v.size() != gain.size() || v.size() != bias.size()) {
    throw std::invalid_argument("layernorm: length mismatch");
  }
  if (eps <= 0.0) throw std::invalid_argument("layernorm: eps must be > 0");
  const double mu = v.mean();
  const double var = (v.array() - mu).square().mean();
  const double inv = 1.0 / std::sqrt(var + eps);
  return (((v.array() - mu) * inv) * gain.array() + bias.array()).matrix();
}

}  // namespace crosstrace
