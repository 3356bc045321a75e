#include "gnflow/tensor_math.hpp"

#include <cmath>
#include <stdexcept>

#include "gnflow/kernels.hpp"

namespace gnflow {

Tensor t_matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + a.shape_str() + " vs " +
                                b.shape_str());
  }
  Tensor c({a.dim(0), b.dim(1)});
  kernels::matmul(a.data(), b.data(), c.data(), a.dim(0), a.dim(1), b.dim(1));
  return c;
}

Tensor t_transpose(const Tensor& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose: need rank 2, got " + a.shape_str());
  Tensor c({a.dim(1), a.dim(0)});
  for (std::int64_t i = 0; i < a.dim(0); ++i)
    for (std::int64_t j = 0; j < a.dim(1); ++j) c.at(j, i) = a.at(i, j);
  return c;
}

Tensor t_add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) c.at(i) = a.at(i) + b.at(i);
  return c;
}

Tensor t_sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) c.at(i) = a.at(i) - b.at(i);
  return c;
}

Tensor t_hadamard(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "hadamard");
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) c.at(i) = a.at(i) * b.at(i);
  return c;
}

Tensor t_scale(const Tensor& a, double s) {
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) c.at(i) = a.at(i) * s;
  return c;
}

Tensor t_map(const Tensor& a, const std::function<double(double)>& f) {
  Tensor c(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) c.at(i) = f(a.at(i));
  return c;
}

double t_trace(const Tensor& a) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw std::invalid_argument("trace: need square matrix, got " + a.shape_str());
  }
  double s = 0.0;
  for (std::int64_t i = 0; i < a.dim(0); ++i) s += a.at(i, i);
  return s;
}

double t_frobenius(const Tensor& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a.at(i) * a.at(i);
  return std::sqrt(s);
}

double t_max_abs(const Tensor& a) {
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.at(i)));
  return m;
}

double t_max_abs_diff(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a.at(i) - b.at(i)));
  return m;
}

double t_dot(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "dot");
  double s = 0.0;
  for (std::int64_t i = 0; i < a.size(); ++i) s += a.at(i) * b.at(i);
  return s;
}

}  // namespace gnflow
