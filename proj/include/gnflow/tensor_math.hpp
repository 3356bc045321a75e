#pragma once

#include <functional>

#include "gnflow/tensor.hpp"

namespace gnflow {

// Plain value-level tensor math (no gradient tracking). Used by the linear
// algebra routines, the data generators, and inference-only paths.

Tensor t_matmul(const Tensor& a, const Tensor& b);
Tensor t_transpose(const Tensor& a);
Tensor t_add(const Tensor& a, const Tensor& b);
Tensor t_sub(const Tensor& a, const Tensor& b);
Tensor t_hadamard(const Tensor& a, const Tensor& b);
Tensor t_scale(const Tensor& a, double s);
Tensor t_map(const Tensor& a, const std::function<double(double)>& f);
double t_trace(const Tensor& a);
double t_frobenius(const Tensor& a);
double t_max_abs(const Tensor& a);
double t_max_abs_diff(const Tensor& a, const Tensor& b);
double t_dot(const Tensor& a, const Tensor& b);

}  // namespace gnflow
