#include "gnflow/linalg.hpp"

#include <cmath>
#include <stdexcept>

#include "gnflow/tensor_math.hpp"

namespace gnflow {

namespace {
double norm_one(const Tensor& m) {
  double best = 0.0;
  for (std::int64_t j = 0; j < m.dim(1); ++j) {
    double s = 0.0;
    for (std::int64_t i = 0; i < m.dim(0); ++i) s += std::fabs(m.at(i, j));
    best = std::max(best, s);
  }
  return best;
}
}  // namespace

Tensor matrix_exponential(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) {
    throw std::invalid_argument("matrix_exponential: need square matrix, got " + m.shape_str());
  }
  const std::int64_t n = m.dim(0);

  int k = 0;
  double nrm = norm_one(m);
  while (nrm > 0.5 && k < 64) {
    nrm *= 0.5;
    ++k;
  }
  Tensor s = t_scale(m, std::ldexp(1.0, -k));

  Tensor result = Tensor::eye(n);
  Tensor term = Tensor::eye(n);
  for (int j = 1; j <= 18; ++j) {
    term = t_scale(t_matmul(term, s), 1.0 / j);
    result = t_add(result, term);
  }
  for (int j = 0; j < k; ++j) result = t_matmul(result, result);
  return result;
}

double spectral_norm(const Tensor& m, int iters) {
  if (m.rank() != 2) {
    throw std::invalid_argument("spectral_norm: need rank 2, got " + m.shape_str());
  }
  const std::int64_t rows = m.dim(0), cols = m.dim(1);
  if (rows == 0 || cols == 0) return 0.0;

  // deterministic start, slightly tilted so it is not orthogonal to the top
  // singular vector for structured matrices
  Tensor v({cols});
  for (std::int64_t i = 0; i < cols; ++i) v.at(i) = 1.0 + 1e-3 * static_cast<double>(i);
  double nv = t_frobenius(v);
  v = t_scale(v, 1.0 / nv);

  Tensor mv({rows});
  Tensor w({cols});
  for (int it = 0; it < iters; ++it) {
    for (std::int64_t i = 0; i < rows; ++i) {
      double s = 0.0;
      for (std::int64_t j = 0; j < cols; ++j) s += m.at(i, j) * v.at(j);
      mv.at(i) = s;
    }
    for (std::int64_t j = 0; j < cols; ++j) {
      double s = 0.0;
      for (std::int64_t i = 0; i < rows; ++i) s += m.at(i, j) * mv.at(i);
      w.at(j) = s;
    }
    double nw = t_frobenius(w);
    if (nw == 0.0) return 0.0;
    v = t_scale(w, 1.0 / nw);
  }
  for (std::int64_t i = 0; i < rows; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < cols; ++j) s += m.at(i, j) * v.at(j);
    mv.at(i) = s;
  }
  return t_frobenius(mv);
}

Tensor clip_spectral(const Tensor& m, double bound, int iters) {
  if (bound <= 0.0) {
    throw std::invalid_argument("clip_spectral: bound must be positive, got " +
                                std::to_string(bound));
  }
  const double sigma = spectral_norm(m, iters);
  if (sigma <= bound * (1.0 + 1e-9)) return m;
  return t_scale(m, bound / sigma);
}

}  // namespace gnflow
