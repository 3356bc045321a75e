#pragma once

#include "gnflow/tensor.hpp"

namespace gnflow {

/// expm(M) by scaling-and-squaring: scale by 2^k until the 1-norm is <= 0.5,
/// apply an 18-term Taylor series, square k times. Accurate to ~1e-12 absolute
/// on well-conditioned inputs at the sizes used here (n <= 100).
Tensor matrix_exponential(const Tensor& m);

/// Largest singular value via power iteration on M^T M. Deterministic start
/// vector; `iters` >= 100 gives ~1e-6 relative error on matrices with a
/// spectral gap. Zero matrix returns 0.
double spectral_norm(const Tensor& m, int iters = 100);

/// Rescale M so its spectral norm is <= bound. Bit-exact idempotent: a small
/// relative slack (1e-9) on the trigger absorbs re-measurement rounding, so
/// clipping an already-clipped matrix returns it unchanged.
Tensor clip_spectral(const Tensor& m, double bound, int iters = 100);

}  // namespace gnflow
