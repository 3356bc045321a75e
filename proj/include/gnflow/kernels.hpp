#pragma once

#include <cstdint>

namespace gnflow::kernels {

// OpenMP-parallel dense kernels. Every kernel fixes the per-element
// accumulation order independently of the thread count, so results are
// bit-identical to the serial reference versions below (tests rely on this).

/// c[m,n] = a[m,k] * b[k,n]
void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n);

/// c[m,n] = a[k,m]^T * b[k,n]. Accumulates over k in fixed-size chunks
/// (kReduceChunk rows each, ascending), the same order the serial version uses.
void matmul_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n);

/// c[m,n] = a[m,k] * b[n,k]^T
void matmul_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n);

/// y[b] = A x[b] for every block b: A is [n,n], x is [B,n,d].
void bmm_left(const double* a, const double* x, double* y, std::int64_t blocks, std::int64_t n,
              std::int64_t d);

/// Masked variant: y[b] = (D_b A D_b) x[b] with D_b = diag(mask[b]).
/// mask is [B,n] with entries in {0,1}.
void bmm_left_masked(const double* a, const double* x, const double* mask, double* y,
                     std::int64_t blocks, std::int64_t n, std::int64_t d);

/// grad_a[n,n] += sum_b gy[b] x[b]^T (deterministic: parallel over rows of grad_a).
void bmm_left_grad_a(const double* gy, const double* x, double* grad_a, std::int64_t blocks,
                     std::int64_t n, std::int64_t d);

/// grad_x[b] = A^T gy[b] for every block.
void bmm_left_grad_x(const double* a, const double* gy, double* grad_x, std::int64_t blocks,
                     std::int64_t n, std::int64_t d);

inline constexpr std::int64_t kReduceChunk = 256;

namespace serial {
void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n);
void matmul_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n);
void matmul_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n);
void bmm_left(const double* a, const double* x, double* y, std::int64_t blocks, std::int64_t n,
              std::int64_t d);
void bmm_left_masked(const double* a, const double* x, const double* mask, double* y,
                     std::int64_t blocks, std::int64_t n, std::int64_t d);
void bmm_left_grad_a(const double* gy, const double* x, double* grad_a, std::int64_t blocks,
                     std::int64_t n, std::int64_t d);
void bmm_left_grad_x(const double* a, const double* gy, double* grad_x, std::int64_t blocks,
                     std::int64_t n, std::int64_t d);
}  // namespace serial

}  // namespace gnflow::kernels
