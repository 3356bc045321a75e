#include "gnflow/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace gnflow::kernels {

namespace {
// Below this many multiply-adds the fork/join overhead dominates.
constexpr std::int64_t kOmpMinWork = 1 << 15;
}  // namespace

void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > kOmpMinWork)
  for (std::int64_t i = 0; i < m; ++i) {
    double* ci = c + i * n;
    std::fill(ci, ci + n, 0.0);
    const double* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * n;
      for (std::int64_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
  // c = a^T b with a [k,m], b [k,n]. The k loop is the long one here (it is a
  // row-batch reduction), so parallelize over chunks of k and combine the
  // partials in ascending chunk order.
  const std::int64_t nchunks = (k + kReduceChunk - 1) / kReduceChunk;
  std::fill(c, c + m * n, 0.0);
  if (nchunks <= 1 || m * k * n <= kOmpMinWork) {
    serial::matmul_tn(a, b, c, m, k, n);
    return;
  }
  std::vector<double> partial(static_cast<std::size_t>(nchunks * m * n), 0.0);
#pragma omp parallel for schedule(static)
  for (std::int64_t ch = 0; ch < nchunks; ++ch) {
    double* pc = partial.data() + ch * m * n;
    const std::int64_t p0 = ch * kReduceChunk;
    const std::int64_t p1 = std::min(k, p0 + kReduceChunk);
    for (std::int64_t p = p0; p < p1; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::int64_t i = 0; i < m; ++i) {
        const double aip = ap[i];
        double* pci = pc + i * n;
        for (std::int64_t j = 0; j < n; ++j) pci[j] += aip * bp[j];
      }
    }
  }
  for (std::int64_t ch = 0; ch < nchunks; ++ch) {
    const double* pc = partial.data() + ch * m * n;
    for (std::int64_t t = 0; t < m * n; ++t) c[t] += pc[t];
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
#pragma omp parallel for schedule(static) if (m * k * n > kOmpMinWork)
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void bmm_left(const double* a, const double* x, double* y, std::int64_t blocks, std::int64_t n,
              std::int64_t d) {
#pragma omp parallel for schedule(static) if (blocks * n * n * d > kOmpMinWork)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* xb = x + b * n * d;
    double* yb = y + b * n * d;
    for (std::int64_t i = 0; i < n; ++i) {
      double* yi = yb + i * d;
      std::fill(yi, yi + d, 0.0);
      const double* arow = a + i * n;
      for (std::int64_t p = 0; p < n; ++p) {
        const double aip = arow[p];
        if (aip == 0.0) continue;
        const double* xp = xb + p * d;
        for (std::int64_t j = 0; j < d; ++j) yi[j] += aip * xp[j];
      }
    }
  }
}

void bmm_left_masked(const double* a, const double* x, const double* mask, double* y,
                     std::int64_t blocks, std::int64_t n, std::int64_t d) {
#pragma omp parallel for schedule(static) if (blocks * n * n * d > kOmpMinWork)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* xb = x + b * n * d;
    const double* mb = mask + b * n;
    double* yb = y + b * n * d;
    for (std::int64_t i = 0; i < n; ++i) {
      double* yi = yb + i * d;
      std::fill(yi, yi + d, 0.0);
      if (mb[i] == 0.0) continue;
      const double* arow = a + i * n;
      for (std::int64_t p = 0; p < n; ++p) {
        const double aip = arow[p] * mb[p];
        if (aip == 0.0) continue;
        const double* xp = xb + p * d;
        for (std::int64_t j = 0; j < d; ++j) yi[j] += aip * xp[j];
      }
    }
  }
}

void bmm_left_grad_a(const double* gy, const double* x, double* grad_a, std::int64_t blocks,
                     std::int64_t n, std::int64_t d) {
#pragma omp parallel for schedule(static) if (blocks * n * n * d > kOmpMinWork)
  for (std::int64_t i = 0; i < n; ++i) {
    double* gi = grad_a + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t b = 0; b < blocks; ++b) {
        const double* gyi = gy + (b * n + i) * d;
        const double* xj = x + (b * n + j) * d;
        for (std::int64_t c = 0; c < d; ++c) s += gyi[c] * xj[c];
      }
      gi[j] += s;
    }
  }
}

void bmm_left_grad_x(const double* a, const double* gy, double* grad_x, std::int64_t blocks,
                     std::int64_t n, std::int64_t d) {
#pragma omp parallel for schedule(static) if (blocks * n * n * d > kOmpMinWork)
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* gb = gy + b * n * d;
    double* xb = grad_x + b * n * d;
    for (std::int64_t i = 0; i < n; ++i) {
      double* xi = xb + i * d;
      std::fill(xi, xi + d, 0.0);
      for (std::int64_t p = 0; p < n; ++p) {
        const double api = a[p * n + i];  // A^T
        if (api == 0.0) continue;
        const double* gp = gb + p * d;
        for (std::int64_t j = 0; j < d; ++j) xi[j] += api * gp[j];
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Serial reference. Same accumulation orders, no OpenMP. Kept for the
// bit-parity tests and the kernel benchmark.
// ---------------------------------------------------------------------------
namespace serial {

void matmul(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
            std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += ai[p] * b[p * n + j];
      ci[j] = s;
    }
  }
}

void matmul_tn(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
  std::fill(c, c + m * n, 0.0);
  const std::int64_t nchunks = (k + kReduceChunk - 1) / kReduceChunk;
  std::vector<double> pc(static_cast<std::size_t>(m * n));
  for (std::int64_t ch = 0; ch < nchunks; ++ch) {
    std::fill(pc.begin(), pc.end(), 0.0);
    const std::int64_t p0 = ch * kReduceChunk;
    const std::int64_t p1 = std::min(k, p0 + kReduceChunk);
    for (std::int64_t p = p0; p < p1; ++p) {
      const double* ap = a + p * m;
      const double* bp = b + p * n;
      for (std::int64_t i = 0; i < m; ++i) {
        const double aip = ap[i];
        double* pci = pc.data() + i * n;
        for (std::int64_t j = 0; j < n; ++j) pci[j] += aip * bp[j];
      }
    }
    for (std::int64_t t = 0; t < m * n; ++t) c[t] += pc[t];
  }
}

void matmul_nt(const double* a, const double* b, double* c, std::int64_t m, std::int64_t k,
               std::int64_t n) {
  for (std::int64_t i = 0; i < m; ++i) {
    const double* ai = a + i * k;
    double* ci = c + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      const double* bj = b + j * k;
      double s = 0.0;
      for (std::int64_t p = 0; p < k; ++p) s += ai[p] * bj[p];
      ci[j] = s;
    }
  }
}

void bmm_left(const double* a, const double* x, double* y, std::int64_t blocks, std::int64_t n,
              std::int64_t d) {
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* xb = x + b * n * d;
    double* yb = y + b * n * d;
    for (std::int64_t i = 0; i < n; ++i) {
      double* yi = yb + i * d;
      std::fill(yi, yi + d, 0.0);
      const double* arow = a + i * n;
      for (std::int64_t p = 0; p < n; ++p) {
        const double aip = arow[p];
        if (aip == 0.0) continue;
        const double* xp = xb + p * d;
        for (std::int64_t j = 0; j < d; ++j) yi[j] += aip * xp[j];
      }
    }
  }
}

void bmm_left_masked(const double* a, const double* x, const double* mask, double* y,
                     std::int64_t blocks, std::int64_t n, std::int64_t d) {
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* xb = x + b * n * d;
    const double* mb = mask + b * n;
    double* yb = y + b * n * d;
    for (std::int64_t i = 0; i < n; ++i) {
      double* yi = yb + i * d;
      std::fill(yi, yi + d, 0.0);
      if (mb[i] == 0.0) continue;
      const double* arow = a + i * n;
      for (std::int64_t p = 0; p < n; ++p) {
        const double aip = arow[p] * mb[p];
        if (aip == 0.0) continue;
        const double* xp = xb + p * d;
        for (std::int64_t j = 0; j < d; ++j) yi[j] += aip * xp[j];
      }
    }
  }
}

void bmm_left_grad_a(const double* gy, const double* x, double* grad_a, std::int64_t blocks,
                     std::int64_t n, std::int64_t d) {
  for (std::int64_t i = 0; i < n; ++i) {
    double* gi = grad_a + i * n;
    for (std::int64_t j = 0; j < n; ++j) {
      double s = 0.0;
      for (std::int64_t b = 0; b < blocks; ++b) {
        const double* gyi = gy + (b * n + i) * d;
        const double* xj = x + (b * n + j) * d;
        for (std::int64_t c = 0; c < d; ++c) s += gyi[c] * xj[c];
      }
      gi[j] += s;
    }
  }
}

void bmm_left_grad_x(const double* a, const double* gy, double* grad_x, std::int64_t blocks,
                     std::int64_t n, std::int64_t d) {
  for (std::int64_t b = 0; b < blocks; ++b) {
    const double* gb = gy + b * n * d;
    double* xb = grad_x + b * n * d;
    for (std::int64_t i = 0; i < n; ++i) {
      double* xi = xb + i * d;
      std::fill(xi, xi + d, 0.0);
      for (std::int64_t p = 0; p < n; ++p) {
        const double api = a[p * n + i];
        if (api == 0.0) continue;
        const double* gp = gb + p * d;
        for (std::int64_t j = 0; j < d; ++j) xi[j] += api * gp[j];
      }
    }
  }
}

}  // namespace serial
}  // namespace gnflow::kernels
