#include "gnflow/graphs.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "gnflow/linalg.hpp"
#include "gnflow/rng.hpp"
#include "gnflow/tensor_math.hpp"

namespace gnflow::graphs {

namespace {

void require_square(const Tensor& a, const char* op) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw std::invalid_argument(std::string(op) + ": need square matrix, got " + a.shape_str());
  }
}

Tensor hadamard_square(const Tensor& a) {
  Tensor s(a.shape());
  for (std::int64_t i = 0; i < a.size(); ++i) s.at(i) = a.at(i) * a.at(i);
  return s;
}

double gamma_of(const Tensor& a, std::int64_t* argmax_col = nullptr) {
  const std::int64_t n = a.dim(0);
  double best = 0.0;
  std::int64_t best_j = 0;
  for (std::int64_t j = 0; j < n; ++j) {
    double s = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
      if (i == j) continue;
      s += std::fabs(a.at(i, j) + a.at(j, i));  // B = A + A^T
    }
    if (s > best) {
      best = s;
      best_j = j;
    }
  }
  if (argmax_col) *argmax_col = best_j;
  return best;
}

}  // namespace

bool is_dag(const Tensor& a) {
  require_square(a, "is_dag");
  const std::int64_t n = a.dim(0);
  for (std::int64_t i = 0; i < n; ++i) {
    if (a.at(i, i) != 0.0) {
      throw std::invalid_argument("is_dag: nonzero diagonal at index " + std::to_string(i));
    }
  }
  // Kahn: repeatedly remove nodes with no remaining parents
  std::vector<std::int64_t> indeg(static_cast<std::size_t>(n), 0);
  for (std::int64_t j = 0; j < n; ++j)
    for (std::int64_t i = 0; i < n; ++i)
      if (a.at(i, j) != 0.0) ++indeg[static_cast<std::size_t>(j)];
  std::vector<std::int64_t> queue;
  for (std::int64_t j = 0; j < n; ++j)
    if (indeg[static_cast<std::size_t>(j)] == 0) queue.push_back(j);
  std::int64_t removed = 0;
  while (!queue.empty()) {
    std::int64_t i = queue.back();
    queue.pop_back();
    ++removed;
    for (std::int64_t j = 0; j < n; ++j) {
      if (a.at(i, j) != 0.0 && --indeg[static_cast<std::size_t>(j)] == 0) queue.push_back(j);
    }
  }
  return removed == n;
}

double acyclicity_expm(const Tensor& a) {
  require_square(a, "acyclicity_expm");
  const Tensor e = matrix_exponential(hadamard_square(a));
  return t_trace(e) - static_cast<double>(a.dim(0));
}

double acyclicity_poly(const Tensor& a, double alpha) {
  require_square(a, "acyclicity_poly");
  if (alpha == 0.0) throw std::invalid_argument("acyclicity_poly: alpha must be nonzero");
  const std::int64_t n = a.dim(0);
  Tensor base = t_add(Tensor::eye(n), t_scale(hadamard_square(a), alpha));
  Tensor p = Tensor::eye(n);
  for (std::int64_t i = 0; i < n; ++i) p = t_matmul(p, base);
  return t_trace(p) - static_cast<double>(n);
}

Tensor grad_acyclicity_expm(const Tensor& a) {
  require_square(a, "grad_acyclicity_expm");
  const Tensor e = matrix_exponential(hadamard_square(a));
  Tensor g(a.shape());
  const std::int64_t n = a.dim(0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) g.at(i, j) = e.at(j, i) * 2.0 * a.at(i, j);
  return g;
}

NormalizedAdjacency normalize_adjacency(const Tensor& a) {
  require_square(a, "normalize_adjacency");
  const std::int64_t n = a.dim(0);
  NormalizedAdjacency out;
  out.gamma = gamma_of(a);
  if (out.gamma == 0.0) {
    out.a_hat = Tensor::eye(n);
    return out;
  }
  Tensor h = Tensor::eye(n);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) h.at(i, j) -= a.at(j, i) / out.gamma;
  out.a_hat = std::move(h);
  return out;
}

Tensor random_dag(std::int64_t n, double density, std::uint64_t seed) {
  if (n < 1) throw std::invalid_argument("random_dag: need n >= 1");
  if (!(density > 0.0 && density <= 1.0)) {
    throw std::invalid_argument("random_dag: density must be in (0, 1], got " +
                                std::to_string(density));
  }
  Rng rng(seed, /*stream=*/0x9a7);
  Tensor upper({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      if (rng.uniform() < density) {
        double v;
        do {
          v = rng.uniform();
        } while (v == 0.0);
        upper.at(i, j) = v;
      }
    }
  }
  // symmetric row/column permutation
  std::vector<std::int64_t> perm(static_cast<std::size_t>(n));
  std::iota(perm.begin(), perm.end(), 0);
  for (std::int64_t i = n - 1; i > 0; --i) {
    std::swap(perm[static_cast<std::size_t>(i)],
              perm[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  }
  Tensor a({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) a.at(perm[i], perm[j]) = upper.at(i, j);
  return a;
}

Tensor perturb_dag(const Tensor& truth, double sigma, std::uint64_t seed) {
  require_square(truth, "perturb_dag");
  if (sigma < 0.0) throw std::invalid_argument("perturb_dag: sigma must be >= 0");
  Rng rng(seed, /*stream=*/0x3c1);
  const std::int64_t n = truth.dim(0);
  Tensor out({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      out.at(i, j) = truth.at(i, j) + (sigma > 0.0 ? sigma * rng.normal() : 0.0);
    }
  }
  return out;
}

GraphMetrics graph_metrics(const Tensor& learned, const Tensor& truth, double threshold) {
  require_square(learned, "graph_metrics");
  require_square(truth, "graph_metrics");
  if (learned.dim(0) != truth.dim(0)) {
    throw std::invalid_argument("graph_metrics: size mismatch " + learned.shape_str() + " vs " +
                                truth.shape_str());
  }
  if (threshold < 0.0) throw std::invalid_argument("graph_metrics: threshold must be >= 0");
  const std::int64_t n = truth.dim(0);
  auto edge = [threshold](const Tensor& m, std::int64_t i, std::int64_t j) {
    return i != j && std::fabs(m.at(i, j)) > threshold;
  };

  std::int64_t true_pos = 0, learned_total = 0, truth_total = 0, false_pos = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = 0; j < n; ++j) {
      if (i == j) continue;
      const bool l = edge(learned, i, j), t = edge(truth, i, j);
      learned_total += l;
      truth_total += t;
      true_pos += (l && t);
      false_pos += (l && !t);
    }
  }

  // SHD over unordered pairs: reversal costs 1, otherwise count the edge
  // insertions/deletions needed to match the pair pattern
  std::int64_t shd = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    for (std::int64_t j = i + 1; j < n; ++j) {
      const bool lf = edge(learned, i, j), lb = edge(learned, j, i);
      const bool tf = edge(truth, i, j), tb = edge(truth, j, i);
      if (lf == tf && lb == tb) continue;
      const int lcount = lf + lb, tcount = tf + tb;
      if (lcount == 1 && tcount == 1) {
        shd += 1;  // reversal
      } else {
        shd += std::abs(lcount - tcount);
      }
    }
  }

  GraphMetrics m;
  m.tpr = truth_total > 0 ? static_cast<double>(true_pos) / static_cast<double>(truth_total)
                          : (learned_total == 0 ? 1.0 : 0.0);
  m.fdr = static_cast<double>(false_pos) / static_cast<double>(std::max<std::int64_t>(learned_total, 1));
  const std::int64_t non_edges = n * (n - 1) - truth_total;
  m.fpr = static_cast<double>(false_pos) / static_cast<double>(std::max<std::int64_t>(non_edges, 1));
  m.shd = shd;
  return m;
}

ag::Var acyclicity_node(ag::Var a) {
  require_square(a->value, "acyclicity_node");
  const std::int64_t n = a->value.dim(0);
  const Tensor e = matrix_exponential(hadamard_square(a->value));
  const double h = t_trace(e) - static_cast<double>(n);
  return ag::custom(Tensor::scalar(h), {std::move(a)}, [e, n](ag::Node& nd) {
    const double g = nd.grad.item();
    const Tensor& av = nd.inputs[0]->value;
    Tensor da({n, n});
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) da.at(i, j) = g * e.at(j, i) * 2.0 * av.at(i, j);
    nd.inputs[0]->accumulate(da);
  });
}

ag::Var normalize_node(ag::Var a) {
  require_square(a->value, "normalize_node");
  const std::int64_t n = a->value.dim(0);
  std::int64_t jstar = 0;
  const double gamma = gamma_of(a->value, &jstar);
  NormalizedAdjacency na = normalize_adjacency(a->value);
  return ag::custom(std::move(na.a_hat), {std::move(a)}, [n, gamma, jstar](ag::Node& nd) {
    if (gamma == 0.0) return;  // A_hat = I constant at the empty graph
    const Tensor& av = nd.inputs[0]->value;
    const Tensor& g = nd.grad;
    // dL/dA = -G^T/gamma + (sum_ij G_ij A_ji)/gamma^2 * dgamma/dA
    double c = 0.0;
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = 0; j < n; ++j) c += g.at(i, j) * av.at(j, i);
    c /= gamma * gamma;
    Tensor da({n, n});
    for (std::int64_t p = 0; p < n; ++p) {
      for (std::int64_t q = 0; q < n; ++q) {
        double v = -g.at(q, p) / gamma;
        // gamma touches A_pq through B_{p,j*} (q == j*) and B_{q,j*} (p == j*)
        if (q == jstar && p != jstar) {
          const double b = av.at(p, jstar) + av.at(jstar, p);
          v += c * (b > 0.0 ? 1.0 : (b < 0.0 ? -1.0 : 0.0));
        }
        if (p == jstar && q != jstar) {
          const double b = av.at(q, jstar) + av.at(jstar, q);
          v += c * (b > 0.0 ? 1.0 : (b < 0.0 ? -1.0 : 0.0));
        }
        da.at(p, q) = v;
      }
    }
    nd.inputs[0]->accumulate(da);
  });
}

}  // namespace gnflow::graphs
