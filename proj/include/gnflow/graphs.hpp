#pragma once

#include <cstdint>

#include "gnflow/autograd.hpp"
#include "gnflow/tensor.hpp"

namespace gnflow::graphs {

// Weighted adjacencies are square Tensors with a zero diagonal; a_ij != 0
// means node i is a parent of node j.

/// Exact combinatorial test (Kahn topological sort on the nonzero pattern).
/// Rejects matrices with a nonzero diagonal.
bool is_dag(const Tensor& a);

/// h(A) = tr(expm(A o A)) - n. Nonnegative; zero (to ~1e-8) iff A is a DAG.
double acyclicity_expm(const Tensor& a);

/// h(A) = tr((I + alpha A o A)^n) - n, alpha != 0.
double acyclicity_poly(const Tensor& a, double alpha);

/// Closed form: grad h = expm(A o A)^T o 2A.
Tensor grad_acyclicity_expm(const Tensor& a);

struct NormalizedAdjacency {
  Tensor a_hat;  // I - A^T / gamma (identity when gamma == 0)
  double gamma = 0.0;
};

/// The SEM-style normalization: B = A + A^T, gamma = max_j sum_{i!=j} |B_ij|,
/// A_hat = I - A^T / gamma. For any DAG matrix, ||A_hat||_2 <= 2.
NormalizedAdjacency normalize_adjacency(const Tensor& a);

/// Random DAG: Bernoulli(density) strict upper triangle with uniform (0,1)
/// weights, then a random symmetric permutation of rows and columns.
Tensor random_dag(std::int64_t n, double density, std::uint64_t seed);

/// Adds independent N(0, sigma^2) noise to every off-diagonal entry.
/// The result need not be a DAG; the diagonal stays zero.
Tensor perturb_dag(const Tensor& truth, double sigma, std::uint64_t seed);

struct GraphMetrics {
  double tpr = 0.0;
  double fdr = 0.0;
  double fpr = 0.0;
  std::int64_t shd = 0;
};

/// Thresholded edge sets: E(M) = {(i,j) : |m_ij| > threshold}.
/// TPR = |E_L n E_T| / |E_T|; FDR = |E_L \ E_T| / max(|E_L|, 1);
/// FPR = |E_L \ E_T| / max(#non-edges of truth, 1); SHD counts insertions,
/// deletions, and reversals (a reversed edge costs 1).
GraphMetrics graph_metrics(const Tensor& learned, const Tensor& truth, double threshold);

// Differentiable wrappers used when A is trained.

/// h(A) as a tape node; the backward pass applies the closed-form gradient.
ag::Var acyclicity_node(ag::Var a);

/// A_hat(A) as a tape node; subgradient of gamma picks the first maximizing
/// column and sign(0) = 0.
ag::Var normalize_node(ag::Var a);

}  // namespace gnflow::graphs
