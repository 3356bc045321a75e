#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "gnflow/autograd.hpp"
#include "gnflow/optim.hpp"
#include "gnflow/tensor.hpp"

namespace gnflow::flows {

enum class Arch { kResnet, kGru, kCoupling };
enum class GraphMode { kLearned, kTruth, kNone };

const char* arch_name(Arch a);
Arch arch_from_name(const std::string& s);
const char* graph_mode_name(GraphMode m);
GraphMode graph_mode_from_name(const std::string& s);

struct FlowConfig {
  Arch arch = Arch::kResnet;
  std::int64_t nodes = 0;     // n
  std::int64_t features = 0;  // d of the data (coupling augments d = 1 to 2)
  GraphMode graph_mode = GraphMode::kLearned;

  int mlp_hidden = 64;
  int mlp_layers = 2;  // hidden layers per MLP
  int gcn_hidden = 32;
  double lipschitz_bound = 0.9;
  double gru_alpha = 2.0 / 11.0;  // saturates alpha (5 beta + 6) <= 2 at beta = 1
  double gru_beta = 1.0;
  int coupling_blocks = 2;
  int coupling_trunk_width = 64;
  bool strict_invertibility = true;
  bool contraction = true;  // spectral clipping after each optimizer step
};

using LeafMap = std::unordered_map<std::string, ag::Var>;

/// One graph-conditioned invertible flow F(t, X, A): holds the parameters for
/// the chosen architecture plus its GCN encoder and (in learned mode) the
/// adjacency A itself.
class FlowModel {
 public:
  /// `a_init`: initial adjacency. Required for kLearned (trainable) and
  /// kTruth (held fixed); ignored for kNone (A = 0, graph branch disabled).
  FlowModel(FlowConfig cfg, std::uint64_t seed, const Tensor* a_init = nullptr);

  const FlowConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }

  /// Feature dim the flow actually runs at (2 for coupling with d = 1).
  std::int64_t model_features() const { return model_d_; }

  /// Current adjacency (trainable parameter in learned mode, else fixed).
  Tensor adjacency() const;
  void set_adjacency(Tensor a);

  /// Trainable leaves for one optimization step (or constants for evaluation,
  /// which keeps no tape).
  LeafMap leaves(bool trainable) const;

  /// F(t_b, X_b, A) for a batch of independent blocks. x0 is [B,n,dm] with
  /// dm = model_features(), times is [B] (all finite and >= 0), mask is an
  /// optional [B,n] presence matrix applied to the graph encoder.
  ag::Var forward(const LeafMap& leaves, const Tensor& x0, const Tensor& times,
                  const Tensor* mask = nullptr) const;

  /// Evaluation path: data-space inputs/outputs, [B,n,d]. Handles the
  /// coupling-flow channel augmentation internally. No gradients retained.
  Tensor predict(const Tensor& x0, const Tensor& times, const Tensor* mask = nullptr) const;

  /// Exact inverse of the coupling flow (block-by-block, reverse order).
  /// y and the result are [B,n,dm].
  Tensor invert(const Tensor& y, const Tensor& times, const Tensor* mask = nullptr) const;

  /// Graph-encoder output alone, [B,n,dm]; zero when the graph branch is off.
  Tensor encode(const Tensor& x, const Tensor& times, const Tensor* mask = nullptr) const;

  /// Spectral clipping of every linear layer: MLP weights to
  /// lipschitz_bound, GCN weights to lipschitz_bound / 2 so the whole encoder
  /// stays contractive under ||A_hat||_2 <= 2.
  void clip_contraction();
  std::vector<std::pair<std::string, double>> contraction_bounds() const;

  /// Re-zero the adjacency diagonal (learned mode; call after each update).
  void zero_adjacency_diagonal();

  /// Pad/read the coupling-flow channel augmentation ([B,n,d] <-> [B,n,dm]).
  Tensor augment(const Tensor& x) const;
  Tensor project(const Tensor& y) const;

  void save(const std::string& path) const;
  static FlowModel load(const std::string& path);

 private:
  ag::Var gcn(const LeafMap& lv, ag::Var a_hat, ag::Var x, const Tensor* mask,
              const std::string& prefix) const;
  ag::Var mlp(const LeafMap& lv, const std::string& prefix, ag::Var x, int layers) const;
  std::pair<ag::Var, ag::Var> coupling_nets(const LeafMap& lv, const std::string& p, ag::Var xv,
                                            ag::Var xtv, ag::Var tc, std::int64_t rows) const;
  ag::Var gru_half(const LeafMap& lv, int k, ag::Var x, const Tensor& tcol,
                   const Tensor& times) const;
  ag::Var a_hat_var(const LeafMap& lv) const;
  void partition(int block, std::vector<std::int64_t>* u, std::vector<std::int64_t>* v) const;

  FlowConfig cfg_;
  std::int64_t model_d_ = 0;
  ParamStore params_;
  Tensor a_fixed_;  // kTruth / kNone
};

}  // namespace gnflow::flows
