#pragma once

#include <cstdint>
#include <vector>

#include "gnflow/autograd.hpp"
#include "gnflow/dynamics.hpp"
#include "gnflow/optim.hpp"
#include "gnflow/tensor.hpp"

namespace gnflow::latent {

enum class HeadKind { kSmoothing, kFiltering };

struct LatentConfig {
  std::int64_t nodes = 0;
  std::int64_t features = 0;
  std::int64_t hidden = 32;  // h, width of each hidden-state stream
  std::int64_t latent = 16;  // z, smoothing latent width
  std::int64_t gcn_hidden = 32;
  int mlp_hidden = 64;        // width inside the evolution flows and decoder
  double kl_weight = 0.1;     // filtering KL weight
  int n_mc_train = 1;
  int n_mc_eval = 25;
  bool backward_encoder = false;  // smoothing encoder direction
};

/// Per-time-step view of a sample subset: irregular per-sample time grids of
/// common length N.
struct LatentBatch {
  Tensor times;              // [S, N]
  std::vector<Tensor> x;     // N tensors [S, n, d]
  std::vector<Tensor> mask;  // N tensors [S, n]
  std::int64_t samples = 0;
  std::int64_t num_times = 0;
};

LatentBatch make_latent_batch(const dynamics::TrajectoryBatch& data,
                              const std::vector<std::int64_t>& samples);

using LeafMap = std::unordered_map<std::string, ag::Var>;

/// Latent-variable heads: a pair of recurrent encoders carrying the plain and
/// the graph-transformed observation streams, a standard (non-graph) neural
/// flow evolving the concatenated hidden state between observations, and
/// Gaussian read-out heads. Smoothing trains a VAE (ELBO); filtering trains
/// observation likelihood plus a jump KL.
class LatentModel {
 public:
  LatentModel(HeadKind kind, LatentConfig cfg, Tensor adjacency, std::uint64_t seed);

  HeadKind kind() const { return kind_; }
  const LatentConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const Tensor& adjacency() const { return a_; }

  LeafMap leaves(bool trainable) const;

  struct Pair {
    ag::Var h;        // [S, n, h]
    ag::Var h_tilde;  // [S, n, h]
  };
  struct Gaussian {
    ag::Var mu;
    ag::Var log_sigma;
  };

  Pair initial_pair(std::int64_t samples) const;

  /// H'(t_next) = g_proj(F(t_next - t_prev, H || H_tilde)); dt is per sample.
  ag::Var evolve_hidden(const LeafMap& lv, const Pair& pair, const Tensor& dt) const;

  /// Runs the paired-LSTM encoder over the whole series and reads
  /// [mu, log sigma] = g(H(t_N)). Rejects samples with no observed entry.
  Gaussian smooth_encode(const LeafMap& lv, const LatentBatch& batch) const;

  /// KL(q || N(0, I)) plus the Monte-Carlo reconstruction term, averaged over
  /// samples. Noise draws are deterministic in `noise_seed`.
  ag::Var elbo_loss(const LeafMap& lv, const LatentBatch& batch, int n_mc,
                    std::uint64_t noise_seed) const;

  struct FilterOutput {
    Pair pair;
    Gaussian obs;   // from H'(t_j), models X(t_j)
    Gaussian post;  // from H(t_j), models the GRU jump
  };

  /// One filtering update at an observation.
  FilterOutput filter_step(const LeafMap& lv, const Pair& pair, const Tensor& x_t,
                           const Tensor& mask_t, const Tensor& dt) const;

  /// Masked negative log-likelihood of the observations plus kl_weight times
  /// the obs-vs-post KL, summed over times, averaged over samples.
  ag::Var filter_loss(const LeafMap& lv, const LatentBatch& batch, double kl_weight) const;

  /// Graph-encoded observation at one time step (masked rows are zero).
  ag::Var encode_obs(const LeafMap& lv, ag::Var x_t, const Tensor& mask_t) const;

 private:
  ag::Var mlp2(const LeafMap& lv, const std::string& prefix, ag::Var x) const;
  ag::Var flow_step(const LeafMap& lv, const std::string& prefix, ag::Var x,
                    const Tensor& dt) const;
  std::pair<ag::Var, ag::Var> lstm_cell(const LeafMap& lv, const std::string& prefix, ag::Var x,
                                        ag::Var h, ag::Var c) const;
  ag::Var gru_cell(const LeafMap& lv, const std::string& prefix, ag::Var x, ag::Var h) const;
  Gaussian split_gaussian(ag::Var packed, std::int64_t width) const;

  HeadKind kind_;
  LatentConfig cfg_;
  Tensor a_;
  Tensor a_hat_;
  ParamStore params_;
};

struct LatentTrainResult {
  std::vector<double> train_loss;  // per epoch
  std::vector<double> val_loss;    // per epoch
  bool aborted = false;
};

/// Full-batch Adam on the head's loss; returns per-epoch train/validation
/// losses (validation uses the same loss with evaluation MC settings).
LatentTrainResult train_latent(LatentModel& model, const dynamics::TrajectoryBatch& data,
                               const std::vector<std::int64_t>& train_idx,
                               const std::vector<std::int64_t>& val_idx, int epochs,
                               const AdamConfig& adam, std::uint64_t seed);

/// Closed-form KL between diagonal Gaussians, elementwise sum.
double gaussian_kl(const Tensor& mu1, const Tensor& log_sigma1, const Tensor& mu2,
                   const Tensor& log_sigma2);

}  // namespace gnflow::latent
