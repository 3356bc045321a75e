#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gnflow/dynamics.hpp"
#include "gnflow/flows.hpp"
#include "gnflow/graphs.hpp"
#include "gnflow/optim.hpp"

namespace gnflow::training {

/// Augmented-Lagrangian schedule for the DAG constraint h(A) = 0.
struct AlConfig {
  double init_c = 1.0;
  double init_lambda = 0.0;
  double eta = 5.0;        // penalty growth factor, > 1
  double gamma_al = 0.25;  // progress ratio in (0, 1)
  double dag_threshold = 1e-8;
  int max_outer = 20;
};

/// AL hyperparameters tuned per graph size (synthetic systems).
AlConfig al_defaults_for_nodes(std::int64_t n);

struct TrainConfig {
  flows::FlowConfig flow;
  AlConfig al;
  AdamConfig adam;
  int inner_epochs = 100;  // per outer iteration
  int patience = 10;       // early stopping on validation loss
  std::int64_t batch_size = 32;
  double split_train = 0.6;
  double split_val = 0.2;
  double split_test = 0.2;
  std::uint64_t seed = 0;
  double a_init_scale = 0.1;  // uniform(-s, s) start when no explicit A0
};

struct EpochRow {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double h_a = 0.0;
  double lambda = 0.0;
  double c = 0.0;
};

struct SplitIdx {
  std::vector<std::int64_t> train, val, test;
};

/// Seeded 60:20:20 (by default) shuffle-split over samples.
SplitIdx split_dataset(std::int64_t samples, double train, double val, std::uint64_t seed);

/// Flattened (sample, time) evaluation blocks for a subset of samples.
struct EvalBlocks {
  Tensor x0;      // [B, n, dm]
  Tensor times;   // [B]
  Tensor target;  // [B, n, dm] (augmented channels zero)
  Tensor mask;    // [B, n]
  Tensor entry_mask;  // [B, n, dm]: node mask on data channels, 0 on padding
  std::int64_t count = 0;  // number of unmasked target entries
};
EvalBlocks make_blocks(const dynamics::TrajectoryBatch& batch,
                       const std::vector<std::int64_t>& samples, const flows::FlowModel& model);

/// Mean squared error over mask-true entries. Rejects an all-zero mask.
double mse_loss(const Tensor& pred, const Tensor& target, const Tensor& entry_mask);
ag::Var mse_loss_node(ag::Var pred, const Tensor& target, const Tensor& entry_mask,
                      std::int64_t count);

/// L(A, theta) + lambda h(A) + (c/2) h(A)^2 with h = tr(expm(A o A)) - n.
ag::Var augmented_loss_node(ag::Var task_loss, ag::Var a, double lambda, double c);

struct TrainResult {
  flows::FlowModel model;
  Tensor learned_a;
  std::vector<EpochRow> history;
  double best_val = 0.0;
  double final_h = 0.0;
  bool converged_dag = false;
  bool aborted = false;  // non-finite loss or rejected step
  SplitIdx split;
};

/// Algorithm: outer loop adjusts (lambda, c); each inner solve minimizes the
/// augmented loss with Adam, spectral clipping after every step, the diagonal
/// of A re-zeroed after every update, and early stopping on validation loss
/// (best-validation parameters are restored). Graph modes: learned (A
/// trainable), truth (A fixed to the dataset graph), none (graph branch off).
TrainResult train_gneuralflow(const TrainConfig& cfg, const dynamics::TrajectoryBatch& data,
                              const Tensor* a_init = nullptr);

/// Forecast MSE on a sample subset: predict X(t_j) = F(t_j, X0, A) per sample
/// and compare under the observation mask.
double evaluate_forecast(const flows::FlowModel& model, const dynamics::TrajectoryBatch& data,
                         const std::vector<std::int64_t>& samples);

struct StudyRow {
  double sigma = 0.0;
  std::uint64_t seed = 0;
  graphs::GraphMetrics metrics;
  double mse = 0.0;
  double h_a = 0.0;
};

/// Fig.-3-style sweep: initialize A by perturbing the ground truth with
/// N(0, sigma^2), train, and report graph metrics plus forecast MSE.
std::vector<StudyRow> perturbation_study(const TrainConfig& cfg,
                                         const dynamics::TrajectoryBatch& data,
                                         const std::vector<double>& sigmas, double threshold);

struct BenchRow {
  std::string arch;
  std::string graph_mode;
  int epochs = 0;
  double seconds_per_epoch = 0.0;
};

/// Wall-clock seconds per training epoch for each architecture with and
/// without the graph branch, on identical batches. Data generation and
/// evaluation are excluded from the timed region.
std::vector<BenchRow> timing_benchmark(const dynamics::TrajectoryBatch& data,
                                       const TrainConfig& base, int epochs);

void save_history_csv(const std::string& path, const std::vector<EpochRow>& history);

}  // namespace gnflow::training
