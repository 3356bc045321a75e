#include "gnflow/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>
#include <unordered_map>

#include "gnflow/io.hpp"
#include "gnflow/rng.hpp"

namespace gnflow::training {

namespace {

using flows::FlowModel;
using flows::GraphMode;

std::unordered_map<std::string, Tensor> snapshot(const ParamStore& params) {
  std::unordered_map<std::string, Tensor> out;
  for (const auto& name : params.names()) out.emplace(name, params.value(name));
  return out;
}

void restore(ParamStore& params, const std::unordered_map<std::string, Tensor>& snap) {
  for (const auto& [name, t] : snap) params.set(name, t);
}

double run_validation(const FlowModel& model, const EvalBlocks& blocks) {
  const flows::LeafMap lv = model.leaves(/*trainable=*/false);
  ag::Var pred = model.forward(lv, blocks.x0, blocks.times, &blocks.mask);
  return mse_loss(pred->value, blocks.target, blocks.entry_mask);
}

}  // namespace

AlConfig al_defaults_for_nodes(std::int64_t n) {
  AlConfig al;
  if (n <= 3) {
    al.eta = 3.0;
    al.gamma_al = 0.3;
  } else if (n <= 5) {
    al.eta = 5.0;
    al.gamma_al = 0.25;
  } else if (n <= 15) {
    al.eta = 7.0;
    al.gamma_al = 0.21;
  } else if (n <= 25) {
    al.eta = 7.0;
    al.gamma_al = 0.19;
  } else {
    al.eta = 7.0;
    al.gamma_al = 0.16;
  }
  return al;
}

SplitIdx split_dataset(std::int64_t samples, double train, double val, std::uint64_t seed) {
  if (train <= 0.0 || val < 0.0 || train + val >= 1.0 + 1e-12) {
    throw std::invalid_argument("split_dataset: invalid ratios");
  }
  std::vector<std::int64_t> idx(static_cast<std::size_t>(samples));
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, /*stream=*/0x5b117);
  for (std::int64_t i = samples - 1; i > 0; --i) {
    std::swap(idx[static_cast<std::size_t>(i)],
              idx[static_cast<std::size_t>(rng.below(static_cast<std::uint64_t>(i + 1)))]);
  }
  SplitIdx out;
  const auto ntrain = static_cast<std::int64_t>(std::round(train * static_cast<double>(samples)));
  const auto nval = static_cast<std::int64_t>(std::round(val * static_cast<double>(samples)));
  for (std::int64_t i = 0; i < samples; ++i) {
    if (i < ntrain) {
      out.train.push_back(idx[static_cast<std::size_t>(i)]);
    } else if (i < ntrain + nval) {
      out.val.push_back(idx[static_cast<std::size_t>(i)]);
    } else {
      out.test.push_back(idx[static_cast<std::size_t>(i)]);
    }
  }
  return out;
}

EvalBlocks make_blocks(const dynamics::TrajectoryBatch& batch,
                       const std::vector<std::int64_t>& samples, const FlowModel& model) {
  const std::int64_t n = batch.nodes, d = batch.features, nt = batch.num_times;
  const std::int64_t dm = model.model_features();
  const std::int64_t blocks = static_cast<std::int64_t>(samples.size()) * nt;
  EvalBlocks out;
  out.x0 = Tensor({blocks, n, dm});
  out.times = Tensor({blocks});
  out.target = Tensor({blocks, n, dm});
  out.mask = Tensor({blocks, n});
  out.entry_mask = Tensor({blocks, n, dm});
  std::int64_t b = 0;
  for (std::int64_t s : samples) {
    for (std::int64_t j = 0; j < nt; ++j, ++b) {
      out.times.at(b) = batch.times[static_cast<std::size_t>(s)][static_cast<std::size_t>(j)];
      for (std::int64_t i = 0; i < n; ++i) {
        const double m = batch.masks[static_cast<std::size_t>(s)].at(j, i);
        out.mask.at(b, i) = m;
        for (std::int64_t c = 0; c < d; ++c) {
          out.x0.at(b, i, c) = batch.initial[static_cast<std::size_t>(s)].at(i, c);
          out.target.at(b, i, c) = batch.values[static_cast<std::size_t>(s)].at(j, i, c);
          out.entry_mask.at(b, i, c) = m;
          if (m != 0.0) ++out.count;
        }
      }
    }
  }
  return out;
}

double mse_loss(const Tensor& pred, const Tensor& target, const Tensor& entry_mask) {
  check_same_shape(pred, target, "mse_loss");
  // entry_mask may be narrower than pred when pred carries augmented channels
  double s = 0.0;
  std::int64_t count = 0;
  for (std::int64_t i = 0; i < entry_mask.size(); ++i) {
    if (entry_mask.at(i) == 0.0) continue;
    const double diff = pred.at(i) - target.at(i);
    s += diff * diff;
    ++count;
  }
  if (count == 0) throw std::invalid_argument("mse_loss: empty mask");
  return s / static_cast<double>(count);
}

ag::Var mse_loss_node(ag::Var pred, const Tensor& target, const Tensor& entry_mask,
                      std::int64_t count) {
  if (count <= 0) throw std::invalid_argument("mse_loss_node: empty mask");
  ag::Var diff = ag::sub(std::move(pred), ag::constant(target));
  ag::Var sq = ag::mul(diff, diff);
  ag::Var masked = ag::mul(std::move(sq), ag::constant(entry_mask));
  return ag::scale(ag::sum(std::move(masked)), 1.0 / static_cast<double>(count));
}

ag::Var augmented_loss_node(ag::Var task_loss, ag::Var a, double lambda, double c) {
  ag::Var h = graphs::acyclicity_node(std::move(a));
  ag::Var penalty = ag::add(ag::scale(h, lambda), ag::scale(ag::mul(h, h), 0.5 * c));
  return ag::add(std::move(task_loss), std::move(penalty));
}

TrainResult train_gneuralflow(const TrainConfig& cfg, const dynamics::TrajectoryBatch& data,
                              const Tensor* a_init) {
  const std::int64_t n = data.nodes;
  flows::FlowConfig fcfg = cfg.flow;
  fcfg.nodes = n;
  fcfg.features = data.features;

  if (fcfg.arch == flows::Arch::kCoupling) fcfg.contraction = false;  // invertible as built

  Tensor a0;
  if (fcfg.graph_mode == GraphMode::kLearned) {
    if (a_init) {
      a0 = a_init->clone();
    } else {
      Rng rng(cfg.seed, /*stream=*/0xa0);
      a0 = Tensor({n, n});
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t j = 0; j < n; ++j)
          if (i != j) a0.at(i, j) = rng.uniform(-cfg.a_init_scale, cfg.a_init_scale);
    }
  } else if (fcfg.graph_mode == GraphMode::kTruth) {
    a0 = a_init ? a_init->clone() : data.adjacency;
  }

  TrainResult result{FlowModel(fcfg, cfg.seed,
                               fcfg.graph_mode == GraphMode::kNone ? nullptr : &a0)};
  FlowModel& model = result.model;

  result.split = split_dataset(data.samples(), cfg.split_train, cfg.split_val, cfg.seed);
  const EvalBlocks val_blocks = make_blocks(data, result.split.val, model);
  std::vector<std::int64_t> train_samples = result.split.train;

  const bool learned = fcfg.graph_mode == GraphMode::kLearned;
  double lambda = cfg.al.init_lambda;
  double c = cfg.al.init_c;
  double h_prev = -1.0;
  int epoch_counter = 0;
  Rng shuffle_rng(cfg.seed, /*stream=*/0x54);

  const int outer_iters = learned ? cfg.al.max_outer : 1;
  for (int outer = 0; outer < outer_iters; ++outer) {
    double inner_best = std::numeric_limits<double>::infinity();
    auto inner_best_params = snapshot(model.params());
    int since_best = 0;

    for (int epoch = 0; epoch < cfg.inner_epochs; ++epoch) {
      // deterministic reshuffle each epoch
      for (std::int64_t i = static_cast<std::int64_t>(train_samples.size()) - 1; i > 0; --i) {
        std::swap(train_samples[static_cast<std::size_t>(i)],
                  train_samples[static_cast<std::size_t>(
                      shuffle_rng.below(static_cast<std::uint64_t>(i + 1)))]);
      }

      double epoch_loss = 0.0;
      std::int64_t epoch_batches = 0;
      for (std::size_t start = 0; start < train_samples.size();
           start += static_cast<std::size_t>(cfg.batch_size)) {
        std::vector<std::int64_t> mb(
            train_samples.begin() + static_cast<std::ptrdiff_t>(start),
            train_samples.begin() +
                static_cast<std::ptrdiff_t>(std::min(start + static_cast<std::size_t>(cfg.batch_size),
                                                     train_samples.size())));
        const EvalBlocks blocks = make_blocks(data, mb, model);

        flows::LeafMap lv = model.leaves(/*trainable=*/true);
        ag::Var pred = model.forward(lv, blocks.x0, blocks.times, &blocks.mask);
        ag::Var loss = mse_loss_node(std::move(pred), blocks.target, blocks.entry_mask,
                                     blocks.count);
        if (learned) loss = augmented_loss_node(std::move(loss), lv.at("A"), lambda, c);

        const double loss_value = loss->value.item();
        if (!std::isfinite(loss_value)) {
          result.aborted = true;
          break;
        }
        ag::backward(loss);

        std::unordered_map<std::string, Tensor> grads;
        for (const auto& name : model.params().names()) {
          grads.emplace(name, ag::grad_or_zero(lv.at(name)));
        }
        std::string diag;
        if (!adam_step(model.params(), grads, cfg.adam, &diag)) {
          result.aborted = true;
          break;
        }
        if (learned) model.zero_adjacency_diagonal();
        if (fcfg.contraction) model.clip_contraction();
        epoch_loss += loss_value;
        ++epoch_batches;
      }
      if (result.aborted) break;

      const double val = run_validation(model, val_blocks);
      const double h_now = learned ? graphs::acyclicity_expm(model.adjacency()) : 0.0;
      EpochRow row;
      row.epoch = epoch_counter++;
      row.train_loss = epoch_batches ? epoch_loss / static_cast<double>(epoch_batches) : 0.0;
      row.val_loss = val;
      row.h_a = h_now;
      row.lambda = lambda;
      row.c = c;
      result.history.push_back(row);

      if (val < inner_best) {
        inner_best = val;
        inner_best_params = snapshot(model.params());
        since_best = 0;
      } else if (++since_best > cfg.patience) {
        break;
      }
    }
    restore(model.params(), inner_best_params);
    result.best_val = inner_best;
    if (result.aborted) break;
    if (!learned) break;

    const double h_k = std::fabs(graphs::acyclicity_expm(model.adjacency()));
    lambda += c * h_k;
    if (outer > 0 && h_k > cfg.al.gamma_al * h_prev) c *= cfg.al.eta;
    h_prev = h_k;
    result.final_h = h_k;
    if (h_k < cfg.al.dag_threshold) {
      result.converged_dag = true;
      break;
    }
  }

  result.learned_a = model.adjacency();
  if (!learned) result.final_h = 0.0;
  return result;
}

double evaluate_forecast(const FlowModel& model, const dynamics::TrajectoryBatch& data,
                         const std::vector<std::int64_t>& samples) {
  const EvalBlocks blocks = make_blocks(data, samples, model);
  const flows::LeafMap lv = model.leaves(/*trainable=*/false);
  ag::Var pred = model.forward(lv, blocks.x0, blocks.times, &blocks.mask);
  return mse_loss(pred->value, blocks.target, blocks.entry_mask);
}

std::vector<StudyRow> perturbation_study(const TrainConfig& cfg,
                                         const dynamics::TrajectoryBatch& data,
                                         const std::vector<double>& sigmas, double threshold) {
  std::vector<StudyRow> rows;
  const Tensor& truth = data.adjacency;
  for (std::size_t k = 0; k < sigmas.size(); ++k) {
    TrainConfig run_cfg = cfg;
    run_cfg.flow.graph_mode = GraphMode::kLearned;
    const Tensor a0 =
        graphs::perturb_dag(truth, sigmas[k], cfg.seed + static_cast<std::uint64_t>(k));
    TrainResult res = train_gneuralflow(run_cfg, data, &a0);
    StudyRow row;
    row.sigma = sigmas[k];
    row.seed = cfg.seed;
    row.metrics = graphs::graph_metrics(res.learned_a, truth, threshold);
    row.mse = evaluate_forecast(res.model, data, res.split.test);
    row.h_a = res.final_h;
    rows.push_back(row);
  }
  return rows;
}

std::vector<BenchRow> timing_benchmark(const dynamics::TrajectoryBatch& data,
                                       const TrainConfig& base, int epochs) {
  std::vector<BenchRow> rows;
  for (flows::Arch arch : {flows::Arch::kResnet, flows::Arch::kGru, flows::Arch::kCoupling}) {
    for (GraphMode mode : {GraphMode::kNone, GraphMode::kLearned}) {
      TrainConfig cfg = base;
      cfg.flow.arch = arch;
      cfg.flow.graph_mode = mode;
      cfg.inner_epochs = epochs;
      cfg.patience = epochs + 1;  // no early stop while timing
      cfg.al.max_outer = 1;
      const auto t0 = std::chrono::steady_clock::now();
      TrainResult res = train_gneuralflow(cfg, data, nullptr);
      const auto t1 = std::chrono::steady_clock::now();
      BenchRow row;
      row.arch = flows::arch_name(arch);
      row.graph_mode = flows::graph_mode_name(mode);
      row.epochs = static_cast<int>(res.history.size());
      row.seconds_per_epoch =
          std::chrono::duration<double>(t1 - t0).count() / std::max(1, row.epochs);
      rows.push_back(row);
    }
  }
  return rows;
}

void save_history_csv(const std::string& path, const std::vector<EpochRow>& history) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "# gnflow-history-v1\n";
  f << "epoch,train_loss,val_loss,h_A,lambda,c\n";
  for (const auto& r : history) {
    f << r.epoch << ',' << io::format_double(r.train_loss) << ',' << io::format_double(r.val_loss)
      << ',' << io::format_double(r.h_a) << ',' << io::format_double(r.lambda) << ','
      << io::format_double(r.c) << '\n';
  }
}

}  // namespace gnflow::training
