// gnflow: generate | train | eval | study | bench
//
// Every command is deterministic in (flags, input files, seed) apart from the
// wall-clock fields in manifests and timing tables.

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "gnflow/dynamics.hpp"
#include "gnflow/flows.hpp"
#include "gnflow/graphs.hpp"
#include "gnflow/io.hpp"
#include "gnflow/training.hpp"

namespace fs = std::filesystem;
using namespace gnflow;

namespace {

constexpr const char* kVersionTag = "gnflow 0.1.0";

// exit codes: 0 ok, 2 usage, 3 data, 4 numerical failure
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t default_seed() {
  if (const char* env = std::getenv("GNFLOW_SEED")) {
    return static_cast<std::uint64_t>(std::strtoull(env, nullptr, 10));
  }
  return 0;
}

dynamics::TrajectoryBatch load_data_or_die(const std::string& path) {
  if (!fs::exists(path)) throw DataError("dataset not found: " + path);
  try {
    return dynamics::load_batch(path);
  } catch (const std::exception& e) {
    throw DataError(e.what());
  }
}

void write_manifest(const fs::path& dir, const io::KeyValues& config, double wall_seconds) {
  io::KeyValues kv = config;
  kv.emplace_back("version", kVersionTag);
  kv.emplace_back("output_dir", dir.string());
  kv.emplace_back("wall_seconds", io::format_double(wall_seconds));
  io::write_kv((dir / "manifest.txt").string(), "gnflow-manifest-v1", kv);
}

void write_metrics_json(const std::string& path, const io::KeyValues& kv) {
  std::ofstream f(path);
  if (!f) throw DataError("cannot write " + path);
  f << "{\n  \"format\": \"gnflow-metrics-v1\"";
  for (const auto& [k, v] : kv) {
    const bool quoted = !v.empty() && !(std::isdigit(static_cast<unsigned char>(v[0])) ||
                                        v[0] == '-' || v[0] == '+' || v[0] == '.');
    f << ",\n  \"" << k << "\": " << (quoted ? "\"" + v + "\"" : v);
  }
  f << "\n}\n";
}

training::TrainConfig make_train_config(flows::Arch arch, flows::GraphMode mode,
                                        std::int64_t nodes, std::uint64_t seed, double lr,
                                        int epochs, int patience, std::int64_t batch_size,
                                        int max_outer) {
  training::TrainConfig cfg;
  cfg.flow.arch = arch;
  cfg.flow.graph_mode = mode;
  cfg.al = training::al_defaults_for_nodes(nodes);
  cfg.al.max_outer = max_outer;
  cfg.adam.lr = lr;
  cfg.inner_epochs = epochs;
  cfg.patience = patience;
  cfg.batch_size = batch_size;
  cfg.seed = seed;
  return cfg;
}

int cmd_generate(const std::string& system, std::int64_t nodes, std::int64_t times,
                 std::int64_t samples, double density, std::uint64_t seed,
                 const std::string& out) {
  dynamics::SystemSpec spec;
  spec.kind = dynamics::kind_from_name(system);
  spec.nodes = nodes;
  spec.adjacency = graphs::random_dag(nodes, density, seed);
  if (spec.kind == dynamics::SystemKind::kSink) spec.sink_matrix = dynamics::default_sink_matrix();
  const auto batch = dynamics::sample_dataset(spec, samples, times, seed);
  dynamics::save_batch(out, batch);
  io::save_matrix_csv(out + ".dag.csv", spec.adjacency);
  std::cout << "wrote " << out << " (" << samples << " samples) and " << out << ".dag.csv\n";
  return 0;
}

int cmd_train(const std::string& data_path, const std::string& arch, const std::string& graph,
              const std::string& out_dir, std::uint64_t seed, double lr, int epochs, int patience,
              std::int64_t batch_size, int max_outer, const io::KeyValues& config_snapshot) {
  const auto data = load_data_or_die(data_path);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  write_manifest(dir, config_snapshot, 0.0);  // write-ahead: valid even if interrupted

  const auto cfg = make_train_config(flows::arch_from_name(arch),
                                     flows::graph_mode_from_name(graph), data.nodes, seed, lr,
                                     epochs, patience, batch_size, max_outer);
  const auto t0 = std::chrono::steady_clock::now();
  training::TrainResult result =
      training::train_gneuralflow(cfg, data, cfg.flow.graph_mode == flows::GraphMode::kTruth
                                                ? &data.adjacency
                                                : nullptr);
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  training::save_history_csv((dir / "history.csv").string(), result.history);
  result.model.save((dir / "model.ckpt").string());
  io::save_matrix_csv((dir / "learned_dag.csv").string(), result.learned_a);
  write_manifest(dir, config_snapshot, wall);
  if (result.aborted) {
    throw NumericalError("training diverged (non-finite loss); history written to " +
                         (dir / "history.csv").string());
  }

  const double test_mse = training::evaluate_forecast(result.model, data, result.split.test);
  io::KeyValues metrics;
  metrics.emplace_back("test_mse", io::format_double(test_mse));
  metrics.emplace_back("best_val", io::format_double(result.best_val));
  metrics.emplace_back("h_A", io::format_double(result.final_h));
  metrics.emplace_back("dag_converged", result.converged_dag ? "1" : "0");
  metrics.emplace_back("epochs", std::to_string(result.history.size()));
  write_metrics_json((dir / "metrics.json").string(), metrics);
  std::cout << "test_mse = " << io::format_double(test_mse) << ", h(A) = "
            << io::format_double(result.final_h) << ", epochs = " << result.history.size()
            << '\n';
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data_path,
             const std::string& truth_path, double threshold, const std::string& out) {
  if (!fs::exists(ckpt_path)) throw DataError("checkpoint not found: " + ckpt_path);
  const auto data = load_data_or_die(data_path);
  flows::FlowModel model = flows::FlowModel::load(ckpt_path);
  std::vector<std::int64_t> all(static_cast<std::size_t>(data.samples()));
  for (std::int64_t i = 0; i < data.samples(); ++i) all[static_cast<std::size_t>(i)] = i;
  const double mse = training::evaluate_forecast(model, data, all);

  io::KeyValues metrics;
  metrics.emplace_back("mse", io::format_double(mse));
  metrics.emplace_back("threshold", io::format_double(threshold));
  if (!truth_path.empty()) {
    if (!fs::exists(truth_path)) throw DataError("truth DAG not found: " + truth_path);
    const Tensor truth = io::load_matrix_csv(truth_path);
    const auto gm = graphs::graph_metrics(model.adjacency(), truth, threshold);
    metrics.emplace_back("tpr", io::format_double(gm.tpr));
    metrics.emplace_back("fdr", io::format_double(gm.fdr));
    metrics.emplace_back("fpr", io::format_double(gm.fpr));
    metrics.emplace_back("shd", std::to_string(gm.shd));
  }
  write_metrics_json(out, metrics);
  std::cout << "mse = " << io::format_double(mse) << (truth_path.empty() ? "" : " (+graph metrics)")
            << " -> " << out << '\n';
  return 0;
}

int cmd_study(const std::string& data_path, const std::vector<double>& sigmas,
              const std::vector<std::uint64_t>& seeds, const std::string& arch, double threshold,
              double lr, int epochs, int patience, std::int64_t batch_size, int max_outer,
              int jobs, const std::string& out) {
  const auto data = load_data_or_die(data_path);
  struct Row {
    std::uint64_t seed;
    training::StudyRow r;
  };
  std::vector<Row> rows(sigmas.size() * seeds.size());

  std::vector<std::thread> workers;
  std::size_t next = 0;
  auto run_one = [&](std::size_t si, std::size_t gi) {
    training::TrainConfig cfg = make_train_config(
        flows::arch_from_name(arch), flows::GraphMode::kLearned, data.nodes, seeds[gi], lr,
        epochs, patience, batch_size, max_outer);
    auto out_rows = training::perturbation_study(cfg, data, {sigmas[si]}, threshold);
    rows[gi * sigmas.size() + si] = {seeds[gi], out_rows.front()};
  };
  if (jobs <= 1) {
    for (std::size_t gi = 0; gi < seeds.size(); ++gi)
      for (std::size_t si = 0; si < sigmas.size(); ++si) run_one(si, gi);
  } else {
    std::vector<std::pair<std::size_t, std::size_t>> tasks;
    for (std::size_t gi = 0; gi < seeds.size(); ++gi)
      for (std::size_t si = 0; si < sigmas.size(); ++si) tasks.emplace_back(si, gi);
    std::mutex mu;
    for (int w = 0; w < jobs; ++w) {
      workers.emplace_back([&] {
        while (true) {
          std::size_t t;
          {
            std::lock_guard<std::mutex> lock(mu);
            if (next >= tasks.size()) return;
            t = next++;
          }
          run_one(tasks[t].first, tasks[t].second);
        }
      });
    }
    for (auto& w : workers) w.join();
  }

  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out);
  f << "# gnflow-study-v1\n";
  f << "sigma,seed,tpr,fdr,fpr,shd,mse,h_A\n";
  for (const auto& [seed, r] : rows) {
    f << io::format_double(r.sigma) << ',' << seed << ',' << io::format_double(r.metrics.tpr)
      << ',' << io::format_double(r.metrics.fdr) << ',' << io::format_double(r.metrics.fpr) << ','
      << r.metrics.shd << ',' << io::format_double(r.mse) << ',' << io::format_double(r.h_a)
      << '\n';
  }
  std::cout << "wrote " << out << '\n';
  return 0;
}

int cmd_bench(const std::string& data_path, int epochs, std::uint64_t seed, double lr,
              std::int64_t batch_size, const std::string& out) {
  const auto data = load_data_or_die(data_path);
  training::TrainConfig base = make_train_config(flows::Arch::kResnet, flows::GraphMode::kNone,
                                                 data.nodes, seed, lr, epochs, epochs + 1,
                                                 batch_size, 1);
  const auto rows = training::timing_benchmark(data, base, epochs);
  std::ofstream f(out);
  if (!f) throw DataError("cannot write " + out);
  f << "# gnflow-bench-v1\n";
  f << "arch,graph,epochs,seconds_per_epoch\n";
  for (const auto& r : rows) {
    f << r.arch << ',' << r.graph_mode << ',' << r.epochs << ','
      << io::format_double(r.seconds_per_epoch) << '\n';
    std::cout << r.arch << " (" << r.graph_mode << "): "
              << io::format_double(r.seconds_per_epoch) << " s/epoch\n";
  }
  std::cout << "wrote " << out << '\n';
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GNeuralFlow: graph-conditioned neural flows for interacting ODE systems"};
  app.require_subcommand(1);
  app.set_config("--config")->configurable(false);

  std::uint64_t seed = default_seed();

  // generate
  auto* gen = app.add_subcommand("generate", "sample a synthetic interacting system");
  std::string g_system = "triangle", g_out = "data.gnf";
  std::int64_t g_nodes = 5, g_times = 100, g_samples = 200;
  double g_density = 0.3;
  gen->add_option("--system", g_system, "sink|triangle|sawtooth|square");
  gen->add_option("--nodes", g_nodes)->check(CLI::PositiveNumber);
  gen->add_option("--times", g_times)->check(CLI::PositiveNumber);
  gen->add_option("--samples", g_samples)->check(CLI::PositiveNumber);
  gen->add_option("--density", g_density)->check(CLI::Range(1e-9, 1.0));
  gen->add_option("--seed", seed);
  gen->add_option("--out", g_out);

  // train
  auto* tr = app.add_subcommand("train", "train a model on a generated dataset");
  std::string t_data, t_arch = "resnet", t_graph = "learned", t_out = "run";
  double t_lr = 1e-3;
  int t_epochs = 100, t_patience = 10, t_outer = 20;
  std::int64_t t_batch = 32;
  tr->add_option("--data", t_data)->required();
  tr->add_option("--arch", t_arch, "resnet|gru|coupling");
  tr->add_option("--graph", t_graph, "learned|truth|none");
  tr->add_option("--out-dir", t_out);
  tr->add_option("--seed", seed);
  tr->add_option("--lr", t_lr);
  tr->add_option("--epochs", t_epochs, "inner epochs per outer iteration");
  tr->add_option("--patience", t_patience);
  tr->add_option("--batch", t_batch);
  tr->add_option("--outer", t_outer, "max outer (augmented Lagrangian) iterations");

  // eval
  auto* ev = app.add_subcommand("eval", "forecast MSE (and graph metrics) of a checkpoint");
  std::string e_ckpt, e_data, e_truth, e_out = "metrics.json";
  double e_threshold = 0.3;
  ev->add_option("--checkpoint", e_ckpt)->required();
  ev->add_option("--data", e_data)->required();
  ev->add_option("--truth", e_truth, "ground-truth DAG CSV (enables graph metrics)");
  ev->add_option("--threshold", e_threshold, "edge detection threshold");
  ev->add_option("--out", e_out);

  // study
  auto* st = app.add_subcommand("study", "perturbation sweep over initial-graph noise");
  std::string s_data, s_arch = "resnet", s_out = "study.csv";
  std::vector<double> s_sigmas{0.0, 0.1, 0.2, 0.3};
  std::vector<std::uint64_t> s_seeds{0};
  double s_threshold = 0.3, s_lr = 1e-3;
  int s_epochs = 30, s_patience = 6, s_outer = 8, s_jobs = 1;
  std::int64_t s_batch = 32;
  st->add_option("--data", s_data)->required();
  st->add_option("--sigmas", s_sigmas)->delimiter(',');
  st->add_option("--seeds", s_seeds)->delimiter(',');
  st->add_option("--arch", s_arch);
  st->add_option("--threshold", s_threshold);
  st->add_option("--lr", s_lr);
  st->add_option("--epochs", s_epochs);
  st->add_option("--patience", s_patience);
  st->add_option("--outer", s_outer);
  st->add_option("--batch", s_batch);
  st->add_option("--jobs", s_jobs, "parallel training runs");
  st->add_option("--out", s_out);

  // bench
  auto* be = app.add_subcommand("bench", "seconds/epoch per architecture and graph mode");
  std::string b_data, b_out = "bench.csv";
  int b_epochs = 3;
  double b_lr = 1e-3;
  std::int64_t b_batch = 32;
  be->add_option("--data", b_data)->required();
  be->add_option("--epochs", b_epochs);
  be->add_option("--lr", b_lr);
  be->add_option("--batch", b_batch);
  be->add_option("--seed", seed);
  be->add_option("--out", b_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) {
      return cmd_generate(g_system, g_nodes, g_times, g_samples, g_density, seed, g_out);
    }
    if (tr->parsed()) {
      io::KeyValues snapshot = {{"command", "train"}, {"data", t_data},     {"arch", t_arch},
                                {"graph", t_graph},   {"seed", std::to_string(seed)},
                                {"lr", io::format_double(t_lr)},
                                {"epochs", std::to_string(t_epochs)},
                                {"patience", std::to_string(t_patience)},
                                {"batch", std::to_string(t_batch)},
                                {"outer", std::to_string(t_outer)}};
      return cmd_train(t_data, t_arch, t_graph, t_out, seed, t_lr, t_epochs, t_patience, t_batch,
                       t_outer, snapshot);
    }
    if (ev->parsed()) return cmd_eval(e_ckpt, e_data, e_truth, e_threshold, e_out);
    if (st->parsed()) {
      return cmd_study(s_data, s_sigmas, s_seeds, s_arch, s_threshold, s_lr, s_epochs, s_patience,
                       s_batch, s_outer, s_jobs, s_out);
    }
    if (be->parsed()) return cmd_bench(b_data, b_epochs, seed, b_lr, b_batch, b_out);
  } catch (const NumericalError& e) {
    std::cerr << "numerical failure: " << e.what() << '\n';
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << '\n';
    return 3;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  }
  return 2;
}
