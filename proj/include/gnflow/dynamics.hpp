#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "gnflow/tensor.hpp"

namespace gnflow::dynamics {

enum class SystemKind { kSink, kTriangle, kSawtooth, kSquare };

const char* kind_name(SystemKind k);
SystemKind kind_from_name(const std::string& s);
std::int64_t kind_features(SystemKind k);  // 2 for Sink, 1 otherwise

/// The 2D sink vector field used throughout the experiments.
Tensor default_sink_matrix();  // [[-4,10],[-3,2]]

struct SystemSpec {
  SystemKind kind = SystemKind::kTriangle;
  std::int64_t nodes = 0;
  Tensor adjacency;    // n x n DAG
  Tensor sink_matrix;  // 2x2, Sink only
};

/// f(t, X, A) = (I - A^T) X B^T, the interacting sink field. Autonomous, the
/// time argument is accepted for the solver interface.
Tensor sink_rhs(double t, const Tensor& x, const Tensor& a, const Tensor& b_dyn);

/// Integral of sign(sin(u)) over [0, t]: a 2*pi-periodic triangle wave.
double triangle_wave(double t);

Tensor triangle_solution(double t, const Tensor& x0, const Tensor& a);
Tensor sawtooth_solution(double t, const Tensor& x0, const Tensor& a);
Tensor square_solution(double t, const Tensor& x0, const Tensor& a);

using Rhs = std::function<Tensor(double, const Tensor&)>;

/// Classic fixed-substep RK4 along a sorted time grid starting at t = 0.
/// Substep <= max_step. Aborts (std::runtime_error naming the time) if the
/// state leaves the finite range.
std::vector<Tensor> rk4_solve(const Rhs& rhs, const Tensor& x0, const std::vector<double>& times,
                              double max_step = 1e-3);

/// Irregularly observed trajectories of one system: shared time grid length N
/// per sample, per-node presence masks, and the t = 0 initial states.
struct TrajectoryBatch {
  SystemKind kind = SystemKind::kTriangle;
  std::int64_t nodes = 0;
  std::int64_t features = 0;
  std::int64_t num_times = 0;
  std::uint64_t seed = 0;
  Tensor adjacency;
  std::vector<std::vector<double>> times;  // per sample, sorted, in [0, 10]
  std::vector<Tensor> values;              // per sample [N, n, d]
  std::vector<Tensor> masks;               // per sample [N, n], 1 = present
  std::vector<Tensor> initial;             // per sample [n, d]

  std::int64_t samples() const { return static_cast<std::int64_t>(times.size()); }
};

/// X0 ~ U[0,1]^{n x 2} for Sink (ground truth via RK4), U[-2,2]^{n x 1} for
/// the closed-form systems; N uniformly random times on [0, 10] per sample;
/// full masks. Deterministic in the seed.
TrajectoryBatch sample_dataset(const SystemSpec& spec, std::int64_t samples,
                               std::int64_t num_times, std::uint64_t seed);

void save_batch(const std::string& path, const TrajectoryBatch& batch);
TrajectoryBatch load_batch(const std::string& path);

}  // namespace gnflow::dynamics
