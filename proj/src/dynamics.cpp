#include "gnflow/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "gnflow/io.hpp"
#include "gnflow/rng.hpp"
#include "gnflow/tensor_math.hpp"

namespace gnflow::dynamics {

namespace {
constexpr double kTwoPi = 6.283185307179586476925287;

Tensor i_minus_at(const Tensor& a) {
  const std::int64_t n = a.dim(0);
  Tensor m = Tensor::eye(n);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) m.at(i, j) -= a.at(j, i);
  return m;
}

Tensor shifted_solution(double shift, const Tensor& x0, const Tensor& a) {
  Tensor xs(x0.shape());
  for (std::int64_t i = 0; i < x0.size(); ++i) xs.at(i) = x0.at(i) + shift;
  return t_matmul(i_minus_at(a), xs);
}
}  // namespace

const char* kind_name(SystemKind k) {
  switch (k) {
    case SystemKind::kSink: return "sink";
    case SystemKind::kTriangle: return "triangle";
    case SystemKind::kSawtooth: return "sawtooth";
    case SystemKind::kSquare: return "square";
  }
  return "?";
}

SystemKind kind_from_name(const std::string& s) {
  if (s == "sink") return SystemKind::kSink;
  if (s == "triangle") return SystemKind::kTriangle;
  if (s == "sawtooth") return SystemKind::kSawtooth;
  if (s == "square") return SystemKind::kSquare;
  throw std::invalid_argument("unknown system '" + s +
                              "' (valid: sink, triangle, sawtooth, square)");
}

std::int64_t kind_features(SystemKind k) { return k == SystemKind::kSink ? 2 : 1; }

Tensor default_sink_matrix() { return Tensor({2, 2}, {-4.0, 10.0, -3.0, 2.0}); }

Tensor sink_rhs(double /*t*/, const Tensor& x, const Tensor& a, const Tensor& b_dyn) {
  if (x.rank() != 2 || x.dim(1) != 2 || b_dyn.rank() != 2 || b_dyn.dim(0) != 2 ||
      b_dyn.dim(1) != 2 || a.dim(0) != x.dim(0)) {
    throw std::invalid_argument("sink_rhs: shapes X " + x.shape_str() + ", A " + a.shape_str() +
                                ", B " + b_dyn.shape_str());
  }
  return t_matmul(i_minus_at(a), t_matmul(x, t_transpose(b_dyn)));
}

double triangle_wave(double t) {
  const double r = std::fmod(t, kTwoPi);
  return kTwoPi / 2.0 - std::fabs(r - kTwoPi / 2.0);
}

Tensor triangle_solution(double t, const Tensor& x0, const Tensor& a) {
  return shifted_solution(triangle_wave(t), x0, a);
}

Tensor sawtooth_solution(double t, const Tensor& x0, const Tensor& a) {
  return shifted_solution(t - std::floor(t), x0, a);
}

Tensor square_solution(double t, const Tensor& x0, const Tensor& a) {
  const double s = std::sin(t);
  return shifted_solution(s > 0.0 ? 1.0 : (s < 0.0 ? -1.0 : 0.0), x0, a);
}

std::vector<Tensor> rk4_solve(const Rhs& rhs, const Tensor& x0, const std::vector<double>& times,
                              double max_step) {
  for (std::size_t i = 0; i + 1 < times.size(); ++i) {
    if (times[i] > times[i + 1]) throw std::invalid_argument("rk4_solve: times must be sorted");
  }
  if (!times.empty() && times.front() < 0.0) {
    throw std::invalid_argument("rk4_solve: times must be >= 0");
  }

  std::vector<Tensor> out;
  out.reserve(times.size());
  Tensor x = x0.clone();
  double t = 0.0;
  for (double target : times) {
    const double gap = target - t;
    if (gap > 0.0) {
      const auto steps = static_cast<std::int64_t>(std::ceil(gap / max_step));
      const double h = gap / static_cast<double>(steps);
      for (std::int64_t s = 0; s < steps; ++s) {
        const Tensor k1 = rhs(t, x);
        const Tensor k2 = rhs(t + h / 2, t_add(x, t_scale(k1, h / 2)));
        const Tensor k3 = rhs(t + h / 2, t_add(x, t_scale(k2, h / 2)));
        const Tensor k4 = rhs(t + h, t_add(x, t_scale(k3, h)));
        Tensor incr = t_add(t_add(k1, k4), t_scale(t_add(k2, k3), 2.0));
        x = t_add(x, t_scale(incr, h / 6.0));
        t += h;
      }
      t = target;  // avoid drift from repeated addition
      if (!x.all_finite()) {
        throw std::runtime_error("rk4_solve: non-finite state at t = " + std::to_string(target));
      }
    }
    out.push_back(x);
  }
  return out;
}

TrajectoryBatch sample_dataset(const SystemSpec& spec, std::int64_t samples,
                               std::int64_t num_times, std::uint64_t seed) {
  if (samples < 1 || num_times < 1) {
    throw std::invalid_argument("sample_dataset: need samples >= 1 and num_times >= 1");
  }
  const std::int64_t n = spec.nodes;
  const std::int64_t d = kind_features(spec.kind);
  if (spec.adjacency.rank() != 2 || spec.adjacency.dim(0) != n || spec.adjacency.dim(1) != n) {
    throw std::invalid_argument("sample_dataset: adjacency " + spec.adjacency.shape_str() +
                                " for n = " + std::to_string(n));
  }

  TrajectoryBatch batch;
  batch.kind = spec.kind;
  batch.nodes = n;
  batch.features = d;
  batch.num_times = num_times;
  batch.seed = seed;
  batch.adjacency = spec.adjacency;
  batch.times.resize(static_cast<std::size_t>(samples));
  batch.values.resize(static_cast<std::size_t>(samples));
  batch.masks.resize(static_cast<std::size_t>(samples));
  batch.initial.resize(static_cast<std::size_t>(samples));

  const Tensor b_dyn = spec.kind == SystemKind::kSink
                           ? (spec.sink_matrix.defined() ? spec.sink_matrix : default_sink_matrix())
                           : Tensor();
  Rng root(seed, /*stream=*/0xda7a);

#pragma omp parallel for schedule(dynamic)
  for (std::int64_t s = 0; s < samples; ++s) {
    Rng rng = root.split(static_cast<std::uint64_t>(s));
    std::vector<double> ts(static_cast<std::size_t>(num_times));
    for (auto& t : ts) t = rng.uniform(0.0, 10.0);
    std::sort(ts.begin(), ts.end());

    Tensor x0({n, d});
    for (std::int64_t i = 0; i < x0.size(); ++i) {
      x0.at(i) = spec.kind == SystemKind::kSink ? rng.uniform() : rng.uniform(-2.0, 2.0);
    }

    Tensor vals({num_times, n, d});
    if (spec.kind == SystemKind::kSink) {
      auto rhs = [&](double t, const Tensor& x) { return sink_rhs(t, x, spec.adjacency, b_dyn); };
      const std::vector<Tensor> traj = rk4_solve(rhs, x0, ts);
      for (std::int64_t j = 0; j < num_times; ++j)
        for (std::int64_t i = 0; i < n; ++i)
          for (std::int64_t c = 0; c < d; ++c) vals.at(j, i, c) = traj[j].at(i, c);
    } else {
      for (std::int64_t j = 0; j < num_times; ++j) {
        Tensor xt;
        switch (spec.kind) {
          case SystemKind::kTriangle: xt = triangle_solution(ts[j], x0, spec.adjacency); break;
          case SystemKind::kSawtooth: xt = sawtooth_solution(ts[j], x0, spec.adjacency); break;
          default: xt = square_solution(ts[j], x0, spec.adjacency); break;
        }
        for (std::int64_t i = 0; i < n; ++i) vals.at(j, i, 0) = xt.at(i, 0);
      }
    }

    batch.times[s] = std::move(ts);
    batch.values[s] = std::move(vals);
    batch.masks[s] = Tensor::full({num_times, n}, 1.0);
    batch.initial[s] = std::move(x0);
  }
  return batch;
}

void save_batch(const std::string& path, const TrajectoryBatch& batch) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write " + path);
  f << "gnflow-data-v1 " << kind_name(batch.kind) << ' ' << batch.nodes << ' ' << batch.features
    << ' ' << batch.num_times << ' ' << batch.samples() << ' ' << batch.seed << '\n';
  for (std::int64_t s = 0; s < batch.samples(); ++s) {
    const auto write_row = [&f](const double* p, std::int64_t count) {
      for (std::int64_t i = 0; i < count; ++i) {
        if (i) f << ',';
        f << io::format_double(p[i]);
      }
      f << '\n';
    };
    write_row(batch.initial[s].data(), batch.initial[s].size());
    write_row(batch.times[s].data(), static_cast<std::int64_t>(batch.times[s].size()));
    const std::int64_t nd = batch.nodes * batch.features;
    for (std::int64_t j = 0; j < batch.num_times; ++j) {
      write_row(batch.values[s].data() + j * nd, nd);
    }
    for (std::int64_t j = 0; j < batch.num_times; ++j) {
      write_row(batch.masks[s].data() + j * batch.nodes, batch.nodes);
    }
  }
  f << "adjacency\n";
  for (std::int64_t i = 0; i < batch.nodes; ++i) {
    for (std::int64_t j = 0; j < batch.nodes; ++j) {
      if (j) f << ',';
      f << io::format_double(batch.adjacency.at(i, j));
    }
    f << '\n';
  }
}

TrajectoryBatch load_batch(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read dataset: " + path);
  std::string magic, kind;
  TrajectoryBatch batch;
  std::int64_t samples = 0;
  f >> magic;
  if (magic != "gnflow-data-v1") {
    throw std::runtime_error(path + ": unknown format version '" + magic + "'");
  }
  f >> kind >> batch.nodes >> batch.features >> batch.num_times >> samples >> batch.seed;
  batch.kind = kind_from_name(kind);
  f >> std::ws;

  auto read_row = [&](std::int64_t expect) {
    std::string line;
    if (!std::getline(f, line)) throw std::runtime_error(path + ": truncated");
    auto toks = io::split(line, ',');
    if (static_cast<std::int64_t>(toks.size()) != expect) {
      throw std::runtime_error(path + ": expected " + std::to_string(expect) + " values, got " +
                               std::to_string(toks.size()));
    }
    std::vector<double> out;
    out.reserve(toks.size());
    for (const auto& t : toks) out.push_back(io::parse_double(t));
    return out;
  };

  const std::int64_t n = batch.nodes, d = batch.features, nt = batch.num_times;
  for (std::int64_t s = 0; s < samples; ++s) {
    batch.initial.emplace_back(std::vector<std::int64_t>{n, d}, read_row(n * d));
    batch.times.push_back(read_row(nt));
    Tensor vals({nt, n, d});
    for (std::int64_t j = 0; j < nt; ++j) {
      auto row = read_row(n * d);
      std::copy(row.begin(), row.end(), vals.data() + j * n * d);
    }
    batch.values.push_back(std::move(vals));
    Tensor mask({nt, n});
    for (std::int64_t j = 0; j < nt; ++j) {
      auto row = read_row(n);
      std::copy(row.begin(), row.end(), mask.data() + j * n);
    }
    batch.masks.push_back(std::move(mask));
  }
  std::string marker;
  f >> marker;
  if (marker != "adjacency") throw std::runtime_error(path + ": missing adjacency block");
  f >> std::ws;
  Tensor a({n, n});
  for (std::int64_t i = 0; i < n; ++i) {
    auto row = read_row(n);
    std::copy(row.begin(), row.end(), a.data() + i * n);
  }
  batch.adjacency = std::move(a);
  return batch;
}

}  // namespace gnflow::dynamics
