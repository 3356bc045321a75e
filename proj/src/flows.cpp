#include "gnflow/flows.hpp"

#include <cmath>
#include <fstream>
#include <stdexcept>

#include "gnflow/graphs.hpp"
#include "gnflow/io.hpp"
#include "gnflow/linalg.hpp"
#include "gnflow/rng.hpp"

namespace gnflow::flows {

namespace {

Tensor time_column(const Tensor& times, std::int64_t n) {
  const std::int64_t blocks = times.dim(0);
  Tensor t({blocks, n, 1});
  for (std::int64_t b = 0; b < blocks; ++b)
    for (std::int64_t i = 0; i < n; ++i) t.at(b, i, 0) = times.at(b);
  return t;
}

Tensor tanh_vec(const Tensor& times) {
  Tensor p(times.shape());
  for (std::int64_t i = 0; i < times.size(); ++i) p.at(i) = std::tanh(times.at(i));
  return p;
}

void check_times(const Tensor& times) {
  for (std::int64_t i = 0; i < times.size(); ++i) {
    const double t = times.at(i);
    if (!std::isfinite(t) || t < 0.0) {
      throw std::invalid_argument("flow: time arguments must be finite and >= 0, got " +
                                  std::to_string(t));
    }
  }
}

Tensor xavier(std::int64_t rows, std::int64_t cols, Rng& rng) {
  Tensor w({rows, cols});
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (std::int64_t i = 0; i < w.size(); ++i) w.at(i) = rng.uniform(-s, s);
  return w;
}

}  // namespace

const char* arch_name(Arch a) {
  switch (a) {
    case Arch::kResnet: return "resnet";
    case Arch::kGru: return "gru";
    case Arch::kCoupling: return "coupling";
  }
  return "?";
}

Arch arch_from_name(const std::string& s) {
  if (s == "resnet") return Arch::kResnet;
  if (s == "gru") return Arch::kGru;
  if (s == "coupling") return Arch::kCoupling;
  throw std::invalid_argument("unknown architecture '" + s + "' (valid: resnet, gru, coupling)");
}

const char* graph_mode_name(GraphMode m) {
  switch (m) {
    case GraphMode::kLearned: return "learned";
    case GraphMode::kTruth: return "truth";
    case GraphMode::kNone: return "none";
  }
  return "?";
}

GraphMode graph_mode_from_name(const std::string& s) {
  if (s == "learned") return GraphMode::kLearned;
  if (s == "truth") return GraphMode::kTruth;
  if (s == "none") return GraphMode::kNone;
  throw std::invalid_argument("unknown graph mode '" + s + "' (valid: learned, truth, none)");
}

FlowModel::FlowModel(FlowConfig cfg, std::uint64_t seed, const Tensor* a_init) : cfg_(cfg) {
  if (cfg_.nodes < 1 || cfg_.features < 1) {
    throw std::invalid_argument("flow: need nodes >= 1 and features >= 1");
  }
  if (cfg_.arch == Arch::kGru && cfg_.strict_invertibility) {
    const double lhs = cfg_.gru_alpha * (5.0 * cfg_.gru_beta + 6.0);
    if (lhs > 2.0 + 1e-12) {
      throw std::invalid_argument("gru flow: alpha(5 beta + 6) = " + std::to_string(lhs) +
                                  " exceeds 2; not invertible");
    }
  }

  // coupling needs at least two channels to split
  model_d_ = (cfg_.arch == Arch::kCoupling && cfg_.features == 1) ? 2 : cfg_.features;
  const std::int64_t n = cfg_.nodes, dm = model_d_;
  Rng rng(seed, /*stream=*/0xf10);

  auto add_mlp = [&](const std::string& prefix, std::int64_t in, std::int64_t out) {
    std::int64_t cur = in;
    for (int l = 0; l < cfg_.mlp_layers; ++l) {
      params_.add(prefix + ".w" + std::to_string(l), xavier(cur, cfg_.mlp_hidden, rng));
      params_.add(prefix + ".b" + std::to_string(l), Tensor::zeros({cfg_.mlp_hidden}));
      cur = cfg_.mlp_hidden;
    }
    params_.add(prefix + ".w" + std::to_string(cfg_.mlp_layers), xavier(cur, out, rng));
  };
  auto add_gcn = [&](const std::string& prefix, std::int64_t in, std::int64_t out) {
    params_.add(prefix + ".w", xavier(in, cfg_.gcn_hidden, rng));
    params_.add(prefix + ".u", xavier(cfg_.gcn_hidden, out, rng));
  };

  const bool graph_on = cfg_.graph_mode != GraphMode::kNone;
  switch (cfg_.arch) {
    case Arch::kResnet:
      if (graph_on) add_gcn("gcn", dm, dm);
      add_mlp("mlp1", 2 * dm + 1, dm);
      add_mlp("mlp2", dm + 1, dm);
      break;
    case Arch::kGru:
      if (graph_on) add_gcn("gcn", dm, dm);
      for (int k = 1; k <= 2; ++k) {
        add_mlp("fz" + std::to_string(k), dm + 1, dm);
        add_mlp("fr" + std::to_string(k), dm + 1, dm);
        add_mlp("fc" + std::to_string(k), dm + 1, dm);
      }
      break;
    case Arch::kCoupling:
      for (int b = 0; b < cfg_.coupling_blocks; ++b) {
        std::vector<std::int64_t> uidx, vidx;
        partition(b, &uidx, &vidx);
        const std::int64_t nu = static_cast<std::int64_t>(uidx.size());
        const std::int64_t nv = static_cast<std::int64_t>(vidx.size());
        const std::string p = "blk" + std::to_string(b);
        if (graph_on) add_gcn(p + ".gcn", nv, nv);
        const std::int64_t w = cfg_.coupling_trunk_width;
        // shared trunk (one layer each), separate bias-free heads
        params_.add(p + ".t1.w", xavier(nv + 1, w, rng));
        params_.add(p + ".t1.b", Tensor::zeros({w}));
        params_.add(p + ".t2.w", xavier(nv + 1, w, rng));
        params_.add(p + ".t2.b", Tensor::zeros({w}));
        params_.add(p + ".u.w", xavier(2 * w, nu, rng));
        params_.add(p + ".v.w", xavier(2 * w, nu, rng));
      }
      break;
  }

  if (cfg_.graph_mode == GraphMode::kLearned) {
    if (!a_init) throw std::invalid_argument("flow: learned graph mode needs an initial A");
    if (a_init->rank() != 2 || a_init->dim(0) != n || a_init->dim(1) != n) {
      throw std::invalid_argument("flow: A must be " + std::to_string(n) + "x" +
                                  std::to_string(n) + ", got " + a_init->shape_str());
    }
    Tensor a = a_init->clone();
    for (std::int64_t i = 0; i < n; ++i) a.at(i, i) = 0.0;
    params_.add("A", std::move(a));
  } else if (cfg_.graph_mode == GraphMode::kTruth) {
    if (!a_init) throw std::invalid_argument("flow: truth graph mode needs A");
    a_fixed_ = *a_init;
  } else {
    a_fixed_ = Tensor::zeros({n, n});
  }

  if (cfg_.contraction) clip_contraction();
}

Tensor FlowModel::adjacency() const {
  return cfg_.graph_mode == GraphMode::kLearned ? params_.value("A") : a_fixed_;
}

void FlowModel::set_adjacency(Tensor a) {
  if (cfg_.graph_mode == GraphMode::kLearned) {
    params_.set("A", std::move(a));
  } else {
    a_fixed_ = std::move(a);
  }
}

LeafMap FlowModel::leaves(bool trainable) const {
  LeafMap lv;
  for (const std::string& name : params_.names()) {
    lv.emplace(name, trainable ? ag::leaf(params_.value(name)) : ag::constant(params_.value(name)));
  }
  return lv;
}

void FlowModel::partition(int block, std::vector<std::int64_t>* u,
                          std::vector<std::int64_t>* v) const {
  u->clear();
  v->clear();
  for (std::int64_t c = 0; c < model_d_; ++c) {
    const bool even = (c % 2 == 0);
    if (even == (block % 2 == 0)) {
      u->push_back(c);
    } else {
      v->push_back(c);
    }
  }
}

ag::Var FlowModel::a_hat_var(const LeafMap& lv) const {
  if (cfg_.graph_mode == GraphMode::kLearned) {
    return graphs::normalize_node(lv.at("A"));
  }
  return ag::constant(graphs::normalize_adjacency(a_fixed_).a_hat);
}

ag::Var FlowModel::mlp(const LeafMap& lv, const std::string& prefix, ag::Var x, int layers) const {
  const std::int64_t rows = x->value.size() / x->value.dim(x->value.rank() - 1);
  std::vector<std::int64_t> out_shape = x->value.shape();
  ag::Var h = ag::reshape(std::move(x), {rows, out_shape.back()});
  for (int l = 0; l < layers; ++l) {
    h = ag::matmul(std::move(h), lv.at(prefix + ".w" + std::to_string(l)));
    h = ag::add_rowvec(std::move(h), lv.at(prefix + ".b" + std::to_string(l)));
    h = ag::tanh(std::move(h));
  }
  h = ag::matmul(std::move(h), lv.at(prefix + ".w" + std::to_string(layers)));
  out_shape.back() = h->value.dim(1);
  return ag::reshape(std::move(h), out_shape);
}

ag::Var FlowModel::gcn(const LeafMap& lv, ag::Var a_hat, ag::Var x, const Tensor* mask,
                       const std::string& prefix) const {
  const std::int64_t blocks = x->value.dim(0), n = x->value.dim(1);
  auto agg = [&](ag::Var h) {
    return mask ? ag::bmm_left_masked(a_hat, std::move(h), *mask)
                : ag::bmm_left(a_hat, std::move(h));
  };
  ag::Var h = agg(std::move(x));
  const std::int64_t din = h->value.dim(2);
  h = ag::reshape(std::move(h), {blocks * n, din});
  h = ag::matmul(std::move(h), lv.at(prefix + ".w"));
  h = ag::relu(std::move(h));
  h = ag::reshape(std::move(h), {blocks, n, cfg_.gcn_hidden});
  h = agg(std::move(h));
  h = ag::reshape(std::move(h), {blocks * n, cfg_.gcn_hidden});
  h = ag::matmul(std::move(h), lv.at(prefix + ".u"));
  const std::int64_t dout = h->value.dim(1);
  return ag::reshape(std::move(h), {blocks, n, dout});
}

ag::Var FlowModel::gru_half(const LeafMap& lv, int k, ag::Var x, const Tensor& tcol,
                            const Tensor& /*times*/) const {
  const std::string ks = std::to_string(k);
  ag::Var tc = ag::constant(tcol);
  ag::Var xt = ag::concat_cols({x, tc});
  ag::Var r = ag::scale(ag::sigmoid(mlp(lv, "fr" + ks, xt, cfg_.mlp_layers)), cfg_.gru_beta);
  ag::Var rc = ag::concat_cols({ag::mul(std::move(r), x), tc});
  ag::Var c = ag::tanh(mlp(lv, "fc" + ks, std::move(rc), cfg_.mlp_layers));
  ag::Var z = ag::scale(ag::sigmoid(mlp(lv, "fz" + ks, std::move(xt), cfg_.mlp_layers)),
                        cfg_.gru_alpha);
  return ag::mul(std::move(z), ag::sub(std::move(c), std::move(x)));
}

ag::Var FlowModel::forward(const LeafMap& lv, const Tensor& x0, const Tensor& times,
                           const Tensor* mask) const {
  if (x0.rank() != 3 || x0.dim(1) != cfg_.nodes || x0.dim(2) != model_d_) {
    throw std::invalid_argument("flow forward: x0 must be [B," + std::to_string(cfg_.nodes) +
                                "," + std::to_string(model_d_) + "], got " + x0.shape_str());
  }
  if (times.rank() != 1 || times.dim(0) != x0.dim(0)) {
    throw std::invalid_argument("flow forward: times " + times.shape_str() + " vs x0 " +
                                x0.shape_str());
  }
  check_times(times);
  const std::int64_t n = cfg_.nodes;
  const Tensor tcol = time_column(times, n);
  const Tensor phis = tanh_vec(times);
  const bool graph_on = cfg_.graph_mode != GraphMode::kNone;

  ag::Var x = ag::constant(x0);
  ag::Var tc = ag::constant(tcol);

  switch (cfg_.arch) {
    case Arch::kResnet: {
      ag::Var xtilde = graph_on
                           ? gcn(lv, a_hat_var(lv), x, mask, "gcn")
                           : ag::constant(Tensor::zeros({x0.dim(0), n, model_d_}));
      ag::Var m1 = mlp(lv, "mlp1", ag::concat_cols({x, xtilde, tc}), cfg_.mlp_layers);
      ag::Var m2 = mlp(lv, "mlp2", ag::concat_cols({x, tc}), cfg_.mlp_layers);
      ag::Var g = ag::mul(std::move(m1), std::move(m2));
      return ag::add(std::move(x), ag::scale_blocks(std::move(g), phis));
    }
    case Arch::kGru: {
      ag::Var xtilde = graph_on
                           ? gcn(lv, a_hat_var(lv), x, mask, "gcn")
                           : ag::constant(Tensor::zeros({x0.dim(0), n, model_d_}));
      ag::Var h1 = gru_half(lv, 1, x, tcol, times);
      ag::Var h2 = gru_half(lv, 2, std::move(xtilde), tcol, times);
      ag::Var g = ag::mul(std::move(h1), std::move(h2));
      return ag::add(std::move(x), ag::scale_blocks(std::move(g), phis));
    }
    case Arch::kCoupling: {
      ag::Var a_hat = graph_on ? a_hat_var(lv) : ag::Var{};
      ag::Var cur = std::move(x);
      for (int b = 0; b < cfg_.coupling_blocks; ++b) {
        std::vector<std::int64_t> uidx, vidx;
        partition(b, &uidx, &vidx);
        const std::string p = "blk" + std::to_string(b);
        ag::Var xu = ag::gather_cols(cur, uidx);
        ag::Var xv = ag::gather_cols(cur, vidx);
        ag::Var xtv = graph_on ? gcn(lv, a_hat, xv, mask, p + ".gcn")
                               : ag::constant(Tensor::zeros(
                                     {x0.dim(0), n, static_cast<std::int64_t>(vidx.size())}));
        auto [u, v] = coupling_nets(lv, p, xv, std::move(xtv), tc, x0.dim(0) * n);
        const std::int64_t nu = static_cast<std::int64_t>(uidx.size());
        u = ag::reshape(std::move(u), {x0.dim(0), n, nu});
        v = ag::reshape(std::move(v), {x0.dim(0), n, nu});
        ag::Var yu = ag::add(ag::mul(std::move(xu), ag::exp(ag::scale_blocks(std::move(u), phis))),
                             ag::scale_blocks(std::move(v), phis));
        cur = ag::scatter_cols(std::move(yu), std::move(xv), uidx, vidx);
      }
      return cur;
    }
  }
  throw std::logic_error("flow forward: unreachable");
}

// Shared-trunk scale/shift nets of one coupling block: u and v read the same
// trunk, which is fed both X_V and the graph-encoded X_tilde_V.
std::pair<ag::Var, ag::Var> FlowModel::coupling_nets(const LeafMap& lv, const std::string& p,
                                                     ag::Var xv, ag::Var xtv, ag::Var tc,
                                                     std::int64_t rows) const {
  auto trunk_half = [&](const std::string& tp, ag::Var in) {
    const std::int64_t width = in->value.dim(2);
    ag::Var h = ag::reshape(std::move(in), {rows, width});
    h = ag::matmul(std::move(h), lv.at(tp + ".w"));
    h = ag::add_rowvec(std::move(h), lv.at(tp + ".b"));
    return ag::tanh(std::move(h));  // [rows, w]
  };
  ag::Var t1 = trunk_half(p + ".t1", ag::concat_cols({std::move(xv), tc}));
  ag::Var t2 = trunk_half(p + ".t2", ag::concat_cols({std::move(xtv), tc}));
  ag::Var trunk = ag::concat_cols({std::move(t1), std::move(t2)});  // [rows, 2w]
  ag::Var u = ag::matmul(trunk, lv.at(p + ".u.w"));
  ag::Var v = ag::matmul(std::move(trunk), lv.at(p + ".v.w"));
  return {std::move(u), std::move(v)};
}

Tensor FlowModel::predict(const Tensor& x0, const Tensor& times, const Tensor* mask) const {
  const LeafMap lv = leaves(/*trainable=*/false);
  const Tensor xin = augment(x0);
  ag::Var out = forward(lv, xin, times, mask);
  return project(out->value);
}

Tensor FlowModel::invert(const Tensor& y, const Tensor& times, const Tensor* mask) const {
  if (cfg_.arch != Arch::kCoupling) {
    throw std::invalid_argument("invert: only the coupling flow has an exact inverse");
  }
  check_times(times);
  const LeafMap lv = leaves(false);
  const std::int64_t n = cfg_.nodes;
  const Tensor tcol = time_column(times, n);
  const Tensor phis = tanh_vec(times);
  const bool graph_on = cfg_.graph_mode != GraphMode::kNone;
  ag::Var a_hat = graph_on ? a_hat_var(lv) : ag::Var{};

  ag::Var tc = ag::constant(tcol);
  ag::Var cur = ag::constant(y);
  for (int b = cfg_.coupling_blocks - 1; b >= 0; --b) {
    std::vector<std::int64_t> uidx, vidx;
    partition(b, &uidx, &vidx);
    const std::string p = "blk" + std::to_string(b);
    ag::Var yu = ag::gather_cols(cur, uidx);
    ag::Var xv = ag::gather_cols(cur, vidx);  // V channels pass through
    ag::Var xtv = graph_on ? gcn(lv, a_hat, xv, mask, p + ".gcn")
                           : ag::constant(Tensor::zeros(
                                 {y.dim(0), n, static_cast<std::int64_t>(vidx.size())}));
    auto [u, v] = coupling_nets(lv, p, xv, std::move(xtv), tc, y.dim(0) * n);
    const std::int64_t nu = static_cast<std::int64_t>(uidx.size());
    u = ag::reshape(std::move(u), {y.dim(0), n, nu});
    v = ag::reshape(std::move(v), {y.dim(0), n, nu});
    // X_U = (Y_U - phi_v v) * exp(-phi_u u)
    ag::Var xu = ag::mul(ag::sub(std::move(yu), ag::scale_blocks(std::move(v), phis)),
                         ag::exp(ag::scale(ag::scale_blocks(std::move(u), phis), -1.0)));
    cur = ag::scatter_cols(std::move(xu), std::move(xv), uidx, vidx);
  }
  return cur->value;
}

Tensor FlowModel::encode(const Tensor& x, const Tensor& times, const Tensor* mask) const {
  if (cfg_.graph_mode == GraphMode::kNone || cfg_.arch == Arch::kCoupling) {
    return Tensor::zeros({x.dim(0), cfg_.nodes, model_d_});
  }
  (void)times;
  const LeafMap lv = leaves(false);
  return gcn(lv, a_hat_var(lv), ag::constant(augment(x)), mask, "gcn")->value;
}

std::vector<std::pair<std::string, double>> FlowModel::contraction_bounds() const {
  std::vector<std::pair<std::string, double>> out;
  const double b = cfg_.lipschitz_bound;
  for (const std::string& name : params_.names()) {
    if (name == "A" || params_.value(name).rank() != 2) continue;  // biases stay free
    const bool is_gcn = name.find(".gcn.") != std::string::npos || name.rfind("gcn.", 0) == 0;
    // ||A_hat||_2 <= 2 appears twice in the encoder, so halving the weight
    // bounds keeps the whole GCN a contraction: 4 (b/2)^2 = b^2 < 1.
    out.emplace_back(name, is_gcn ? b / 2.0 : b);
  }
  return out;
}

void FlowModel::clip_contraction() {
  for (const auto& [name, bound] : contraction_bounds()) {
    params_.set(name, clip_spectral(params_.value(name), bound));
  }
}

void FlowModel::zero_adjacency_diagonal() {
  if (cfg_.graph_mode != GraphMode::kLearned) return;
  Tensor a = params_.value("A").clone();
  for (std::int64_t i = 0; i < a.dim(0); ++i) a.at(i, i) = 0.0;
  params_.set("A", std::move(a));
}

Tensor FlowModel::augment(const Tensor& x) const {
  if (model_d_ == cfg_.features) return x;
  if (x.rank() != 3 || x.dim(2) != cfg_.features) {
    throw std::invalid_argument("augment: expected [B,n," + std::to_string(cfg_.features) +
                                "], got " + x.shape_str());
  }
  Tensor out({x.dim(0), x.dim(1), model_d_});
  for (std::int64_t b = 0; b < x.dim(0); ++b)
    for (std::int64_t i = 0; i < x.dim(1); ++i) out.at(b, i, 0) = x.at(b, i, 0);
  return out;  // appended channels start at zero
}

Tensor FlowModel::project(const Tensor& y) const {
  if (model_d_ == cfg_.features) return y;
  Tensor out({y.dim(0), y.dim(1), cfg_.features});
  for (std::int64_t b = 0; b < y.dim(0); ++b)
    for (std::int64_t i = 0; i < y.dim(1); ++i) out.at(b, i, 0) = y.at(b, i, 0);
  return out;
}

void FlowModel::save(const std::string& path) const {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  f << "gnflow-v1 " << arch_name(cfg_.arch) << ' ' << cfg_.nodes << ' ' << cfg_.features << ' '
    << cfg_.mlp_hidden << '\n';
  f << "graph_mode " << graph_mode_name(cfg_.graph_mode) << '\n';
  f << "mlp_layers " << cfg_.mlp_layers << '\n';
  f << "gcn_hidden " << cfg_.gcn_hidden << '\n';
  f << "coupling_blocks " << cfg_.coupling_blocks << '\n';
  f << "coupling_trunk_width " << cfg_.coupling_trunk_width << '\n';
  f << "lipschitz_bound " << io::format_double(cfg_.lipschitz_bound) << '\n';
  f << "gru_alpha " << io::format_double(cfg_.gru_alpha) << '\n';
  f << "gru_beta " << io::format_double(cfg_.gru_beta) << '\n';
  f << "contraction " << (cfg_.contraction ? 1 : 0) << '\n';
  for (const std::string& name : params_.names()) {
    io::write_tensor_block(f, name, params_.value(name));
  }
  if (cfg_.graph_mode != GraphMode::kLearned) {
    io::write_tensor_block(f, "A_fixed", a_fixed_);
  }
  f << "end\n";
}

FlowModel FlowModel::load(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot read checkpoint: " + path);
  std::string magic, arch;
  FlowConfig cfg;
  f >> magic;
  if (magic != "gnflow-v1") {
    throw std::runtime_error("checkpoint " + path + ": unknown format version '" + magic + "'");
  }
  f >> arch >> cfg.nodes >> cfg.features >> cfg.mlp_hidden;
  cfg.arch = arch_from_name(arch);
  std::string key;
  std::vector<std::pair<std::string, Tensor>> tensors;
  while (f >> key) {
    if (key == "end") break;
    if (key == "tensor") {
      tensors.push_back(io::read_tensor_block(f));
      continue;
    }
    std::string value;
    f >> value;
    if (key == "graph_mode") cfg.graph_mode = graph_mode_from_name(value);
    else if (key == "mlp_layers") cfg.mlp_layers = std::stoi(value);
    else if (key == "gcn_hidden") cfg.gcn_hidden = std::stoi(value);
    else if (key == "coupling_blocks") cfg.coupling_blocks = std::stoi(value);
    else if (key == "coupling_trunk_width") cfg.coupling_trunk_width = std::stoi(value);
    else if (key == "lipschitz_bound") cfg.lipschitz_bound = io::parse_double(value);
    else if (key == "gru_alpha") cfg.gru_alpha = io::parse_double(value);
    else if (key == "gru_beta") cfg.gru_beta = io::parse_double(value);
    else if (key == "contraction") cfg.contraction = value != "0";
    else throw std::runtime_error("checkpoint " + path + ": unknown key '" + key + "'");
  }

  Tensor a_init;
  for (auto& [name, t] : tensors) {
    if (name == "A" || name == "A_fixed") a_init = t;
  }
  FlowModel model(cfg, /*seed=*/0,
                  cfg.graph_mode == GraphMode::kNone ? nullptr : &a_init);
  for (auto& [name, t] : tensors) {
    if (name == "A_fixed") continue;
    model.params_.set(name, std::move(t));
  }
  if (cfg.graph_mode == GraphMode::kTruth) model.a_fixed_ = a_init;
  return model;
}

}  // namespace gnflow::flows
