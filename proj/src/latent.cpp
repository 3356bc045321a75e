#include "gnflow/latent.hpp"

#include <cmath>
#include <stdexcept>

#include "gnflow/graphs.hpp"
#include "gnflow/rng.hpp"

namespace gnflow::latent {

namespace {
constexpr double kLog2Pi = 1.8378770664093454835606594728112;

Tensor xavier(std::int64_t rows, std::int64_t cols, Rng& rng) {
  Tensor w({rows, cols});
  const double s = std::sqrt(6.0 / static_cast<double>(rows + cols));
  for (std::int64_t i = 0; i < w.size(); ++i) w.at(i) = rng.uniform(-s, s);
  return w;
}

Tensor tanh_vec(const Tensor& v) {
  Tensor p(v.shape());
  for (std::int64_t i = 0; i < v.size(); ++i) p.at(i) = std::tanh(v.at(i));
  return p;
}

Tensor time_column(const Tensor& dt, std::int64_t n) {
  Tensor t({dt.dim(0), n, 1});
  for (std::int64_t b = 0; b < dt.dim(0); ++b)
    for (std::int64_t i = 0; i < n; ++i) t.at(b, i, 0) = dt.at(b);
  return t;
}
}  // namespace

LatentBatch make_latent_batch(const dynamics::TrajectoryBatch& data,
                              const std::vector<std::int64_t>& samples) {
  LatentBatch out;
  out.samples = static_cast<std::int64_t>(samples.size());
  out.num_times = data.num_times;
  out.times = Tensor({out.samples, out.num_times});
  const std::int64_t n = data.nodes, d = data.features;
  for (std::int64_t j = 0; j < out.num_times; ++j) {
    Tensor x({out.samples, n, d});
    Tensor m({out.samples, n});
    for (std::int64_t s = 0; s < out.samples; ++s) {
      const auto src = static_cast<std::size_t>(samples[static_cast<std::size_t>(s)]);
      out.times.at(s, j) = data.times[src][static_cast<std::size_t>(j)];
      for (std::int64_t i = 0; i < n; ++i) {
        m.at(s, i) = data.masks[src].at(j, i);
        for (std::int64_t c = 0; c < d; ++c) x.at(s, i, c) = data.values[src].at(j, i, c);
      }
    }
    out.x.push_back(std::move(x));
    out.mask.push_back(std::move(m));
  }
  return out;
}

LatentModel::LatentModel(HeadKind kind, LatentConfig cfg, Tensor adjacency, std::uint64_t seed)
    : kind_(kind), cfg_(cfg), a_(std::move(adjacency)) {
  if (cfg_.nodes < 1 || cfg_.features < 1) {
    throw std::invalid_argument("latent: need nodes >= 1 and features >= 1");
  }
  if (a_.rank() != 2 || a_.dim(0) != cfg_.nodes || a_.dim(1) != cfg_.nodes) {
    throw std::invalid_argument("latent: adjacency " + a_.shape_str() + " for n = " +
                                std::to_string(cfg_.nodes));
  }
  a_hat_ = graphs::normalize_adjacency(a_).a_hat;

  Rng rng(seed, /*stream=*/0x1a7e);
  const std::int64_t h = cfg_.hidden, d = cfg_.features, z = cfg_.latent;

  params_.add("gcn.w", xavier(d, cfg_.gcn_hidden, rng));
  params_.add("gcn.u", xavier(cfg_.gcn_hidden, d, rng));

  auto add_flow = [&](const std::string& prefix, std::int64_t width) {
    for (const char* part : {".m1", ".m2"}) {
      params_.add(prefix + part + ".w0", xavier(width + 1, cfg_.mlp_hidden, rng));
      params_.add(prefix + part + ".b0", Tensor::zeros({cfg_.mlp_hidden}));
      params_.add(prefix + part + ".w1", xavier(cfg_.mlp_hidden, width, rng));
    }
  };

  add_flow("ev", 2 * h);  // evolves H || H_tilde
  params_.add("proj.w", xavier(2 * h, h, rng));

  if (kind_ == HeadKind::kSmoothing) {
    for (const char* cell : {"lstm1", "lstm2"}) {
      params_.add(std::string(cell) + ".wx", xavier(d, 4 * h, rng));
      params_.add(std::string(cell) + ".wh", xavier(h, 4 * h, rng));
      params_.add(std::string(cell) + ".b", Tensor::zeros({4 * h}));
    }
    params_.add("g.w", xavier(h, 2 * z, rng));
    add_flow("zf", z);  // latent trajectory flow
    params_.add("dec.w0", xavier(z, cfg_.mlp_hidden, rng));
    params_.add("dec.b0", Tensor::zeros({cfg_.mlp_hidden}));
    params_.add("dec.w1", xavier(cfg_.mlp_hidden, d, rng));
  } else {
    params_.add("prep.w", xavier(d + h, h, rng));
    params_.add("prep.b", Tensor::zeros({h}));
    for (const char* cell : {"gru1", "gru2"}) {
      params_.add(std::string(cell) + ".wx", xavier(h, 3 * h, rng));
      params_.add(std::string(cell) + ".wh", xavier(h, 3 * h, rng));
      params_.add(std::string(cell) + ".b", Tensor::zeros({3 * h}));
    }
    params_.add("obs.w", xavier(h, 2 * d, rng));
    params_.add("post.w", xavier(h, 2 * d, rng));
  }
}

LeafMap LatentModel::leaves(bool trainable) const {
  LeafMap lv;
  for (const auto& name : params_.names()) {
    lv.emplace(name, trainable ? ag::leaf(params_.value(name)) : ag::constant(params_.value(name)));
  }
  return lv;
}

LatentModel::Pair LatentModel::initial_pair(std::int64_t samples) const {
  return {ag::constant(Tensor::zeros({samples, cfg_.nodes, cfg_.hidden})),
          ag::constant(Tensor::zeros({samples, cfg_.nodes, cfg_.hidden}))};
}

ag::Var LatentModel::mlp2(const LeafMap& lv, const std::string& prefix, ag::Var x) const {
  const std::int64_t rows = x->value.size() / x->value.dim(x->value.rank() - 1);
  std::vector<std::int64_t> shape = x->value.shape();
  ag::Var hh = ag::reshape(std::move(x), {rows, shape.back()});
  hh = ag::matmul(std::move(hh), lv.at(prefix + ".w0"));
  hh = ag::add_rowvec(std::move(hh), lv.at(prefix + ".b0"));
  hh = ag::tanh(std::move(hh));
  hh = ag::matmul(std::move(hh), lv.at(prefix + ".w1"));
  shape.back() = hh->value.dim(1);
  return ag::reshape(std::move(hh), shape);
}

// standard (non-graph) ResNet neural flow: X + tanh(dt) * (m1(X||t) o m2(X||t))
ag::Var LatentModel::flow_step(const LeafMap& lv, const std::string& prefix, ag::Var x,
                               const Tensor& dt) const {
  for (std::int64_t i = 0; i < dt.size(); ++i) {
    if (!std::isfinite(dt.at(i)) || dt.at(i) < 0.0) {
      throw std::invalid_argument("latent flow: elapsed times must be finite and >= 0");
    }
  }
  ag::Var tc = ag::constant(time_column(dt, x->value.dim(1)));
  ag::Var in = ag::concat_cols({x, tc});
  ag::Var m1 = mlp2(lv, prefix + ".m1", in);
  ag::Var m2 = mlp2(lv, prefix + ".m2", std::move(in));
  return ag::add(std::move(x), ag::scale_blocks(ag::mul(std::move(m1), std::move(m2)),
                                                tanh_vec(dt)));
}

ag::Var LatentModel::evolve_hidden(const LeafMap& lv, const Pair& pair, const Tensor& dt) const {
  ag::Var cat = ag::concat_cols({pair.h, pair.h_tilde});
  ag::Var ev = flow_step(lv, "ev", std::move(cat), dt);
  const std::int64_t rows = ev->value.dim(0) * ev->value.dim(1);
  const std::int64_t samples = ev->value.dim(0);
  ag::Var proj = ag::matmul(ag::reshape(std::move(ev), {rows, 2 * cfg_.hidden}), lv.at("proj.w"));
  return ag::reshape(std::move(proj), {samples, cfg_.nodes, cfg_.hidden});
}

ag::Var LatentModel::encode_obs(const LeafMap& lv, ag::Var x_t, const Tensor& mask_t) const {
  const std::int64_t samples = x_t->value.dim(0);
  ag::Var h = ag::bmm_left_masked(ag::constant(a_hat_), std::move(x_t), mask_t);
  h = ag::reshape(std::move(h), {samples * cfg_.nodes, cfg_.features});
  h = ag::relu(ag::matmul(std::move(h), lv.at("gcn.w")));
  h = ag::reshape(std::move(h), {samples, cfg_.nodes, cfg_.gcn_hidden});
  h = ag::bmm_left_masked(ag::constant(a_hat_), std::move(h), mask_t);
  h = ag::reshape(std::move(h), {samples * cfg_.nodes, cfg_.gcn_hidden});
  h = ag::matmul(std::move(h), lv.at("gcn.u"));
  return ag::reshape(std::move(h), {samples, cfg_.nodes, cfg_.features});
}

std::pair<ag::Var, ag::Var> LatentModel::lstm_cell(const LeafMap& lv, const std::string& prefix,
                                                   ag::Var x, ag::Var h, ag::Var c) const {
  const std::int64_t hh = cfg_.hidden;
  const std::int64_t samples = x->value.dim(0);
  const std::int64_t din = x->value.dim(2);
  const std::int64_t rows = samples * cfg_.nodes;
  ag::Var gx = ag::matmul(ag::reshape(std::move(x), {rows, din}), lv.at(prefix + ".wx"));
  ag::Var gh = ag::matmul(ag::reshape(std::move(h), {rows, hh}), lv.at(prefix + ".wh"));
  ag::Var gates = ag::add_rowvec(ag::add(std::move(gx), std::move(gh)), lv.at(prefix + ".b"));
  auto slice = [&](int k) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(hh));
    for (std::int64_t i = 0; i < hh; ++i) idx[static_cast<std::size_t>(i)] = k * hh + i;
    return ag::gather_cols(gates, idx);
  };
  ag::Var gi = ag::sigmoid(slice(0));
  ag::Var gf = ag::sigmoid(slice(1));
  ag::Var gg = ag::tanh(slice(2));
  ag::Var go = ag::sigmoid(slice(3));
  ag::Var c_flat = ag::reshape(std::move(c), {rows, hh});
  ag::Var c_next = ag::add(ag::mul(std::move(gf), std::move(c_flat)),
                           ag::mul(std::move(gi), std::move(gg)));
  ag::Var h_next = ag::mul(std::move(go), ag::tanh(c_next));
  return {ag::reshape(std::move(h_next), {samples, cfg_.nodes, hh}),
          ag::reshape(std::move(c_next), {samples, cfg_.nodes, hh})};
}

ag::Var LatentModel::gru_cell(const LeafMap& lv, const std::string& prefix, ag::Var x,
                              ag::Var h) const {
  const std::int64_t hh = cfg_.hidden;
  const std::int64_t samples = h->value.dim(0);
  const std::int64_t din = x->value.dim(2);
  const std::int64_t rows = samples * cfg_.nodes;
  ag::Var h_flat = ag::reshape(h, {rows, hh});
  ag::Var gx = ag::add_rowvec(
      ag::matmul(ag::reshape(std::move(x), {rows, din}), lv.at(prefix + ".wx")),
      lv.at(prefix + ".b"));
  ag::Var gh = ag::matmul(h_flat, lv.at(prefix + ".wh"));
  auto slice = [&](const ag::Var& v, int k) {
    std::vector<std::int64_t> idx(static_cast<std::size_t>(hh));
    for (std::int64_t i = 0; i < hh; ++i) idx[static_cast<std::size_t>(i)] = k * hh + i;
    return ag::gather_cols(v, idx);
  };
  ag::Var r = ag::sigmoid(ag::add(slice(gx, 0), slice(gh, 0)));
  ag::Var zg = ag::sigmoid(ag::add(slice(gx, 1), slice(gh, 1)));
  ag::Var ng = ag::tanh(ag::add(slice(gx, 2), ag::mul(std::move(r), slice(gh, 2))));
  // h' = (1 - z) o n + z o h
  ag::Var one_minus = ag::add_scalar(ag::scale(zg, -1.0), 1.0);
  ag::Var h_next = ag::add(ag::mul(std::move(one_minus), std::move(ng)),
                           ag::mul(std::move(zg), std::move(h_flat)));
  return ag::reshape(std::move(h_next), {samples, cfg_.nodes, hh});
}

LatentModel::Gaussian LatentModel::split_gaussian(ag::Var packed, std::int64_t width) const {
  std::vector<std::int64_t> mu_idx, ls_idx;
  for (std::int64_t i = 0; i < width; ++i) mu_idx.push_back(i);
  for (std::int64_t i = 0; i < width; ++i) ls_idx.push_back(width + i);
  Gaussian g;
  g.mu = ag::gather_cols(packed, mu_idx);
  g.log_sigma = ag::gather_cols(std::move(packed), ls_idx);
  return g;
}

LatentModel::Gaussian LatentModel::smooth_encode(const LeafMap& lv,
                                                 const LatentBatch& batch) const {
  if (kind_ != HeadKind::kSmoothing) throw std::logic_error("smooth_encode: filtering head");
  if (batch.num_times < 1) throw std::invalid_argument("smooth_encode: empty series");
  for (std::int64_t s = 0; s < batch.samples; ++s) {
    double present = 0.0;
    for (std::int64_t j = 0; j < batch.num_times; ++j)
      for (std::int64_t i = 0; i < cfg_.nodes; ++i) present += batch.mask[j].at(s, i);
    if (present == 0.0) {
      throw std::invalid_argument("smooth_encode: sample " + std::to_string(s) +
                                  " has no observed entries");
    }
  }

  Pair pair = initial_pair(batch.samples);
  ag::Var c1 = ag::constant(Tensor::zeros({batch.samples, cfg_.nodes, cfg_.hidden}));
  ag::Var c2 = ag::constant(Tensor::zeros({batch.samples, cfg_.nodes, cfg_.hidden}));

  for (std::int64_t step = 0; step < batch.num_times; ++step) {
    const std::int64_t j = cfg_.backward_encoder ? batch.num_times - 1 - step : step;
    Tensor dt({batch.samples});
    if (step > 0) {
      const std::int64_t j_prev = cfg_.backward_encoder ? j + 1 : j - 1;
      for (std::int64_t s = 0; s < batch.samples; ++s)
        dt.at(s) = std::fabs(batch.times.at(s, j) - batch.times.at(s, j_prev));
    }
    ag::Var h_evolved = evolve_hidden(lv, pair, dt);
    ag::Var x_t = ag::constant(batch.x[static_cast<std::size_t>(j)]);
    ag::Var xt_t = encode_obs(lv, x_t, batch.mask[static_cast<std::size_t>(j)]);
    auto [h1, c1n] = lstm_cell(lv, "lstm1", std::move(x_t), h_evolved, std::move(c1));
    auto [h2, c2n] = lstm_cell(lv, "lstm2", std::move(xt_t), h_evolved, std::move(c2));
    pair = {std::move(h1), std::move(h2)};
    c1 = std::move(c1n);
    c2 = std::move(c2n);
  }

  const std::int64_t rows = batch.samples * cfg_.nodes;
  ag::Var packed = ag::matmul(ag::reshape(pair.h, {rows, cfg_.hidden}), lv.at("g.w"));
  Gaussian g = split_gaussian(std::move(packed), cfg_.latent);
  g.mu = ag::reshape(std::move(g.mu), {batch.samples, cfg_.nodes, cfg_.latent});
  g.log_sigma = ag::reshape(std::move(g.log_sigma), {batch.samples, cfg_.nodes, cfg_.latent});
  return g;
}

ag::Var LatentModel::elbo_loss(const LeafMap& lv, const LatentBatch& batch, int n_mc,
                               std::uint64_t noise_seed) const {
  if (n_mc < 1) throw std::invalid_argument("elbo_loss: need n_mc >= 1");
  Gaussian q = smooth_encode(lv, batch);
  const double inv_s = 1.0 / static_cast<double>(batch.samples);

  // KL(q || N(0, I)) = 0.5 sum(mu^2 + sigma^2 - 1 - 2 log sigma)
  ag::Var sigma = ag::exp(q.log_sigma);
  ag::Var kl_terms = ag::sub(ag::add(ag::mul(q.mu, q.mu), ag::mul(sigma, sigma)),
                             ag::add_scalar(ag::scale(q.log_sigma, 2.0), 1.0));
  ag::Var loss = ag::scale(ag::sum(std::move(kl_terms)), 0.5 * inv_s);

  Rng noise(noise_seed, /*stream=*/0xe1b0);
  for (int mc = 0; mc < n_mc; ++mc) {
    Tensor eps(q.mu->value.shape());
    for (std::int64_t i = 0; i < eps.size(); ++i) eps.at(i) = noise.normal();
    ag::Var z0 = ag::add(q.mu, ag::mul(sigma, ag::constant(eps)));

    // decoder: Z(t_j) = F(t_j - t_0, Z0), X_hat = dec(Z), unit-variance Gaussian
    ag::Var recon = ag::constant(Tensor::scalar(0.0));
    for (std::int64_t j = 0; j < batch.num_times; ++j) {
      Tensor dt({batch.samples});
      for (std::int64_t s = 0; s < batch.samples; ++s)
        dt.at(s) = batch.times.at(s, j) - batch.times.at(s, 0);
      ag::Var zj = flow_step(lv, "zf", z0, dt);
      ag::Var xhat = mlp2(lv, "dec", std::move(zj));
      ag::Var diff = ag::sub(std::move(xhat), ag::constant(batch.x[static_cast<std::size_t>(j)]));
      // entry mask: replicate node mask over channels
      Tensor em({batch.samples, cfg_.nodes, cfg_.features});
      double count = 0.0;
      for (std::int64_t s = 0; s < batch.samples; ++s)
        for (std::int64_t i = 0; i < cfg_.nodes; ++i)
          for (std::int64_t cch = 0; cch < cfg_.features; ++cch) {
            em.at(s, i, cch) = batch.mask[static_cast<std::size_t>(j)].at(s, i);
            count += em.at(s, i, cch);
          }
      ag::Var sq = ag::mul(diff, diff);
      ag::Var masked = ag::mul(std::move(sq), ag::constant(em));
      // -log p = 0.5 (x - mu)^2 + 0.5 log 2 pi per observed entry
      recon = ag::add(std::move(recon),
                      ag::add_scalar(ag::scale(ag::sum(std::move(masked)), 0.5),
                                     0.5 * kLog2Pi * count));
    }
    loss = ag::add(std::move(loss), ag::scale(std::move(recon), inv_s / n_mc));
  }
  return loss;
}

LatentModel::FilterOutput LatentModel::filter_step(const LeafMap& lv, const Pair& pair,
                                                   const Tensor& x_t, const Tensor& mask_t,
                                                   const Tensor& dt) const {
  if (kind_ != HeadKind::kFiltering) throw std::logic_error("filter_step: smoothing head");
  const std::int64_t samples = x_t.dim(0);
  const std::int64_t rows = samples * cfg_.nodes;
  ag::Var h_evolved = evolve_hidden(lv, pair, dt);

  FilterOutput out;
  ag::Var obs_packed =
      ag::matmul(ag::reshape(h_evolved, {rows, cfg_.hidden}), lv.at("obs.w"));
  out.obs = split_gaussian(std::move(obs_packed), cfg_.features);
  out.obs.mu = ag::reshape(std::move(out.obs.mu), {samples, cfg_.nodes, cfg_.features});
  out.obs.log_sigma =
      ag::reshape(std::move(out.obs.log_sigma), {samples, cfg_.nodes, cfg_.features});

  ag::Var x_var = ag::constant(x_t);
  ag::Var xt_var = encode_obs(lv, x_var, mask_t);
  auto prep = [&](ag::Var data_in) {
    ag::Var cat = ag::concat_cols({std::move(data_in), h_evolved});
    ag::Var p = ag::add_rowvec(
        ag::matmul(ag::reshape(std::move(cat), {rows, cfg_.features + cfg_.hidden}),
                   lv.at("prep.w")),
        lv.at("prep.b"));
    return ag::reshape(std::move(p), {samples, cfg_.nodes, cfg_.hidden});
  };
  out.pair.h = gru_cell(lv, "gru1", prep(std::move(x_var)), h_evolved);
  out.pair.h_tilde = gru_cell(lv, "gru2", prep(std::move(xt_var)), h_evolved);

  ag::Var post_packed =
      ag::matmul(ag::reshape(out.pair.h, {rows, cfg_.hidden}), lv.at("post.w"));
  out.post = split_gaussian(std::move(post_packed), cfg_.features);
  out.post.mu = ag::reshape(std::move(out.post.mu), {samples, cfg_.nodes, cfg_.features});
  out.post.log_sigma =
      ag::reshape(std::move(out.post.log_sigma), {samples, cfg_.nodes, cfg_.features});
  return out;
}

ag::Var LatentModel::filter_loss(const LeafMap& lv, const LatentBatch& batch,
                                 double kl_weight) const {
  if (kl_weight < 0.0) throw std::invalid_argument("filter_loss: kl_weight must be >= 0");
  Pair pair = initial_pair(batch.samples);
  ag::Var loss = ag::constant(Tensor::scalar(0.0));
  const double inv_s = 1.0 / static_cast<double>(batch.samples);

  for (std::int64_t j = 0; j < batch.num_times; ++j) {
    Tensor dt({batch.samples});
    for (std::int64_t s = 0; s < batch.samples; ++s) {
      dt.at(s) = j == 0 ? 0.0 : batch.times.at(s, j) - batch.times.at(s, j - 1);
    }
    FilterOutput st = filter_step(lv, pair, batch.x[static_cast<std::size_t>(j)],
                                  batch.mask[static_cast<std::size_t>(j)], dt);
    pair = st.pair;

    Tensor em({batch.samples, cfg_.nodes, cfg_.features});
    for (std::int64_t s = 0; s < batch.samples; ++s)
      for (std::int64_t i = 0; i < cfg_.nodes; ++i)
        for (std::int64_t c = 0; c < cfg_.features; ++c)
          em.at(s, i, c) = batch.mask[static_cast<std::size_t>(j)].at(s, i);
    ag::Var em_c = ag::constant(em);

    // NLL: 0.5 ((x - mu)/sigma)^2 + log sigma + 0.5 log 2 pi, masked
    ag::Var diff = ag::sub(ag::constant(batch.x[static_cast<std::size_t>(j)]), st.obs.mu);
    ag::Var inv_sigma = ag::exp(ag::scale(st.obs.log_sigma, -1.0));
    ag::Var zscore = ag::mul(std::move(diff), inv_sigma);
    ag::Var nll_terms =
        ag::add(ag::scale(ag::mul(zscore, zscore), 0.5),
                ag::add_scalar(st.obs.log_sigma, 0.5 * kLog2Pi));
    loss = ag::add(std::move(loss), ag::sum(ag::mul(std::move(nll_terms), em_c)));

    if (kl_weight > 0.0) {
      // KL(N_obs || N_post), diagonal closed form
      ag::Var dls = ag::sub(st.post.log_sigma, st.obs.log_sigma);  // log s2 - log s1
      ag::Var var_ratio =
          ag::exp(ag::scale(std::move(dls), -2.0));  // (s1/s2)^2
      ag::Var dmu = ag::sub(st.obs.mu, st.post.mu);
      ag::Var mu_term = ag::mul(ag::mul(dmu, dmu),
                                ag::exp(ag::scale(st.post.log_sigma, -2.0)));
      ag::Var kl_terms = ag::scale(
          ag::add_scalar(
              ag::add(ag::add(var_ratio, std::move(mu_term)),
                      ag::scale(ag::sub(st.post.log_sigma, st.obs.log_sigma), 2.0)),
              -1.0),
          0.5);
      loss = ag::add(std::move(loss),
                     ag::scale(ag::sum(ag::mul(std::move(kl_terms), em_c)), kl_weight));
    }
  }
  return ag::scale(std::move(loss), inv_s);
}

LatentTrainResult train_latent(LatentModel& model, const dynamics::TrajectoryBatch& data,
                               const std::vector<std::int64_t>& train_idx,
                               const std::vector<std::int64_t>& val_idx, int epochs,
                               const AdamConfig& adam, std::uint64_t seed) {
  LatentTrainResult out;
  const LatentBatch train_batch = make_latent_batch(data, train_idx);
  const LatentBatch val_batch = make_latent_batch(data, val_idx);
  const LatentConfig& cfg = model.config();

  auto loss_of = [&](const LeafMap& lv, const LatentBatch& b, int n_mc, std::uint64_t ns) {
    return model.kind() == HeadKind::kSmoothing ? model.elbo_loss(lv, b, n_mc, ns)
                                                : model.filter_loss(lv, b, cfg.kl_weight);
  };

  for (int epoch = 0; epoch < epochs; ++epoch) {
    LeafMap lv = model.leaves(/*trainable=*/true);
    ag::Var loss = loss_of(lv, train_batch, cfg.n_mc_train, seed + static_cast<std::uint64_t>(epoch));
    const double lval = loss->value.item();
    if (!std::isfinite(lval)) {
      out.aborted = true;
      return out;
    }
    ag::backward(loss);
    std::unordered_map<std::string, Tensor> grads;
    for (const auto& name : model.params().names()) {
      grads.emplace(name, ag::grad_or_zero(lv.at(name)));
    }
    if (!adam_step(model.params(), grads, adam)) {
      out.aborted = true;
      return out;
    }
    out.train_loss.push_back(lval);

    LeafMap lv_eval = model.leaves(false);
    // fixed evaluation noise so the validation trace is comparable across epochs
    out.val_loss.push_back(
        loss_of(lv_eval, val_batch, cfg.n_mc_eval, /*ns=*/seed * 977 + 13)->value.item());
  }
  return out;
}

double gaussian_kl(const Tensor& mu1, const Tensor& log_sigma1, const Tensor& mu2,
                   const Tensor& log_sigma2) {
  check_same_shape(mu1, mu2, "gaussian_kl");
  double s = 0.0;
  for (std::int64_t i = 0; i < mu1.size(); ++i) {
    const double ls1 = log_sigma1.at(i), ls2 = log_sigma2.at(i);
    const double v_ratio = std::exp(2.0 * (ls1 - ls2));
    const double dmu = mu1.at(i) - mu2.at(i);
    s += 0.5 * (v_ratio + dmu * dmu * std::exp(-2.0 * ls2) - 1.0) + (ls2 - ls1);
  }
  return s;
}

}  // namespace gnflow::latent
