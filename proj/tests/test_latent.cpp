#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gnflow/graphs.hpp"
#include "gnflow/latent.hpp"
#include "gnflow/training.hpp"
#include "gnflow/rng.hpp"
#include "gnflow/tensor_math.hpp"
#include "test_support.hpp"

using namespace gnflow;
using namespace gnflow::latent;
using testsup::random_tensor;

namespace {

dynamics::TrajectoryBatch small_data(std::int64_t n, std::int64_t samples, std::int64_t times,
                                     std::uint64_t seed) {
  dynamics::SystemSpec spec;
  spec.kind = dynamics::SystemKind::kTriangle;
  spec.nodes = n;
  spec.adjacency = graphs::random_dag(n, 0.4, seed);
  return dynamics::sample_dataset(spec, samples, times, seed);
}

LatentConfig small_cfg(std::int64_t n, std::int64_t d) {
  LatentConfig cfg;
  cfg.nodes = n;
  cfg.features = d;
  cfg.hidden = 6;
  cfg.latent = 4;
  cfg.gcn_hidden = 5;
  cfg.mlp_hidden = 8;
  return cfg;
}

std::vector<std::int64_t> iota_idx(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) v[static_cast<std::size_t>(i)] = i;
  return v;
}

}  // namespace

TEST_CASE("gaussian_kl: zero at equality, closed forms, positivity") {
  Rng rng(3);
  const Tensor mu = random_tensor({4, 3}, rng);
  const Tensor ls = random_tensor({4, 3}, rng, -1.0, 0.5);
  CHECK(gaussian_kl(mu, ls, mu, ls) == 0.0);

  // KL(N(1,1) || N(0,1)) = 0.5 per dimension
  const Tensor one = Tensor::full({5}, 1.0);
  const Tensor zero = Tensor::zeros({5});
  CHECK(gaussian_kl(one, zero, zero, zero) == doctest::Approx(2.5).epsilon(1e-12));

  for (int trial = 0; trial < 50; ++trial) {
    const Tensor m1 = random_tensor({3}, rng), m2 = random_tensor({3}, rng);
    const Tensor l1 = random_tensor({3}, rng, -1.0, 1.0), l2 = random_tensor({3}, rng, -1.0, 1.0);
    CHECK(gaussian_kl(m1, l1, m2, l2) >= 0.0);
  }
}

TEST_CASE("gaussian_kl: Monte-Carlo oracle within 3 standard errors") {
  Rng rng(7);
  const Tensor mu1 = Tensor({2}, {0.3, -0.5});
  const Tensor ls1 = Tensor({2}, {-0.2, 0.1});
  const Tensor mu2 = Tensor({2}, {-0.1, 0.4});
  const Tensor ls2 = Tensor({2}, {0.3, -0.3});
  const double closed = gaussian_kl(mu1, ls1, mu2, ls2);

  const int n = 1000000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    double term = 0.0;
    for (int d = 0; d < 2; ++d) {
      const double s1 = std::exp(ls1.at(d)), s2 = std::exp(ls2.at(d));
      const double z = mu1.at(d) + s1 * rng.normal();
      const double lp1 = -0.5 * (z - mu1.at(d)) * (z - mu1.at(d)) / (s1 * s1) - ls1.at(d);
      const double lp2 = -0.5 * (z - mu2.at(d)) * (z - mu2.at(d)) / (s2 * s2) - ls2.at(d);
      term += lp1 - lp2;
    }
    sum += term;
    sumsq += term * term;
  }
  const double mean = sum / n;
  const double se = std::sqrt((sumsq / n - mean * mean) / n);
  CHECK(std::fabs(mean - closed) < 3.0 * se);
}

TEST_CASE("evolve_hidden: width contract and t = 0 first-half identity") {
  const std::int64_t n = 3, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  const Tensor a = graphs::random_dag(n, 0.5, 5);
  LatentModel model(HeadKind::kSmoothing, cfg, a, 11);

  // identity projection of the first half: proj.w = [I; 0]
  Tensor proj({2 * cfg.hidden, cfg.hidden});
  for (std::int64_t i = 0; i < cfg.hidden; ++i) proj.at(i, i) = 1.0;
  model.params().set("proj.w", proj);

  Rng rng(13);
  const LeafMap lv = model.leaves(false);
  LatentModel::Pair pair{ag::constant(random_tensor({4, n, cfg.hidden}, rng)),
                         ag::constant(random_tensor({4, n, cfg.hidden}, rng))};
  const ag::Var h = model.evolve_hidden(lv, pair, Tensor::zeros({4}));
  CHECK(h->value.dim(2) == cfg.hidden);
  CHECK(testsup::max_abs_diff(h->value, pair.h->value) == 0.0);  // F(0, .) identity

  // width invariant for any dt
  const ag::Var h2 = model.evolve_hidden(lv, pair, Tensor::full({4}, 1.7));
  CHECK(h2->value.dim(2) == cfg.hidden);
  CHECK(h2->value.all_finite());
}

TEST_CASE("smooth_encode: unrolled single-observation definition") {
  const std::int64_t n = 3, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  const Tensor a = graphs::random_dag(n, 0.5, 7);
  LatentModel model(HeadKind::kSmoothing, cfg, a, 17);

  const auto data = small_data(n, 3, 1, 19);
  const LatentBatch batch = make_latent_batch(data, iota_idx(3));
  const LeafMap lv = model.leaves(false);
  const auto g = model.smooth_encode(lv, batch);
  CHECK(g.mu->value.dim(2) == cfg.latent);
  CHECK(g.log_sigma->value.dim(2) == cfg.latent);
  CHECK(g.mu->value.all_finite());

  // all-masked sample rejected
  auto bad = data;
  for (std::int64_t i = 0; i < bad.masks[1].size(); ++i) bad.masks[1].at(i) = 0.0;
  const LatentBatch bad_batch = make_latent_batch(bad, iota_idx(3));
  CHECK_THROWS_AS(model.smooth_encode(lv, bad_batch), std::invalid_argument);
}

TEST_CASE("smooth_encode: masked nodes receive zero graph signal") {
  const std::int64_t n = 4, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  const Tensor a = graphs::random_dag(n, 0.6, 23);
  LatentModel model(HeadKind::kSmoothing, cfg, a, 29);
  Rng rng(31);
  const LeafMap lv = model.leaves(false);
  Tensor mask({2, n});
  for (std::int64_t i = 0; i < mask.size(); ++i) mask.at(i) = 1.0;
  mask.at(0, 1) = 0.0;
  const ag::Var xt =
      model.encode_obs(lv, ag::constant(random_tensor({2, n, d}, rng)), mask);
  for (std::int64_t c = 0; c < d; ++c) CHECK(xt->value.at(0, 1, c) == 0.0);
}

TEST_CASE("reparameterized samples: mean converges to mu") {
  // z = mu + sigma eps: the Monte-Carlo mean approaches mu at rate sigma/sqrt(N)
  Rng rng(37);
  const double mu = 0.8, sigma = 1.3;
  const int n = 100000;
  double sum = 0.0;
  for (int i = 0; i < n; ++i) sum += mu + sigma * rng.normal();
  const double se = sigma / std::sqrt(static_cast<double>(n));
  CHECK(std::fabs(sum / n - mu) < 3.0 * se);
}

TEST_CASE("elbo: KL term vanishes when q equals the prior") {
  const std::int64_t n = 2, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  const Tensor a = Tensor::zeros({n, n});
  LatentModel model(HeadKind::kSmoothing, cfg, a, 41);

  // force q = N(0, I): zero the read-out head
  model.params().set("g.w", Tensor::zeros(model.params().value("g.w").shape()));
  const auto data = small_data(n, 2, 3, 43);
  const LatentBatch batch = make_latent_batch(data, iota_idx(2));
  const LeafMap lv = model.leaves(false);
  const auto q = model.smooth_encode(lv, batch);
  CHECK(t_max_abs(q.mu->value) == 0.0);
  CHECK(t_max_abs(q.log_sigma->value) == 0.0);

  // with mu = 0 and log sigma = 0 the closed-form KL is exactly zero, so the
  // ELBO reduces to the reconstruction term, which is bounded below by the
  // constant 0.5 log(2 pi) per observed entry
  const ag::Var loss = model.elbo_loss(lv, batch, 1, 7);
  const double floor_per_entry = 0.5 * std::log(2.0 * 3.14159265358979323846);
  const double entries = static_cast<double>(n * d * 3);
  CHECK(loss->value.item() >= floor_per_entry * entries - 1e-9);
}

TEST_CASE("elbo gradient: finite differences with common random numbers") {
  const std::int64_t n = 2, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  cfg.hidden = 3;
  cfg.latent = 2;
  cfg.gcn_hidden = 3;
  cfg.mlp_hidden = 4;
  const Tensor a = graphs::random_dag(n, 0.9, 47);
  LatentModel model(HeadKind::kSmoothing, cfg, a, 53);
  const auto data = small_data(n, 2, 2, 59);
  const LatentBatch batch = make_latent_batch(data, iota_idx(2));

  testsup::ParamMap point;
  for (const auto& name : model.params().names()) point.emplace(name, model.params().value(name));

  auto loss_at = [&](const testsup::ParamMap& p, bool trainable, LeafMap* lv_out) {
    LeafMap lv;
    for (const auto& [name, tensor] : p) {
      lv.emplace(name, trainable ? ag::leaf(tensor) : ag::constant(tensor));
    }
    ag::Var loss = model.elbo_loss(lv, batch, 2, /*noise_seed=*/12345);
    if (lv_out) *lv_out = lv;
    return loss;
  };

  LeafMap lv;
  ag::Var loss = loss_at(point, true, &lv);
  ag::backward(loss);
  testsup::ParamMap analytic;
  for (const auto& [name, var] : lv) analytic.emplace(name, ag::grad_or_zero(var));
  auto f = [&](const testsup::ParamMap& p) { return loss_at(p, false, nullptr)->value.item(); };
  CHECK(testsup::grad_rel_err(analytic, testsup::fd_gradients(f, point, 1e-5)) < 1e-3);
}

TEST_CASE("filter_step: widths, positive sigmas, masked graph signal") {
  const std::int64_t n = 3, d = 2;
  LatentConfig cfg = small_cfg(n, d);
  const Tensor a = graphs::random_dag(n, 0.5, 61);
  LatentModel model(HeadKind::kFiltering, cfg, a, 67);
  Rng rng(71);
  const LeafMap lv = model.leaves(false);
  const auto pair = model.initial_pair(2);
  Tensor mask = Tensor::full({2, n}, 1.0);
  mask.at(1, 0) = 0.0;
  const Tensor x = random_tensor({2, n, d}, rng);
  const auto st = model.filter_step(lv, pair, x, mask, Tensor::full({2}, 0.5));
  CHECK(st.pair.h->value.dim(2) == cfg.hidden);
  CHECK(st.obs.mu->value.dim(2) == d);
  CHECK(st.post.mu->value.dim(2) == d);
  for (std::int64_t i = 0; i < st.obs.log_sigma->value.size(); ++i) {
    CHECK(std::exp(st.obs.log_sigma->value.at(i)) > 0.0);
    CHECK(std::isfinite(st.obs.log_sigma->value.at(i)));
  }
}

TEST_CASE("filter loss: per-entry NLL floor at exact prediction") {
  // X = mu_obs with sigma = 1 gives NLL = 0.5 log(2 pi) per entry; the loss
  // with zeroed read-out heads and zero data hits that floor with KL = 0
  const std::int64_t n = 2, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  const Tensor a = Tensor::zeros({n, n});
  LatentModel model(HeadKind::kFiltering, cfg, a, 73);
  model.params().set("obs.w", Tensor::zeros(model.params().value("obs.w").shape()));
  model.params().set("post.w", Tensor::zeros(model.params().value("post.w").shape()));

  dynamics::TrajectoryBatch data = small_data(n, 2, 3, 79);
  for (auto& v : data.values) {
    for (std::int64_t i = 0; i < v.size(); ++i) v.at(i) = 0.0;  // X = mu_obs = 0
  }
  const LatentBatch batch = make_latent_batch(data, iota_idx(2));
  const LeafMap lv = model.leaves(false);
  const double loss = model.filter_loss(lv, batch, cfg.kl_weight)->value.item();
  const double expect = 0.5 * std::log(2.0 * 3.14159265358979323846) * (n * d * 3);
  CHECK(loss == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("filter loss gradient: finite differences") {
  const std::int64_t n = 2, d = 1;
  LatentConfig cfg = small_cfg(n, d);
  cfg.hidden = 3;
  cfg.gcn_hidden = 3;
  cfg.mlp_hidden = 4;
  const Tensor a = graphs::random_dag(n, 0.9, 83);
  LatentModel model(HeadKind::kFiltering, cfg, a, 89);
  const auto data = small_data(n, 2, 2, 97);
  const LatentBatch batch = make_latent_batch(data, iota_idx(2));

  testsup::ParamMap point;
  for (const auto& name : model.params().names()) point.emplace(name, model.params().value(name));
  auto loss_at = [&](const testsup::ParamMap& p, bool trainable, LeafMap* lv_out) {
    LeafMap lv;
    for (const auto& [name, tensor] : p) {
      lv.emplace(name, trainable ? ag::leaf(tensor) : ag::constant(tensor));
    }
    ag::Var loss = model.filter_loss(lv, batch, 0.1);
    if (lv_out) *lv_out = lv;
    return loss;
  };
  LeafMap lv;
  ag::Var loss = loss_at(point, true, &lv);
  ag::backward(loss);
  testsup::ParamMap analytic;
  for (const auto& [name, var] : lv) analytic.emplace(name, ag::grad_or_zero(var));
  auto f = [&](const testsup::ParamMap& p) { return loss_at(p, false, nullptr)->value.item(); };
  CHECK(testsup::grad_rel_err(analytic, testsup::fd_gradients(f, point, 1e-5)) < 1e-4);
}

TEST_CASE("train_latent: losses finite and decreasing on a short seeded run") {
  const std::int64_t n = 3;
  const auto data = small_data(n, 24, 8, 101);
  const auto split = gnflow::training::split_dataset(data.samples(), 0.75, 0.25, 3);

  for (HeadKind kind : {HeadKind::kSmoothing, HeadKind::kFiltering}) {
    LatentConfig cfg = small_cfg(n, 1);
    LatentModel model(kind, cfg, data.adjacency, 107);
    AdamConfig adam;
    adam.lr = 3e-3;
    auto res = train_latent(model, data, split.train, split.val, 8, adam, 5);
    REQUIRE_FALSE(res.aborted);
    REQUIRE(res.val_loss.size() == 8);
    for (double v : res.val_loss) CHECK(std::isfinite(v));
    CHECK(res.val_loss.back() < res.val_loss.front());
  }
}
