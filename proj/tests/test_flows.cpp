#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>

#include "gnflow/flows.hpp"
#include "gnflow/graphs.hpp"
#include "gnflow/linalg.hpp"
#include "gnflow/rng.hpp"
#include "gnflow/tensor_math.hpp"
#include "test_support.hpp"

using namespace gnflow;
using flows::Arch;
using flows::FlowConfig;
using flows::FlowModel;
using flows::GraphMode;
using testsup::random_tensor;

namespace {

FlowConfig small_cfg(Arch arch, std::int64_t n, std::int64_t d, GraphMode mode) {
  FlowConfig cfg;
  cfg.arch = arch;
  cfg.nodes = n;
  cfg.features = d;
  cfg.graph_mode = mode;
  cfg.mlp_hidden = 16;
  cfg.gcn_hidden = 8;
  cfg.coupling_trunk_width = 16;
  return cfg;
}

Tensor times_of(std::initializer_list<double> ts) {
  std::vector<double> v(ts);
  return Tensor({static_cast<std::int64_t>(v.size())}, v);
}

}  // namespace

TEST_CASE("gcn encoder: identity reduction and naive-oracle agreement") {
  Rng rng(3);
  // A = 0 so A_hat = I; with W = U = I and X >= 0, gcn(X) = X
  FlowConfig cfg = small_cfg(Arch::kResnet, 4, 2, GraphMode::kTruth);
  cfg.gcn_hidden = 2;
  cfg.contraction = false;
  const Tensor a0 = Tensor::zeros({4, 4});
  FlowModel model(cfg, 1, &a0);
  model.params().set("gcn.w", Tensor::eye(2));
  model.params().set("gcn.u", Tensor::eye(2));
  const Tensor x = random_tensor({3, 4, 2}, rng, 0.0, 2.0);
  const Tensor xt = model.encode(x, times_of({1, 2, 3}));
  CHECK(testsup::max_abs_diff(xt, x) == 0.0);

  // random weights vs a straight triple-loop re-implementation
  FlowConfig cfg2 = small_cfg(Arch::kResnet, 5, 2, GraphMode::kTruth);
  cfg2.contraction = false;
  const Tensor a = graphs::random_dag(5, 0.5, 7);
  FlowModel m2(cfg2, 2, &a);
  const Tensor x2 = random_tensor({2, 5, 2}, rng);
  const Tensor got = m2.encode(x2, times_of({1, 1}));

  const Tensor ahat = graphs::normalize_adjacency(a).a_hat;
  const Tensor w = m2.params().value("gcn.w");
  const Tensor u = m2.params().value("gcn.u");
  Tensor expect({2, 5, 2});
  for (std::int64_t b = 0; b < 2; ++b) {
    // z = relu(ahat x w), out = ahat z u
    Tensor z({5, cfg2.gcn_hidden});
    for (std::int64_t i = 0; i < 5; ++i)
      for (std::int64_t h = 0; h < cfg2.gcn_hidden; ++h) {
        double s = 0.0;
        for (std::int64_t p = 0; p < 5; ++p)
          for (std::int64_t c = 0; c < 2; ++c) s += ahat.at(i, p) * x2.at(b, p, c) * w.at(c, h);
        z.at(i, h) = s > 0.0 ? s : 0.0;
      }
    for (std::int64_t i = 0; i < 5; ++i)
      for (std::int64_t c = 0; c < 2; ++c) {
        double s = 0.0;
        for (std::int64_t p = 0; p < 5; ++p)
          for (std::int64_t h = 0; h < cfg2.gcn_hidden; ++h)
            s += ahat.at(i, p) * z.at(p, h) * u.at(h, c);
        expect.at(b, i, c) = s;
      }
  }
  CHECK(testsup::max_abs_diff(got, expect) < 1e-12);
}

TEST_CASE("initial condition: F(0, X, A) = X bit-exactly for all architectures") {
  Rng rng(5);
  for (Arch arch : {Arch::kResnet, Arch::kGru, Arch::kCoupling}) {
    for (int trial = 0; trial < 33; ++trial) {
      const std::int64_t n = 3 + static_cast<std::int64_t>(rng.below(4));
      const std::int64_t d = arch == Arch::kCoupling ? 1 + static_cast<std::int64_t>(rng.below(3))
                                                     : 1 + static_cast<std::int64_t>(rng.below(2));
      const Tensor a = graphs::random_dag(n, 0.4, rng.next_u64());
      FlowModel model(small_cfg(arch, n, d, GraphMode::kTruth), rng.next_u64(), &a);
      const Tensor x = random_tensor({4, n, d}, rng);
      const Tensor y = model.predict(x, Tensor::zeros({4}));
      for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y.at(i) == x.at(i));
    }
  }
}

TEST_CASE("flow rejects negative and non-finite times") {
  const Tensor a = Tensor::zeros({2, 2});
  FlowModel model(small_cfg(Arch::kResnet, 2, 1, GraphMode::kTruth), 1, &a);
  const Tensor x = Tensor::full({1, 2, 1}, 0.5);
  CHECK_THROWS_AS(model.predict(x, times_of({-1.0})), std::invalid_argument);
  CHECK_THROWS_AS(model.predict(x, times_of({std::nan("")})), std::invalid_argument);
}

TEST_CASE("gru flow: theorem-2 parameter gate") {
  FlowConfig cfg = small_cfg(Arch::kGru, 3, 1, GraphMode::kNone);
  cfg.gru_beta = 1.0;
  cfg.gru_alpha = 2.0 / 11.0;  // boundary: alpha (5 beta + 6) = 2 admitted
  CHECK_NOTHROW(FlowModel(cfg, 1));
  cfg.gru_alpha = 0.2;  // 0.2 * 11 = 2.2 > 2
  CHECK_THROWS_AS(FlowModel(cfg, 1), std::invalid_argument);
  cfg.strict_invertibility = false;
  CHECK_NOTHROW(FlowModel(cfg, 1));
}

TEST_CASE("permutation equivariance: F(t, PX, PAP^T) = P F(t, X, A)") {
  Rng rng(7);
  const std::int64_t n = 5;
  const Tensor a = graphs::random_dag(n, 0.5, 11);
  std::vector<std::int64_t> perm{0, 1, 2, 3, 4};
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
  Tensor pa({n, n});
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < n; ++j) pa.at(perm[i], perm[j]) = a.at(i, j);

  for (Arch arch : {Arch::kResnet, Arch::kGru, Arch::kCoupling}) {
    const std::int64_t d = 2;
    FlowModel model(small_cfg(arch, n, d, GraphMode::kTruth), 13, &a);
    FlowModel permuted(small_cfg(arch, n, d, GraphMode::kTruth), 13, &pa);
    // same weights (same seed); only A differs by conjugation

    const Tensor x = random_tensor({3, n, d}, rng);
    Tensor px({3, n, d});
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c) px.at(b, perm[i], c) = x.at(b, i, c);

    const Tensor times = times_of({0.5, 1.5, 3.0});
    const Tensor y = model.predict(x, times);
    const Tensor py = permuted.predict(px, times);
    for (std::int64_t b = 0; b < 3; ++b)
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < d; ++c)
          CHECK(py.at(b, perm[i], c) == doctest::Approx(y.at(b, i, c)).epsilon(1e-12));
  }
}

TEST_CASE("coupling flow: exact inverse round trip") {
  Rng rng(11);
  for (std::int64_t d : {1, 2, 3}) {
    const std::int64_t n = 4;
    const Tensor a = graphs::random_dag(n, 0.5, 17);
    FlowModel model(small_cfg(Arch::kCoupling, n, d, GraphMode::kTruth), rng.next_u64(), &a);
    const std::int64_t dm = model.model_features();
    const Tensor x = random_tensor({6, n, dm}, rng);
    const Tensor times = random_tensor({6}, rng, 0.0, 5.0);
    const flows::LeafMap lv = model.leaves(false);
    const Tensor y = model.forward(lv, x, times)->value;
    const Tensor back = model.invert(y, times);
    CHECK(testsup::max_abs_diff(back, x) < 1e-10);

    // t = 0 leaves Y unchanged under inversion too
    const Tensor y0 = model.invert(x, Tensor::zeros({6}));
    for (std::int64_t i = 0; i < x.size(); ++i) CHECK(y0.at(i) == x.at(i));
  }
  // inverting a non-coupling flow is rejected
  const Tensor a = Tensor::zeros({3, 3});
  FlowModel resnet(small_cfg(Arch::kResnet, 3, 1, GraphMode::kTruth), 1, &a);
  CHECK_THROWS_AS(resnet.invert(Tensor::zeros({1, 3, 1}), times_of({1.0})),
                  std::invalid_argument);
}

TEST_CASE("coupling flow: pure rescaling block inverts exactly") {
  const std::int64_t n = 3;
  FlowConfig cfg = small_cfg(Arch::kCoupling, n, 2, GraphMode::kNone);
  cfg.coupling_blocks = 1;
  FlowModel model(cfg, 3);
  // zero the shift head: the block becomes X_U <- X_U * exp(phi u)
  model.params().set("blk0.v.w",
                     Tensor::zeros(model.params().value("blk0.v.w").shape()));
  Rng rng(5);
  const Tensor x = random_tensor({4, n, 2}, rng);
  const Tensor times = random_tensor({4}, rng, 0.1, 4.0);
  const flows::LeafMap lv = model.leaves(false);
  const Tensor y = model.forward(lv, x, times)->value;
  // V columns (odd) unchanged by a single block
  for (std::int64_t b = 0; b < 4; ++b)
    for (std::int64_t i = 0; i < n; ++i) CHECK(y.at(b, i, 1) == x.at(b, i, 1));
  CHECK(testsup::max_abs_diff(model.invert(y, times), x) < 1e-12);
}

TEST_CASE("graph ablation: zeroed GCN output path equals graph mode none") {
  Rng rng(13);
  for (Arch arch : {Arch::kResnet, Arch::kGru}) {
    const std::int64_t n = 4, d = 2;
    const Tensor a = graphs::random_dag(n, 0.6, 23);
    FlowConfig gcfg = small_cfg(arch, n, d, GraphMode::kTruth);
    gcfg.contraction = false;
    FlowModel graph_model(gcfg, 31, &a);
    FlowConfig ncfg = small_cfg(arch, n, d, GraphMode::kNone);
    ncfg.contraction = false;
    FlowModel none_model(ncfg, 99);

    // align every shared parameter, then cut the graph branch by zeroing U
    for (const auto& name : none_model.params().names()) {
      none_model.params().set(name, graph_model.params().value(name));
    }
    graph_model.params().set("gcn.u",
                             Tensor::zeros(graph_model.params().value("gcn.u").shape()));

    const Tensor x = random_tensor({5, n, d}, rng);
    const Tensor times = random_tensor({5}, rng, 0.0, 4.0);
    const Tensor yg = graph_model.predict(x, times);
    const Tensor yn = none_model.predict(x, times);
    for (std::int64_t i = 0; i < yg.size(); ++i) CHECK(yg.at(i) == yn.at(i));
  }
}

TEST_CASE("masking: zero rows exactly, subgraph equivalence on present rows") {
  Rng rng(17);
  const std::int64_t n = 6, d = 2;
  const Tensor a = graphs::random_dag(n, 0.5, 29);
  FlowConfig cfg = small_cfg(Arch::kResnet, n, d, GraphMode::kTruth);
  cfg.contraction = false;
  FlowModel model(cfg, 41, &a);

  const Tensor x = random_tensor({3, n, d}, rng);
  Tensor mask({3, n});
  for (std::int64_t i = 0; i < mask.size(); ++i) mask.at(i) = 1.0;
  mask.at(0, 2) = 0.0;
  mask.at(0, 4) = 0.0;
  mask.at(2, 0) = 0.0;
  const Tensor times = times_of({0.7, 1.3, 2.9});

  const Tensor xt = model.encode(x, times, &mask);
  for (std::int64_t b = 0; b < 3; ++b)
    for (std::int64_t i = 0; i < n; ++i)
      if (mask.at(b, i) == 0.0)
        for (std::int64_t c = 0; c < d; ++c) CHECK(xt.at(b, i, c) == 0.0);

  // block 0: present nodes {0,1,3,5}; evaluate the extracted subgraph with the
  // same A_hat entries and compare the present rows of the full flow output
  const std::vector<std::int64_t> present{0, 1, 3, 5};
  const Tensor ahat = graphs::normalize_adjacency(a).a_hat;
  const std::int64_t m = static_cast<std::int64_t>(present.size());

  // manual evaluation of the masked GCN on the subgraph, feeding it through
  // the same MLPs via a sub-model sharing weights is impractical here; instead
  // check the GCN sub-block equivalence directly
  Tensor sub_ahat({m, m});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t j = 0; j < m; ++j) sub_ahat.at(i, j) = ahat.at(present[i], present[j]);
  const Tensor w = model.params().value("gcn.w");
  const Tensor u = model.params().value("gcn.u");
  Tensor subx({m, d});
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t c = 0; c < d; ++c) subx.at(i, c) = x.at(0, present[i], c);
  // same staged evaluation as the encoder, on the extracted subgraph:
  // relu((A_hat_sub X_sub) W), then (A_hat_sub Z) U
  Tensor z = t_map(t_matmul(t_matmul(sub_ahat, subx), w),
                   [](double v) { return v > 0.0 ? v : 0.0; });
  const Tensor out = t_matmul(t_matmul(sub_ahat, z), u);
  for (std::int64_t i = 0; i < m; ++i)
    for (std::int64_t c = 0; c < d; ++c)
      CHECK(xt.at(0, present[i], c) == out.at(i, c));  // identical, not just close
}

TEST_CASE("enforce_contraction: bounds hold, compliant weights untouched") {
  Rng rng(19);
  FlowConfig cfg = small_cfg(Arch::kResnet, 4, 1, GraphMode::kTruth);
  cfg.contraction = false;
  const Tensor a = graphs::random_dag(4, 0.5, 31);
  FlowModel model(cfg, 47, &a);

  // inflate one weight, then clip
  model.params().set("mlp1.w1", t_scale(model.params().value("mlp1.w1"), 10.0));
  model.clip_contraction();
  for (const auto& [name, bound] : model.contraction_bounds()) {
    CHECK(spectral_norm(model.params().value(name)) <= bound + 1e-9);
  }
  // gcn weights get the tighter bound so the encoder stays contractive
  CHECK(spectral_norm(model.params().value("gcn.w")) <= cfg.lipschitz_bound / 2.0 + 1e-9);

  const auto snap = model.params().value("mlp2.w0");
  model.clip_contraction();  // idempotent on compliant weights
  const auto& again = model.params().value("mlp2.w0");
  for (std::int64_t i = 0; i < snap.size(); ++i) CHECK(snap.at(i) == again.at(i));
}

TEST_CASE("resnet residual: sampled Lipschitz probe under contraction") {
  Rng rng(23);
  const std::int64_t n = 5, d = 1;
  const Tensor a = graphs::random_dag(n, 0.4, 37);
  FlowConfig cfg = small_cfg(Arch::kResnet, n, d, GraphMode::kTruth);
  cfg.contraction = true;  // clipped at construction
  FlowModel model(cfg, 53, &a);

  const Tensor times = Tensor::full({1}, 2.0);
  int violations = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const Tensor x = random_tensor({1, n, d}, rng);
    const Tensor y = random_tensor({1, n, d}, rng);
    const Tensor fx = model.predict(x, times);
    const Tensor fy = model.predict(y, times);
    // g-difference = (F(x) - x) - (F(y) - y), phi(2) scaling included (< 1)
    double gd = 0.0, xy = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) {
      const double gdi = (fx.at(i) - x.at(i)) - (fy.at(i) - y.at(i));
      gd += gdi * gdi;
      xy += (x.at(i) - y.at(i)) * (x.at(i) - y.at(i));
    }
    if (std::sqrt(gd) > 0.99 * std::sqrt(xy)) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("checkpoint: save/load round trip, version rejection") {
  Rng rng(29);
  const Tensor a = graphs::random_dag(4, 0.5, 41);
  for (Arch arch : {Arch::kResnet, Arch::kGru, Arch::kCoupling}) {
    FlowModel model(small_cfg(arch, 4, 2, GraphMode::kTruth), rng.next_u64(), &a);
    const std::string path = "test_ckpt.txt";
    model.save(path);
    FlowModel loaded = FlowModel::load(path);
    CHECK(loaded.config().arch == arch);
    CHECK(loaded.model_features() == model.model_features());
    for (const auto& name : model.params().names()) {
      const Tensor& orig = model.params().value(name);
      const Tensor& back = loaded.params().value(name);
      REQUIRE(back.same_shape(orig));
      for (std::int64_t i = 0; i < orig.size(); ++i) CHECK(back.at(i) == orig.at(i));
    }
    const Tensor x = random_tensor({2, 4, 2}, rng);
    const Tensor times = times_of({0.5, 2.5});
    CHECK(testsup::max_abs_diff(loaded.predict(x, times), model.predict(x, times)) == 0.0);
    std::remove(path.c_str());
  }

  std::FILE* f = std::fopen("bad_ckpt.txt", "w");
  std::fputs("gnflow-v999 resnet 3 1 16\nend\n", f);
  std::fclose(f);
  CHECK_THROWS(FlowModel::load("bad_ckpt.txt"));
  std::remove("bad_ckpt.txt");
}

TEST_CASE("learned-mode leaves: A diagonal forced to zero") {
  Rng rng(31);
  Tensor a0 = random_tensor({4, 4}, rng);
  FlowModel model(small_cfg(Arch::kResnet, 4, 1, GraphMode::kLearned), 59, &a0);
  const Tensor a = model.adjacency();
  for (std::int64_t i = 0; i < 4; ++i) CHECK(a.at(i, i) == 0.0);
  // a0 itself is untouched
  bool any_diag = false;
  for (std::int64_t i = 0; i < 4; ++i) any_diag = any_diag || a0.at(i, i) != 0.0;
  CHECK(any_diag);
}
