#include <doctest.h>

#include "oracles.hpp"
#include "ttt/harness.hpp"
#include "ttt/model.hpp"

using namespace ttt;

namespace {

ModelConfig tiny_image_model() {
  ModelConfig c;
  c.image_size = 8;
  c.patch = 4;
  c.channels = 4;
  c.heads = 1;
  c.depth = 1;
  c.classes = 3;
  return c;
}

// Adapted depthwise kernel for the dot-product loss: one step from w0 with
// dy = -eta/(N sqrt d) V, i.e. W1[tap, c] = W0[tap, c] - sum_out dy(out, c) K(in, c).
Tensor dwconv_dot_step(const Tensor& k, const Tensor& v, const Tensor& w0, Grid g, double eta) {
  const std::size_t n = k.dim(0), d = k.dim(1);
  const double scale = eta / (n * std::sqrt(double(d)));
  Tensor w = w0;
  for (std::size_t oy = 0; oy < g.height; ++oy)
    for (std::size_t ox = 0; ox < g.width; ++ox)
      for (std::size_t tap = 0; tap < 9; ++tap) {
        const long iy = long(oy) + long(tap / 3) - 1, ix = long(ox) + long(tap % 3) - 1;
        if (iy < 0 || ix < 0 || iy >= long(g.height) || ix >= long(g.width)) continue;
        const std::size_t in = std::size_t(iy) * g.width + std::size_t(ix), out = oy * g.width + ox;
        for (std::size_t c = 0; c < d; ++c) w[tap * d + c] += scale * v.at(out, c) * k.at(in, c);
      }
  return w;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("patching") {
    std::mt19937_64 rng(1);
    const Tensor img = oracle::random({32, 32, 3}, rng, 0, 1);
    const Tensor p = patch_unfold(img, 4);
    CHECK(p.shape() == Shape{64, 48});
    CHECK(max_abs_diff(patch_fold(p, 32, 32, 3, 4), img) == 0.0);
    // patch (1, 2) row 0 col 0 channel 1 sits at pixel (4, 8)
    CHECK(p.at(1 * 8 + 2, 1) == img[(4 * 32 + 8) * 3 + 1]);
    CHECK_THROWS_AS(patch_unfold(img, 5), ConfigError);
    ModelConfig bad = vit3_micro();
    bad.patch = 5;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("constant image gives identical token embeddings") {
    const ModelConfig cfg = vit3_micro();
    const NamedTensors p = init_model(cfg, 2);
    ad::Tape t(false);
    Binder b(t, p);
    const Tensor e = patch_embed(b, Tensor::full({32, 32, 3}, 0.3), cfg).value();
    CHECK(e.shape() == Shape{64, 64});
    for (std::size_t i = 1; i < 64; ++i)
      for (std::size_t j = 0; j < 64; ++j) CHECK(e.at(i, j) == e.at(0, j));
  }

  TEST_CASE("zero-initialized residual branches leave x + CPE(x)") {
    ModelConfig cfg = vit3_micro();
    cfg.zero_init_residual = true;
    const NamedTensors p = init_model(cfg, 3);
    std::mt19937_64 rng(3);
    const Tensor x = oracle::random({64, 64}, rng);
    ad::Tape t(false);
    Binder b(t, p);
    const Tensor y = vit3_block(b, "blocks.0", t.constant(x), cfg.grid(), cfg).value();
    Tensor want = oracle::conv(x, cfg.grid(), p.at("blocks.0.cpe.k"), true);
    for (std::size_t i = 0; i < want.size(); ++i) want[i] += x[i];
    CHECK(y.shape() == x.shape());
    CHECK(max_abs_diff(y, want) < 1e-13);
  }

  TEST_CASE("block gradients match finite differences") {
    ModelConfig cfg;
    cfg.input = InputKind::tokens;
    cfg.token_dim = 8;
    cfg.token_grid = {4, 4};
    cfg.channels = 8;
    cfg.heads = 1;
    cfg.head_models = {inner::Spec{inner::Kind::gated_fc}};
    cfg.depth = 1;
    cfg.inner = {inner::Loss::mse, 1, inner::Partition::full_batch(), inner::LearningRate::fixed(1.0)};
    for (auto heads : {std::vector<inner::Spec>{{inner::Kind::gated_fc}}, std::vector<inner::Spec>{{inner::Kind::dwconv3x3}}}) {
      cfg.head_models = heads;
      const NamedTensors p = init_model(cfg, 4);
      std::vector<std::string> names;
      std::vector<Tensor> vals;
      for (const auto& [n, t] : p) {
        if (n.rfind("blocks.0.", 0) != 0) continue;
        names.push_back(n);
        vals.push_back(t);
      }
      std::mt19937_64 rng(4);
      const Tensor x = oracle::random({16, 8}, rng), r = oracle::random({16, 8}, rng);
      auto f = [&](ad::Tape& t, std::span<const ad::Var> v) {
        NamedTensors none;
        Binder b(t, none);
        for (std::size_t i = 0; i < names.size(); ++i) b.bind(names[i], v[i]);
        return ad::sum(ad::mul(vit3_block(b, "blocks.0", t.constant(x), cfg.token_grid, cfg), t.constant(r)));
      };
      CHECK(ad::gradcheck(f, vals).max_rel_error < 1e-4);
    }
  }

  TEST_CASE("classifier matches a manual composition") {
    const ModelConfig cfg = tiny_image_model();
    const NamedTensors p = init_model(cfg, 5);
    std::mt19937_64 rng(5);
    const Tensor img = oracle::random({8, 8, 3}, rng, 0, 1);
    const Grid g{2, 2};
    // patch rows by hand
    Tensor patches({4, 48});
    for (std::size_t py = 0; py < 2; ++py)
      for (std::size_t px = 0; px < 2; ++px)
        for (std::size_t y = 0; y < 4; ++y)
          for (std::size_t x = 0; x < 4; ++x)
            for (std::size_t c = 0; c < 3; ++c)
              patches.at(py * 2 + px, (y * 4 + x) * 3 + c) = img[((py * 4 + y) * 8 + px * 4 + x) * 3 + c];
    auto bias = [](Tensor m, const Tensor& b) {
      for (std::size_t i = 0; i < m.dim(0); ++i)
        for (std::size_t j = 0; j < m.dim(1); ++j) m.at(i, j) += b[j];
      return m;
    };
    auto plus = [](Tensor a, const Tensor& b) {
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
      return a;
    };
    Tensor x = bias(oracle::matmul(patches, p.at("embed.w")), p.at("embed.b"));
    x = plus(x, bias(oracle::conv(x, g, p.at("blocks.0.cpe.k"), true), p.at("blocks.0.cpe.b")));
    const Tensor h = oracle::layer_norm(x, p.at("blocks.0.ln1.g"), p.at("blocks.0.ln1.b"));
    const Tensor q = oracle::matmul(h, p.at("blocks.0.attn.wq.0"));
    const Tensor k = oracle::matmul(h, p.at("blocks.0.attn.wk.0"));
    const Tensor v = oracle::matmul(h, p.at("blocks.0.attn.wv.0"));
    const Tensor w1 = dwconv_dot_step(k, v, p.at("blocks.0.attn.w0.0.0"), g, cfg.inner.lr.eta);
    x = plus(x, oracle::matmul(oracle::conv(q, g, w1, true), p.at("blocks.0.attn.wo")));
    Tensor m = oracle::layer_norm(x, p.at("blocks.0.ln2.g"), p.at("blocks.0.ln2.b"));
    m = oracle::map(bias(oracle::matmul(m, p.at("blocks.0.mlp.w1")), p.at("blocks.0.mlp.b1")),
                    [](double z) { return oracle::silu(z); });
    x = plus(x, bias(oracle::matmul(m, p.at("blocks.0.mlp.w2")), p.at("blocks.0.mlp.b2")));
    Tensor pooled({1, 4});
    for (std::size_t i = 0; i < 4; ++i)
      for (std::size_t j = 0; j < 4; ++j) pooled[j] += x.at(i, j) / 4.0;
    const Tensor want = bias(oracle::matmul(pooled, p.at("head.w")), p.at("head.b"));

    const Tensor got = forward_classifier(p, std::vector<Tensor>{img}, cfg);
    CHECK(max_abs_diff(got, want) < 1e-10);
  }

  TEST_CASE("batched inference") {
    const ModelConfig cfg = vit3_micro();
    const NamedTensors p = init_model(cfg, 6);
    std::mt19937_64 rng(6);
    const Tensor img = oracle::random({32, 32, 3}, rng, 0, 1);
    const Tensor logits = forward_classifier(p, std::vector<Tensor>{img, img}, cfg);
    CHECK(logits.shape() == Shape{2, 10});
    CHECK(logits.all_finite());
    for (std::size_t j = 0; j < 10; ++j) CHECK(logits.at(0, j) == logits.at(1, j));
    Tensor batch({2, 32, 32, 3});
    std::copy(img.data().begin(), img.data().end(), batch.raw());
    std::copy(img.data().begin(), img.data().end(), batch.raw() + img.size());
    CHECK(max_abs_diff(forward_classifier(p, batch, cfg), logits) == 0.0);
  }

  TEST_CASE("AdamW") {
    AdamWConfig cfg;
    cfg.lr = 0.1;
    cfg.weight_decay = 0.0;
    NamedTensors p{{"w", Tensor({2, 2}, {1, 2, 3, 4})}};
    OptState st;
    adamw_step(p, {{"w", Tensor::zeros({2, 2})}}, st, cfg, cfg.lr);
    CHECK(max_abs_diff(p.at("w"), Tensor({2, 2}, {1, 2, 3, 4})) == 0.0);

    // scalar recurrence by hand
    NamedTensors s{{"w", Tensor({1, 1}, {0.5})}};
    OptState ss;
    cfg.weight_decay = 0.01;
    double w = 0.5, m = 0, v = 0;
    const double gs[] = {0.3, -1.2, 0.05};
    for (int t = 1; t <= 3; ++t) {
      const double g = gs[t - 1];
      adamw_step(s, {{"w", Tensor({1, 1}, {g})}}, ss, cfg, cfg.lr);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      w -= cfg.lr * cfg.weight_decay * w;
      w -= cfg.lr * (m / (1 - std::pow(0.9, t))) / (std::sqrt(v / (1 - std::pow(0.999, t))) + 1e-8);
      CHECK(s.at("w")[0] == doctest::Approx(w).epsilon(1e-14));
    }

    // decay only: shrink by (1 - lr wd) per step; vectors are exempt
    NamedTensors d{{"m", Tensor({1, 2}, {1.0, -2.0})}, {"b", Tensor({2}, {1.0, 1.0})}};
    OptState ds;
    cfg.weight_decay = 0.5;
    for (int i = 0; i < 3; ++i) adamw_step(d, {{"m", Tensor::zeros({1, 2})}, {"b", Tensor::zeros({2})}}, ds, cfg, 0.1);
    CHECK(d.at("m")[0] == doctest::Approx(std::pow(1 - 0.05, 3)).epsilon(1e-14));
    CHECK(d.at("b")[0] == 1.0);
  }

  TEST_CASE("warmup and cosine schedule") {
    CHECK(cosine_lr(0, 100, 10, 1.0) == doctest::Approx(0.1));
    CHECK(cosine_lr(9, 100, 10, 1.0) == doctest::Approx(1.0));
    CHECK(cosine_lr(10, 100, 10, 1.0) == doctest::Approx(1.0));
    CHECK(cosine_lr(55, 100, 10, 1.0) == doctest::Approx(0.5));
    CHECK(cosine_lr(100, 100, 10, 1.0) == doctest::Approx(0.0));
  }

  TEST_CASE("FLOPs accounting") {
    TTTLayerConfig l;
    l.channels = 64;
    l.heads = 4;
    l.head_models = uniform_heads(4, inner::Spec{inner::Kind::fc});
    l.train = {inner::Loss::mse, 1, inner::Partition::full_batch(), inner::LearningRate::fixed(1.0)};
    const auto f = ttt_layer_flops(l, 196, {14, 14});
    CHECK(f.inner_ratio() == doctest::Approx(4.0).epsilon(0.05));
    l.train.lr = inner::LearningRate::fixed(7.5);
    CHECK(ttt_layer_flops(l, 196, {14, 14}).ttt_total() == f.ttt_total());
    const auto f2 = ttt_layer_flops(l, 392, {14, 28});
    CHECK(f2.ttt_total() == 2 * f.ttt_total());
    CHECK(f2.softmax_core == 4 * f.softmax_core);
  }

  TEST_CASE("FLOPs match the instrumented counter") {
    std::mt19937_64 rng(7);
    for (auto heads : {vit3_heads(2), uniform_heads(2, inner::Spec{inner::Kind::swiglu}),
                       uniform_heads(2, inner::Spec{inner::Kind::mlp, 2, 3}), uniform_heads(2, inner::Spec{inner::Kind::conv3x3}),
                       uniform_heads(2, inner::Spec{inner::Kind::mlp_w2_plus_i})}) {
      for (auto train : {inner::TrainConfig{inner::Loss::mse, 2, inner::Partition::sequential(3), inner::LearningRate::dynamic(1.0)},
                         inner::TrainConfig{inner::Loss::dot_product, 1, inner::Partition::full_batch(),
                                            inner::LearningRate::fixed(1.0)}}) {
        TTTLayerConfig l;
        l.channels = 8;
        l.heads = 2;
        l.head_models = heads;
        l.train = train;
        NamedTensors p;
        init_ttt_layer(p, "a", l, rng);
        const Tensor x = oracle::random({12, 8}, rng);
        mac_counter_reset();
        (void)ttt_attention(p, "a", x, Grid{3, 4}, l);
        CHECK(mac_counter() == ttt_layer_flops(l, 12, {3, 4}).ttt_total());
        mac_counter_reset();
        (void)softmax_attention(p, "a", x, l);
        CHECK(mac_counter() == ttt_layer_flops(l, 12, {3, 4}).softmax_total());
      }
    }
    const ModelConfig micro = vit3_micro();
    const NamedTensors p = init_model(micro, 7);
    mac_counter_reset();
    (void)forward_classifier(p, std::vector<Tensor>{oracle::random({32, 32, 3}, rng, 0, 1)}, micro);
    const double counted = static_cast<double>(mac_counter());
    const double est = static_cast<double>(flops_estimate(micro).total());
    CHECK(std::abs(est - counted) / counted < 0.10);
    CHECK(est == counted);
  }

  TEST_CASE("micro model end-to-end gradients at sampled coordinates") {
    ModelConfig cfg = vit3_micro();
    cfg.depth = 1;
    const NamedTensors p = init_model(cfg, 8);
    std::mt19937_64 rng(8);
    const Tensor img = oracle::random({32, 32, 3}, rng, 0, 1);
    const int label = 4;
    auto loss_at = [&](const NamedTensors& q) {
      ad::Tape t(false);
      Binder b(t, q);
      return ad::cross_entropy(forward_sample(b, img, cfg), std::span<const int>(&label, 1)).value().item();
    };
    ad::Tape t;
    Binder b(t, p);
    const auto grads = b.gradients(t.backward(ad::cross_entropy(forward_sample(b, img, cfg), std::span<const int>(&label, 1))));
    double worst = 0.0;
    for (const auto& [name, g] : grads) {
      std::uniform_int_distribution<std::size_t> pick(0, g.size() - 1);
      for (int s = 0; s < 4; ++s) {
        const std::size_t i = pick(rng);
        NamedTensors a = p, c = p;
        a[name][i] += 1e-5;
        c[name][i] -= 1e-5;
        const double num = (loss_at(a) - loss_at(c)) / 2e-5;
        worst = std::max(worst, std::abs(num - g[i]) / std::max(1.0, std::abs(num)));
      }
    }
    CHECK(worst < 1e-4);
  }

  TEST_CASE("training on the recall task lowers the loss every epoch") {
    harness::RunConfig cfg = harness::default_config();
    cfg.trainer.epochs = 5;
    ModelConfig model = cfg.model;
    const auto data = harness::load_task(cfg.task, 0, model);
    const auto report = harness::train_run(model, cfg.trainer, data, 0);
    REQUIRE(report.epochs.size() == 5);
    for (std::size_t e = 1; e < 5; ++e) CHECK(report.epochs[e].train_loss < report.epochs[e - 1].train_loss);
  }

  TEST_CASE("gradient reduction does not depend on the thread count") {
    harness::RunConfig cfg = harness::default_config();
    cfg.task.train = 100;
    cfg.task.val = 20;
    cfg.trainer.epochs = 1;
    ModelConfig model = cfg.model;
    const auto data = harness::load_task(cfg.task, 1, model);
    TrainerConfig a = cfg.trainer, b = cfg.trainer;
    a.threads = 1;
    b.threads = 3;
    const auto ra = harness::train_run(model, a, data, 1), rb = harness::train_run(model, b, data, 1);
    for (const auto& [name, t] : ra.params) CHECK(max_abs_diff(t, rb.params.at(name)) == 0.0);
  }
}
