#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "gmmjepa/encoder.hpp"
#include "gmmjepa/gradsuite.hpp"
#include "gmmjepa/rng.hpp"

using namespace gmmjepa;
using namespace gmmjepa::encoder;
using namespace gmmjepa::tensor;

namespace {

DenseArray rand_arr(Shape s, std::uint64_t seed, double scale = 1.0) {
  DenseArray a(std::move(s));
  Rng rng = make_rng(seed, {5});
  for (double& v : a.data()) v = uniform(rng, -scale, scale);
  return a;
}

// Reference bucket: identity below B/4, log-spaced up to B/2, sign bank above.
std::size_t ref_bucket(long d, std::size_t B, std::size_t dmax) {
  const double a = std::abs(static_cast<double>(d)), q = B / 4.0;
  double b = a < q ? a : q + q * std::log(a / q) / std::log(dmax / q);
  b = std::min(std::floor(b), B / 2.0);
  return static_cast<std::size_t>(d < 0 ? B / 2.0 + b : b);
}

}  // namespace

TEST(Encoder, SnakeMatchesFormula) {
  set_precision(Precision::F64);
  Var x = constant(rand_arr({2, 5}, 1, 3.0));
  Var a = constant(DenseArray({2}, {-0.5, 1.5}));
  Var y = snake_beta(x, a);
  for (std::size_t c = 0; c < 2; ++c) {
    const double al = std::log1p(std::exp(a->value[c])) + 0.01;
    EXPECT_DOUBLE_EQ(snake_alpha(a->value[c]), al);
    for (std::size_t t = 0; t < 5; ++t) {
      const double v = x->value.at(c, t);
      EXPECT_NEAR(y->value.at(c, t), v + std::pow(std::sin(al * v), 2) / al, 1e-12);
    }
  }
}

TEST(Encoder, DaamMatchesDirectEvaluation) {
  const std::size_t C = 4, T = 6, H = 2, G = 2;
  Var x = constant(rand_arr({C, T}, 2));
  Var delta = constant(DenseArray({H, G}, {-0.5, 0.5, 0.0, 1.0}));
  Var scale = constant(DenseArray({H, G}, {1.0, 0.7, 1.3, 0.9}));
  Var y = daam(x, delta, scale, H);
  for (std::size_t c = 0; c < C; ++c) {
    const std::size_t h = c / (C / H);
    double mu = 0, var = 0;
    for (std::size_t t = 0; t < T; ++t) mu += x->value.at(c, t) / T;
    for (std::size_t t = 0; t < T; ++t) var += std::pow(x->value.at(c, t) - mu, 2) / T;
    const double sd = std::sqrt(var + 1e-12) + 1e-5;
    std::vector<double> lw(T);
    double mx = -1e300;
    for (std::size_t t = 0; t < T; ++t) {
      const double xb = (x->value.at(c, t) - mu) / sd;
      for (std::size_t g = 0; g < G; ++g) {
        const double d = delta->value.at(h, g), s = scale->value.at(h, g);
        lw[t] += -std::pow(xb - d, 2) / (2 * s * s);
      }
      mx = std::max(mx, lw[t]);
    }
    double z = 0;
    for (double v : lw) z += std::exp(v - mx);
    for (std::size_t t = 0; t < T; ++t) {
      const double w = std::exp(lw[t] - mx) / z;
      EXPECT_NEAR(y->value.at(c, t), x->value.at(c, t) * w + x->value.at(c, t), 1e-12);
    }
  }
}

TEST(Encoder, RelPosBuckets) {
  const std::size_t B = 320, D = 800;
  EXPECT_EQ(rel_pos_bucket(0, B, D), 0u);
  EXPECT_EQ(rel_pos_bucket(79, B, D), 79u);
  EXPECT_EQ(rel_pos_bucket(80, B, D), 80u);
  EXPECT_EQ(rel_pos_bucket(800, B, D), 160u);
  EXPECT_EQ(rel_pos_bucket(5000, B, D), 160u);
  EXPECT_EQ(rel_pos_bucket(-3, B, D), 163u);
  for (long d = -1000; d <= 1000; d += 7) ASSERT_EQ(rel_pos_bucket(d, B, D), ref_bucket(d, B, D)) << d;
  std::size_t prev = 0;
  for (long d = 0; d <= 900; ++d) {
    const auto b = rel_pos_bucket(d, B, D);
    ASSERT_GE(b, prev);
    ASSERT_LE(b, B);
    prev = b;
  }
  const auto grid = rel_pos_bucket_grid(3, 8, 16);
  EXPECT_EQ(grid[0 * 3 + 2], rel_pos_bucket(-2, 8, 16));
  EXPECT_EQ(grid[2 * 3 + 0], rel_pos_bucket(2, 8, 16));
}

TEST(Encoder, GatedBiasMatchesFormula) {
  const std::size_t H = 2, T = 4, d = 3, B = 8;
  Var q = constant(rand_arr({H, T, d}, 3));
  Var table = constant(rand_arr({B + 1, H}, 4));
  Var u = constant(rand_arr({H, d}, 5));
  Var w = constant(rand_arr({H, d}, 6));
  Var s = constant(DenseArray({1}, {0.7}));
  const auto grid = rel_pos_bucket_grid(T, B, 16);
  Var r = gated_rel_pos_bias(q, table, u, w, s, grid);
  auto sig = [](double v) { return 1 / (1 + std::exp(-v)); };
  for (std::size_t h = 0; h < H; ++h)
    for (std::size_t i = 0; i < T; ++i) {
      double qu = 0, qw = 0;
      for (std::size_t k = 0; k < d; ++k) {
        qu += q->value[(h * T + i) * d + k] * u->value.at(h, k);
        qw += q->value[(h * T + i) * d + k] * w->value.at(h, k);
      }
      const double gu = sig(qu), gr = sig(qw);
      for (std::size_t j = 0; j < T; ++j) {
        const double dd = table->value.at(grid[i * T + j], h);
        const double rt = 0.7 * gr * dd;
        EXPECT_NEAR(r->value[(h * T + i) * T + j], dd + gu * dd + (1 - gu) * rt, 1e-12);
      }
    }
}

TEST(Encoder, InitNamesShapesAndValues) {
  const auto cfg = gradsuite::micro_config();
  ParamStore p;
  init_params(p, cfg, 3);
  for (const char* n : {"encoder.in.w", "encoder.stage0.conv.w", "encoder.stage0.snake.a", "encoder.stage0.res1.conv1.w",
                        "encoder.stage0.daam.delta", "encoder.proj.w", "encoder.rel_pos.table",
                        "encoder.conf0.mhsa.gate_s", "encoder.agg.wq", "head.in.w", "head.block0.l1.w", "head.out.w",
                        "predictor.in.w", "predictor.conf.ffn1.l1.w", "predictor.out.b", "t_mask"}) {
    EXPECT_TRUE(p.contains(n)) << n;
  }
  EXPECT_EQ(p.get(kRelPosTable)->shape(), (Shape{cfg.rel_pos_buckets + 1, cfg.n_heads}));
  for (double v : p.get(kRelPosTable)->value.vec()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(p.get("encoder.conf0.mhsa.gate_s")->value[0], 1.0);
  const auto& delta = p.get("encoder.stage0.daam.delta")->value;
  EXPECT_EQ(delta.at(0, 0), -1.0);
  EXPECT_EQ(delta.at(0, cfg.daam_gaussians - 1), 1.0);
  const auto& w = p.get("head.in.w")->value;
  const double bound = 1 / std::sqrt(double(cfg.latent_dim));
  for (double v : w.vec()) EXPECT_LE(std::abs(v), bound);
  for (double v : p.get("head.in.b")->value.vec()) EXPECT_EQ(v, 0.0);

  ParamStore p2;
  init_params(p2, cfg, 3);
  for (std::size_t i = 0; i < p.size(); ++i) EXPECT_EQ(p.items()[i].second->value.vec(), p2.items()[i].second->value.vec());
}

TEST(Encoder, EncodeShapesAndConvexLayerWeights) {
  auto cfg = gradsuite::micro_config();
  ParamStore p;
  init_params(p, cfg, 1);
  Var in = constant(rand_arr({cfg.input_dim, 11}, 7));
  const auto out = encode(p, in, cfg);
  EXPECT_EQ(out.z->shape(), (Shape{11, cfg.latent_dim}));
  EXPECT_EQ(out.layers.size(), cfg.n_conformer_layers + 1);
  double s = 0;
  for (double v : out.layer_weights->value.vec()) {
    EXPECT_GT(v, 0);
    s += v;
  }
  EXPECT_NEAR(s, 1.0, 1e-12);
  EXPECT_EQ(cluster_head(p, out.z, cfg)->shape(), (Shape{11, cfg.cluster_K}));
  EXPECT_EQ(predictor(p, out.z, p.get(kRelPosTable), cfg)->shape(), out.z->shape());
}

TEST(Encoder, WaveformFrontendMatchesFrameRate) {
  auto cfg = gradsuite::micro_config();
  cfg.frontend = Frontend::Waveform;
  cfg.input_dim = 1;
  cfg.strides = {4};
  cfg.validate();
  EXPECT_EQ(cfg.total_stride(), 4u);
  EXPECT_EQ(output_frames(cfg, 40), 10u);
  ParamStore p;
  init_params(p, cfg, 2);
  const auto out = encode(p, constant(rand_arr({1, 40}, 8)), cfg);
  EXPECT_EQ(out.z->shape(), (Shape{10, cfg.latent_dim}));
}

TEST(Encoder, EmaIsGeometric) {
  ParamStore online;
  online.add("encoder.x", DenseArray({2}, {1.0, -1.0}));
  ParamStore target;
  target.add("encoder.x", DenseArray({2}, {0.0, 0.0}));
  double prev = 1.0;
  for (int s = 0; s < 20; ++s) {
    ema_update(online, target, 0.996);
    const double gap = online.get("encoder.x")->value[0] - target.get("encoder.x")->value[0];
    EXPECT_NEAR(gap / prev, 0.996, 1e-12);
    prev = gap;
  }
  ParamStore bad;
  bad.add("encoder.x", DenseArray({3}));
  EXPECT_THROW(ema_update(online, bad, 0.5), std::invalid_argument);
}

TEST(Encoder, ConfigValidation) {
  EncoderConfig c;
  EXPECT_NO_THROW(c.validate());
  c.conv_kernel = 4;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c = EncoderConfig{};
  c.latent_dim = 30;
  EXPECT_THROW(c.validate(), std::invalid_argument);
  const auto j = to_json(EncoderConfig{});
  EXPECT_EQ(to_json(encoder_config_from_json(j)), j);
  auto bad = j;
  bad["nope"] = 1;
  EXPECT_THROW(encoder_config_from_json(bad), std::invalid_argument);
}
