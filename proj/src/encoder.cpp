#include "gmmjepa/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include "gmmjepa/rng.hpp"

namespace gmmjepa::encoder {

namespace t = gmmjepa::tensor;
using t::DenseArray;
using t::Shape;

void EncoderConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("encoder config: " + m); };
  if (channels.size() < 2) bad("channels needs at least 2 entries");
  for (auto c : channels) {
    if (c == 0) bad("channels must be positive");
    if (daam_heads == 0 || c % daam_heads != 0) bad("channels must be divisible by daam_heads");
  }
  if (frontend == Frontend::Waveform && strides.size() != n_stages()) bad("need one stride per stage");
  for (auto s : strides) {
    if (s == 0) bad("strides must be positive");
  }
  if (dilations.empty()) bad("dilations must not be empty");
  if (input_dim == 0) bad("input_dim must be positive");
  if (latent_dim == 0 || n_heads == 0 || latent_dim % n_heads != 0) bad("latent_dim must be divisible by n_heads");
  if (ffn_mult == 0) bad("ffn_mult must be positive");
  if (conv_kernel % 2 == 0) bad("conv_kernel must be odd");
  if (rel_pos_buckets < 4) bad("rel_pos_buckets must be >= 4");
  if (rel_pos_max_distance <= rel_pos_buckets / 4) bad("rel_pos_max_distance must exceed buckets/4");
  if (daam_gaussians == 0) bad("daam_gaussians must be positive");
  if (agg_dim == 0 || cluster_K < 2 || head_hidden == 0) bad("agg_dim, head_hidden > 0 and cluster_K >= 2 required");
}

std::size_t EncoderConfig::total_stride() const {
  if (frontend == Frontend::Mel) return 1;
  std::size_t s = 1;
  for (auto v : strides) s *= v;
  return s;
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"frontend", c.frontend == Frontend::Mel ? "mel" : "waveform"},
          {"input_dim", c.input_dim},
          {"channels", c.channels},
          {"strides", c.strides},
          {"dilations", c.dilations},
          {"n_conformer_layers", c.n_conformer_layers},
          {"latent_dim", c.latent_dim},
          {"n_heads", c.n_heads},
          {"ffn_mult", c.ffn_mult},
          {"conv_kernel", c.conv_kernel},
          {"rel_pos_buckets", c.rel_pos_buckets},
          {"rel_pos_max_distance", c.rel_pos_max_distance},
          {"daam_gaussians", c.daam_gaussians},
          {"daam_heads", c.daam_heads},
          {"agg_dim", c.agg_dim},
          {"cluster_K", c.cluster_K},
          {"head_hidden", c.head_hidden},
          {"head_blocks", c.head_blocks}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  const auto known = to_json(c);
  for (const auto& [k, _] : j.items()) {
    if (!known.contains(k)) throw std::invalid_argument("encoder config: unknown key '" + k + "'");
  }
  if (j.contains("frontend")) {
    const auto f = j.at("frontend").get<std::string>();
    if (f == "mel") c.frontend = Frontend::Mel;
    else if (f == "waveform") c.frontend = Frontend::Waveform;
    else throw std::invalid_argument("encoder config: frontend must be 'mel' or 'waveform'");
  }
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  get("input_dim", c.input_dim);
  get("channels", c.channels);
  get("strides", c.strides);
  get("dilations", c.dilations);
  get("n_conformer_layers", c.n_conformer_layers);
  get("latent_dim", c.latent_dim);
  get("n_heads", c.n_heads);
  get("ffn_mult", c.ffn_mult);
  get("conv_kernel", c.conv_kernel);
  get("rel_pos_buckets", c.rel_pos_buckets);
  get("rel_pos_max_distance", c.rel_pos_max_distance);
  get("daam_gaussians", c.daam_gaussians);
  get("daam_heads", c.daam_heads);
  get("agg_dim", c.agg_dim);
  get("cluster_K", c.cluster_K);
  get("head_hidden", c.head_hidden);
  get("head_blocks", c.head_blocks);
  c.validate();
  return c;
}

namespace {

// 1 / v for strictly positive v.
Var reciprocal(const Var& v) { return t::exp(t::neg(t::log(v))); }

Var swish(const Var& x) { return t::mul(x, t::sigmoid(x)); }

// x: [T, in], w: [in, out], b: [out].
Var linear(const Var& x, const Var& w, const Var& b) { return t::add(t::matmul(x, w), b); }

Var linear(const ParamStore& p, const std::string& name, const Var& x) {
  return linear(x, p.get(name + ".w"), p.get(name + ".b"));
}

Var ln(const ParamStore& p, const std::string& name, const Var& x) {
  return t::layer_norm(x, p.get(name + ".g"), p.get(name + ".b"));
}

// Per-channel vector [C] broadcast over time for a [C, T] operand.
Var per_channel(const Var& v, std::size_t T) {
  const std::size_t C = v->value.size();
  return t::expand(t::reshape(v, {C, 1}), {C, T});
}

Var ffn(const ParamStore& p, const std::string& pre, const Var& x) {
  Var h = ln(p, pre + "ln", x);
  h = swish(linear(p, pre + "l1", h));
  return linear(p, pre + "l2", h);
}

Var mhsa(const ParamStore& p, const std::string& pre, const Var& x, const Var& table, const EncoderConfig& cfg) {
  const std::size_t T = x->shape()[0];
  const std::size_t C = x->shape()[1];
  const std::size_t H = cfg.n_heads;
  const std::size_t d = C / H;
  Var h = ln(p, pre + "ln", x);
  auto heads = [&](const std::string& n) { return t::transpose(t::reshape(linear(p, pre + n, h), {T, H, d}), 0, 1); };
  Var q = heads("q");
  Var k = heads("k");
  Var v = heads("v");
  Var scores = t::mul_scalar(t::matmul(q, t::transpose(k, 1, 2)), 1.0 / std::sqrt(static_cast<double>(d)));
  const auto buckets = rel_pos_bucket_grid(T, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
  Var bias = gated_rel_pos_bias(q, table, p.get(pre + "gate_u"), p.get(pre + "gate_w"), p.get(pre + "gate_s"), buckets);
  Var attn = t::softmax(t::add(scores, bias), 2);
  Var ctx = t::reshape(t::transpose(t::matmul(attn, v), 0, 1), {T, C});
  return linear(p, pre + "o", ctx);
}

Var conv_module(const ParamStore& p, const std::string& pre, const Var& x, const EncoderConfig& cfg) {
  const std::size_t C = x->shape()[1];
  Var h = ln(p, pre + "ln", x);
  h = t::glu(linear(p, pre + "pw1", h), 1);
  t::Conv1dOptions o;
  o.padding = (cfg.conv_kernel - 1) / 2;
  o.groups = C;
  h = t::transpose(t::conv1d(t::transpose(h, 0, 1), p.get(pre + "dw.w"), p.get(pre + "dw.b"), o), 0, 1);
  h = swish(ln(p, pre + "ln2", h));
  return linear(p, pre + "pw2", h);
}

std::size_t half_bucket(std::size_t a, std::size_t B, std::size_t d_max) {
  const std::size_t q = B / 4;
  if (a < q) return a;
  const double qd = static_cast<double>(q);
  const double v = qd + qd * std::log(static_cast<double>(a) / qd) / std::log(static_cast<double>(d_max) / qd);
  return std::min(static_cast<std::size_t>(std::floor(v)), B / 2);
}

// Stage conv geometry: stride-1 kernel-3 over mel frames, kernel 2s stride s
// over samples.
t::Conv1dOptions stage_conv(const EncoderConfig& cfg, std::size_t i, std::size_t* kernel) {
  t::Conv1dOptions o;
  if (cfg.frontend == Frontend::Mel) {
    *kernel = 3;
    o.padding = 1;
  } else {
    const std::size_t s = cfg.strides[i];
    *kernel = 2 * s;
    o.stride = s;
    o.padding = (s + 1) / 2;
  }
  return o;
}

constexpr std::size_t kInKernel = 7;

}  // namespace

double snake_alpha(double a) {
  const double sp = a > 30.0 ? a : std::log1p(std::exp(a));
  return sp + 0.01;
}

Var snake_beta(const Var& x, const Var& a) {
  const std::size_t T = x->shape().at(1);
  Var alpha = t::add_scalar(t::softplus(a), 0.01);
  Var s = t::square(t::sin(t::mul(x, per_channel(alpha, T))));
  return t::add(x, t::mul(s, per_channel(reciprocal(alpha), T)));
}

Var daam(const Var& x, const Var& delta, const Var& scale, std::size_t n_heads) {
  const std::size_t C = x->shape().at(0);
  const std::size_t T = x->shape().at(1);
  if (n_heads == 0 || C % n_heads != 0) throw std::invalid_argument("daam: channels not divisible by heads");
  const std::size_t Ng = delta->shape().at(1);
  const std::size_t Ch = C / n_heads;
  std::vector<Var> outs;
  for (std::size_t h = 0; h < n_heads; ++h) {
    Var xh = t::slice(x, 0, h * Ch, (h + 1) * Ch);
    Var mu = t::expand(t::reshape(t::mean(xh, 1), {Ch, 1}), {Ch, T});
    Var centered = t::sub(xh, mu);
    Var var = t::mean(t::square(centered), 1);
    Var sigma = t::add_scalar(t::sqrt(t::add_scalar(var, 1e-12)), 1e-5);
    Var xbar = t::mul(centered, per_channel(reciprocal(sigma), T));
    Var logw;
    for (std::size_t i = 0; i < Ng; ++i) {
      Var di = t::reshape(t::slice(t::slice(delta, 0, h, h + 1), 1, i, i + 1), {1});
      Var ci = t::reshape(t::slice(t::slice(scale, 0, h, h + 1), 1, i, i + 1), {1});
      Var c2 = t::square(ci);
      Var quad = t::mul(t::square(t::sub(xbar, di)), reciprocal(t::mul_scalar(c2, 2.0)));
      Var norm = t::mul_scalar(t::log(t::mul_scalar(c2, 2.0 * std::numbers::pi)), 0.5);
      Var term = t::neg(t::add(quad, norm));
      logw = logw ? t::add(logw, term) : term;
    }
    Var w = t::softmax(logw, 1);
    outs.push_back(t::add(t::mul(xh, w), xh));
  }
  return n_heads == 1 ? outs[0] : t::concat(outs, 0);
}

std::size_t rel_pos_bucket(long distance, std::size_t B, std::size_t d_max) {
  const std::size_t a = static_cast<std::size_t>(distance < 0 ? -distance : distance);
  const std::size_t b = half_bucket(a, B, d_max);
  return distance < 0 ? B / 2 + b : b;
}

std::vector<std::size_t> rel_pos_bucket_grid(std::size_t T, std::size_t B, std::size_t d_max) {
  std::vector<std::size_t> out(T * T);
  for (std::size_t i = 0; i < T; ++i) {
    for (std::size_t j = 0; j < T; ++j) {
      out[i * T + j] = rel_pos_bucket(static_cast<long>(i) - static_cast<long>(j), B, d_max);
    }
  }
  return out;
}

Var gated_rel_pos_bias(const Var& q, const Var& table, const Var& u, const Var& w, const Var& s,
                       std::span<const std::size_t> buckets) {
  const std::size_t H = q->shape().at(0);
  const std::size_t T = q->shape().at(1);
  const std::size_t d = q->shape().at(2);
  if (buckets.size() != T * T) throw std::invalid_argument("gated_rel_pos_bias: bucket grid must be T*T");
  if (table->shape().size() != 2 || table->shape()[1] != H) {
    throw std::invalid_argument("gated_rel_pos_bias: table must be [rows, H], got " + t::shape_str(table->shape()));
  }
  Var g_u = t::sigmoid(t::matmul(q, t::reshape(u, {H, d, 1})));
  Var g_r = t::sigmoid(t::matmul(q, t::reshape(w, {H, d, 1})));
  Var one_minus = t::add_scalar(t::neg(g_u), 1.0);
  Var factor = t::add_scalar(t::add(g_u, t::mul(t::mul(one_minus, g_r), s)), 1.0);
  Var dist = t::reshape(t::transpose(t::index_select(table, buckets), 0, 1), {H, T, T});
  return t::mul(dist, t::expand(factor, {H, T, T}));
}

Var conformer_block(const ParamStore& p, const std::string& prefix, const Var& x, const Var& table,
                     const EncoderConfig& cfg) {
  Var h = t::add(x, t::mul_scalar(ffn(p, prefix + "ffn1.", x), 0.5));
  h = t::add(h, mhsa(p, prefix + "mhsa.", h, table, cfg));
  h = t::add(h, conv_module(p, prefix + "conv.", h, cfg));
  return t::add(h, t::mul_scalar(ffn(p, prefix + "ffn2.", h), 0.5));
}

Aggregate layer_aggregate(const ParamStore& p, const std::string& prefix, const std::vector<Var>& layers) {
  if (layers.empty()) throw std::invalid_argument("layer_aggregate: no layers");
  const std::size_t C = layers[0]->shape().at(1);
  std::vector<Var> pooled;
  for (const auto& z : layers) pooled.push_back(t::reshape(t::mean(z, 0), {1, C}));
  Var wq = p.get(prefix + "wq");
  Var wk = p.get(prefix + "wk");
  const double scale = 1.0 / std::sqrt(static_cast<double>(wq->shape().at(1)));
  Var q = t::matmul(pooled.back(), wq);
  Var k = t::matmul(layers.size() == 1 ? pooled[0] : t::concat(pooled, 0), wk);
  Var logits = t::mul_scalar(t::reshape(t::matmul(k, t::transpose(q, 0, 1)), {layers.size()}), scale);
  Var weights = t::softmax(logits, 0);
  Var z;
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Var wl = t::reshape(t::slice(weights, 0, l, l + 1), {1});
    Var term = t::mul(layers[l], wl);
    z = z ? t::add(z, term) : term;
  }
  return {z, weights};
}

Var cluster_head(const ParamStore& p, const Var& z, const EncoderConfig& cfg) {
  Var h = t::gelu(ln(p, "head.in.ln", linear(p, "head.in", z)));
  for (std::size_t b = 0; b < cfg.head_blocks; ++b) {
    const std::string pre = "head.block" + std::to_string(b) + ".";
    Var r = ln(p, pre + "ln", h);
    r = linear(p, pre + "l2", t::gelu(linear(p, pre + "l1", r)));
    h = t::add(h, r);
  }
  return linear(p, "head.out", ln(p, "head.out.ln", h));
}

Var predictor(const ParamStore& p, const Var& z_tilde, const Var& table, const EncoderConfig& cfg) {
  Var h = t::gelu(linear(p, "predictor.in", z_tilde));
  h = conformer_block(p, "predictor.conf.", h, table, cfg);
  return linear(p, "predictor.out", h);
}

Var mel_input(const audio::MelFrameSeq& mel) {
  DenseArray a({mel.n_mels, mel.n_frames});
  for (std::size_t tt = 0; tt < mel.n_frames; ++tt) {
    for (std::size_t m = 0; m < mel.n_mels; ++m) a.at(m, tt) = mel.at(tt, m);
  }
  t::round_to_precision(a);
  return t::constant(std::move(a));
}

Var wave_input(const audio::WaveBuffer& wav) {
  DenseArray a({1, wav.samples.size()}, wav.samples);
  t::round_to_precision(a);
  return t::constant(std::move(a));
}

std::size_t output_frames(const EncoderConfig& cfg, std::size_t len) {
  if (cfg.frontend == Frontend::Mel) return len;
  for (std::size_t i = 0; i < cfg.n_stages(); ++i) {
    std::size_t k = 0;
    const auto o = stage_conv(cfg, i, &k);
    if (len + 2 * o.padding < k) return 0;
    len = t::conv1d_out_len(len, k, o);
  }
  return len;
}

EncodeOutput encode(const ParamStore& p, const Var& input, const EncoderConfig& cfg) {
  const auto& s = input->shape();
  const std::size_t want_c = cfg.frontend == Frontend::Mel ? cfg.input_dim : 1;
  if (s.size() != 2 || s[0] != want_c) {
    throw std::invalid_argument("encode: expected input [" + std::to_string(want_c) + ", L], got " + t::shape_str(s));
  }
  if (output_frames(cfg, s[1]) < 1) throw std::invalid_argument("encode: input too short for one output frame");

  t::Conv1dOptions in_opt;
  in_opt.padding = kInKernel / 2;
  Var h = t::conv1d(input, p.get("encoder.in.w"), p.get("encoder.in.b"), in_opt);
  for (std::size_t i = 0; i < cfg.n_stages(); ++i) {
    const std::string pre = "encoder.stage" + std::to_string(i) + ".";
    std::size_t k = 0;
    const auto o = stage_conv(cfg, i, &k);
    h = t::conv1d(h, p.get(pre + "conv.w"), p.get(pre + "conv.b"), o);
    h = snake_beta(h, p.get(pre + "snake.a"));
    for (std::size_t j = 0; j < cfg.dilations.size(); ++j) {
      const std::string r = pre + "res" + std::to_string(j) + ".";
      t::Conv1dOptions ro;
      ro.dilation = cfg.dilations[j];
      ro.padding = cfg.dilations[j];
      Var y = snake_beta(h, p.get(r + "snake1.a"));
      y = t::conv1d(y, p.get(r + "conv1.w"), p.get(r + "conv1.b"), ro);
      y = snake_beta(y, p.get(r + "snake2.a"));
      y = t::conv1d(y, p.get(r + "conv2.w"), p.get(r + "conv2.b"), {});
      h = t::add(h, y);
    }
    h = daam(h, p.get(pre + "daam.delta"), p.get(pre + "daam.scale"), cfg.daam_heads);
  }
  Var z = linear(p, "encoder.proj", t::transpose(h, 0, 1));

  EncodeOutput out;
  out.layers.push_back(z);
  Var table = p.get(kRelPosTable);
  for (std::size_t l = 0; l < cfg.n_conformer_layers; ++l) {
    z = conformer_block(p, "encoder.conf" + std::to_string(l) + ".", z, table, cfg);
    out.layers.push_back(z);
  }
  auto agg = layer_aggregate(p, "encoder.agg.", out.layers);
  out.z = agg.z;
  out.layer_weights = agg.weights;
  return out;
}

namespace {

struct Init {
  ParamStore& p;
  Rng rng;

  void uniform_w(const std::string& name, Shape s, std::size_t fan_in) {
    DenseArray a(std::move(s));
    const double r = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (double& v : a.data()) v = uniform(rng, -r, r);
    t::round_to_precision(a);
    p.add(name, std::move(a));
  }
  void fill(const std::string& name, Shape s, double v) { p.add(name, DenseArray(std::move(s), v)); }
  void linear(const std::string& name, std::size_t in, std::size_t out) {
    uniform_w(name + ".w", {in, out}, in);
    fill(name + ".b", {out}, 0.0);
  }
  void conv(const std::string& name, std::size_t cin, std::size_t cout, std::size_t k, std::size_t groups = 1) {
    uniform_w(name + ".w", {cout, cin / groups, k}, cin / groups * k);
    fill(name + ".b", {cout}, 0.0);
  }
  void norm(const std::string& name, std::size_t c) {
    fill(name + ".g", {c}, 1.0);
    fill(name + ".b", {c}, 0.0);
  }
  void conformer(const std::string& pre, const EncoderConfig& cfg) {
    const std::size_t C = cfg.latent_dim;
    const std::size_t H = cfg.n_heads;
    const std::size_t d = C / H;
    ffn(pre + "ffn1.", cfg);
    norm(pre + "mhsa.ln", C);
    for (const char* n : {"q", "k", "v", "o"}) linear(pre + "mhsa." + n, C, C);
    uniform_w(pre + "mhsa.gate_u", {H, d}, d);
    uniform_w(pre + "mhsa.gate_w", {H, d}, d);
    fill(pre + "mhsa.gate_s", {1}, 1.0);
    norm(pre + "conv.ln", C);
    linear(pre + "conv.pw1", C, 2 * C);
    conv(pre + "conv.dw", C, C, cfg.conv_kernel, C);
    norm(pre + "conv.ln2", C);
    linear(pre + "conv.pw2", C, C);
    ffn(pre + "ffn2.", cfg);
  }
  void ffn(const std::string& pre, const EncoderConfig& cfg) {
    norm(pre + "ln", cfg.latent_dim);
    linear(pre + "l1", cfg.latent_dim, cfg.ffn_mult * cfg.latent_dim);
    linear(pre + "l2", cfg.ffn_mult * cfg.latent_dim, cfg.latent_dim);
  }
};

}  // namespace

void init_params(ParamStore& p, const EncoderConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Init in{p, make_rng(seed, {0x1A17})};
  const std::size_t C = cfg.latent_dim;
  const std::size_t cin = cfg.frontend == Frontend::Mel ? cfg.input_dim : 1;
  in.conv("encoder.in", cin, cfg.channels[0], kInKernel);
  for (std::size_t i = 0; i < cfg.n_stages(); ++i) {
    const std::string pre = "encoder.stage" + std::to_string(i) + ".";
    const std::size_t c0 = cfg.channels[i];
    const std::size_t c1 = cfg.channels[i + 1];
    std::size_t k = 0;
    stage_conv(cfg, i, &k);
    in.conv(pre + "conv", c0, c1, k);
    in.fill(pre + "snake.a", {c1}, 0.0);
    for (std::size_t j = 0; j < cfg.dilations.size(); ++j) {
      const std::string r = pre + "res" + std::to_string(j) + ".";
      in.fill(r + "snake1.a", {c1}, 0.0);
      in.conv(r + "conv1", c1, c1, 3);
      in.fill(r + "snake2.a", {c1}, 0.0);
      in.conv(r + "conv2", c1, c1, 1);
    }
    DenseArray delta({cfg.daam_heads, cfg.daam_gaussians});
    for (std::size_t h = 0; h < cfg.daam_heads; ++h) {
      for (std::size_t g = 0; g < cfg.daam_gaussians; ++g) {
        delta.at(h, g) = cfg.daam_gaussians == 1
                             ? 0.0
                             : -1.0 + 2.0 * static_cast<double>(g) / static_cast<double>(cfg.daam_gaussians - 1);
      }
    }
    p.add(pre + "daam.delta", std::move(delta));
    in.fill(pre + "daam.scale", {cfg.daam_heads, cfg.daam_gaussians}, 1.0);
  }
  in.linear("encoder.proj", cfg.channels.back(), C);
  in.fill(kRelPosTable, {cfg.rel_pos_table_rows(), cfg.n_heads}, 0.0);
  for (std::size_t l = 0; l < cfg.n_conformer_layers; ++l) in.conformer("encoder.conf" + std::to_string(l) + ".", cfg);
  in.uniform_w("encoder.agg.wq", {C, cfg.agg_dim}, C);
  in.uniform_w("encoder.agg.wk", {C, cfg.agg_dim}, C);

  in.linear("head.in", C, cfg.head_hidden);
  in.norm("head.in.ln", cfg.head_hidden);
  for (std::size_t b = 0; b < cfg.head_blocks; ++b) {
    const std::string pre = "head.block" + std::to_string(b) + ".";
    in.norm(pre + "ln", cfg.head_hidden);
    in.linear(pre + "l1", cfg.head_hidden, cfg.head_hidden);
    in.linear(pre + "l2", cfg.head_hidden, cfg.head_hidden);
  }
  in.norm("head.out.ln", cfg.head_hidden);
  in.linear("head.out", cfg.head_hidden, cfg.cluster_K);

  in.linear("predictor.in", C, C);
  in.conformer("predictor.conf.", cfg);
  in.linear("predictor.out", C, C);

  DenseArray tok({C});
  for (double& v : tok.data()) v = normal(in.rng, 0.0, 0.02);
  t::round_to_precision(tok);
  p.add(kMaskToken, std::move(tok));
}

void ema_update(const ParamStore& online, ParamStore& target, double tau) {
  if (!(tau >= 0.0 && tau <= 1.0)) throw std::invalid_argument("ema_update: tau must be in [0,1]");
  for (const auto& [name, tv] : target.items()) {
    const Var& ov = online.get(name);
    if (ov->shape() != tv->shape()) {
      throw std::invalid_argument("ema_update: shape mismatch for " + name + " " + t::shape_str(ov->shape()) +
                                  " vs " + t::shape_str(tv->shape()));
    }
    auto dst = tv->value.data();
    const auto src = ov->value.data();
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] = tau * dst[i] + (1.0 - tau) * src[i];
    t::round_to_precision(tv->value);
  }
}

}  // namespace gmmjepa::encoder
