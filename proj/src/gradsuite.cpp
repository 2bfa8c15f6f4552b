#include "gmmjepa/gradsuite.hpp"

#include <chrono>
#include <stdexcept>

#include "gmmjepa/rng.hpp"
#include "gmmjepa/trainer.hpp"

namespace gmmjepa::gradsuite {

namespace t = tensor;
using t::DenseArray;
using t::Shape;
using t::Var;

namespace {

constexpr std::size_t kT = 7;

DenseArray random_array(Rng& rng, Shape s, double scale = 1.0) {
  DenseArray a(std::move(s));
  for (double& v : a.data()) v = uniform(rng, -scale, scale);
  return a;
}

// Copies the named parameters out of a fully initialized store, jittered so
// identity-initialized tensors (LN gains, zero tables) still probe every path.
ParamStore pick(const ParamStore& full, const std::vector<std::string>& prefixes, Rng& rng) {
  ParamStore out;
  for (const auto& [name, v] : full.items()) {
    bool keep = false;
    for (const auto& p : prefixes) keep = keep || name.starts_with(p);
    if (!keep) continue;
    DenseArray a = v->value;
    for (double& x : a.data()) x += uniform(rng, -0.1, 0.1);
    out.add(name, std::move(a));
  }
  return out;
}

// Contracts an output with fixed random weights so every element matters.
Var project(const Var& y, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0xF0});
  return t::sum_all(t::mul(y, t::constant(random_array(rng, y->shape()))));
}

Var with_fault(Var loss, const ParamStore& p, bool fault) {
  if (!fault) return loss;
  const Var& first = p.items().front().second;
  return t::add(loss, t::sum_all(t::mul(first, t::constant(first->value))));
}

std::vector<std::size_t> every_other(std::size_t T) {
  std::vector<std::size_t> m;
  for (std::size_t i = 0; i < T; i += 2) m.push_back(i);
  return m;
}

struct Case {
  ParamStore params;
  LossBuilder loss;
};

Case build(const std::string& name, bool fault, std::uint64_t seed) {
  const auto cfg = micro_config();
  ParamStore full;
  encoder::init_params(full, cfg, seed);
  Rng rng = make_rng(seed, {0x6C, 1});
  const std::size_t C = cfg.latent_dim;
  Case c;

  if (name == "snake_beta") {
    c.params.add("x", random_array(rng, {3, kT}, 2.0));
    c.params.add("a", random_array(rng, {3}));
    c.loss = [=](const ParamStore& p) {
      return with_fault(project(encoder::snake_beta(p.get("x"), p.get("a")), seed), p, fault);
    };
  } else if (name == "daam") {
    const std::size_t ch = cfg.channels.back();
    c.params.add("x", random_array(rng, {ch, kT}));
    c.params.add("delta", random_array(rng, {cfg.daam_heads, cfg.daam_gaussians}));
    DenseArray sc = random_array(rng, {cfg.daam_heads, cfg.daam_gaussians}, 0.3);
    for (double& v : sc.data()) v += 1.0;
    c.params.add("scale", std::move(sc));
    const std::size_t heads = cfg.daam_heads;
    c.loss = [=](const ParamStore& p) {
      Var y = encoder::daam(p.get("x"), p.get("delta"), p.get("scale"), heads);
      return with_fault(project(y, seed), p, fault);
    };
  } else if (name == "gated_rel_pos_bias") {
    const std::size_t H = cfg.n_heads, d = C / H;
    c.params.add("q", random_array(rng, {H, kT, d}));
    c.params.add("table", random_array(rng, {cfg.rel_pos_table_rows(), H}));
    c.params.add("u", random_array(rng, {H, d}));
    c.params.add("w", random_array(rng, {H, d}));
    c.params.add("s", DenseArray({1}, std::vector<double>{0.8}));
    const auto grid = encoder::rel_pos_bucket_grid(kT, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
    c.loss = [=](const ParamStore& p) {
      Var y = encoder::gated_rel_pos_bias(p.get("q"), p.get("table"), p.get("u"), p.get("w"), p.get("s"), grid);
      return with_fault(project(y, seed), p, fault);
    };
  } else if (name == "conformer_block") {
    c.params = pick(full, {"encoder.conf0.", encoder::kRelPosTable}, rng);
    c.params.add("x", random_array(rng, {kT, C}));
    c.loss = [=](const ParamStore& p) {
      Var y = encoder::conformer_block(p, "encoder.conf0.", p.get("x"), p.get(encoder::kRelPosTable), cfg);
      return with_fault(project(y, seed), p, fault);
    };
  } else if (name == "cluster_head") {
    c.params = pick(full, {"head."}, rng);
    c.params.add("z", random_array(rng, {kT, C}));
    c.loss = [=](const ParamStore& p) {
      return with_fault(project(encoder::cluster_head(p, p.get("z"), cfg), seed), p, fault);
    };
  } else if (name == "predictor") {
    c.params = pick(full, {"predictor.", encoder::kRelPosTable}, rng);
    c.params.add("z", random_array(rng, {kT, C}));
    c.loss = [=](const ParamStore& p) {
      Var y = encoder::predictor(p, p.get("z"), p.get(encoder::kRelPosTable), cfg);
      return with_fault(project(y, seed), p, fault);
    };
  } else if (name == "encoder") {
    c.params = pick(full, {"encoder."}, rng);
    const Var input = t::constant(random_array(rng, {cfg.input_dim, kT}));
    c.loss = [=](const ParamStore& p) {
      return with_fault(project(encoder::encode(p, input, cfg).z, seed), p, fault);
    };
  } else if (name == "jepa_loss") {
    c.params.add("pred", random_array(rng, {kT, C}));
    c.params.add("target", random_array(rng, {kT, C}));
    const auto masked = every_other(kT);
    c.loss = [=](const ParamStore& p) {
      return with_fault(trainer::jepa_loss(p.get("pred"), p.get("target"), masked), p, fault);
    };
  } else if (name == "cluster_kl_loss") {
    const std::size_t K = cfg.cluster_K;
    c.params.add("logits", random_array(rng, {kT, K}, 2.0));
    cluster::PosteriorSeq q;
    q.rows = kT;
    q.K = K;
    for (std::size_t r = 0; r < kT; ++r) {
      std::vector<double> row(K);
      double s = 0.0;
      for (double& v : row) s += (v = uniform(rng, 0.05, 1.0));
      for (double v : row) {
        q.q.push_back(v / s);
        q.log_q.push_back(std::log(v / s));
      }
    }
    const auto masked = every_other(kT);
    c.loss = [=](const ParamStore& p) {
      return with_fault(trainer::cluster_kl_loss(q, p.get("logits"), masked), p, fault);
    };
  } else {
    throw std::invalid_argument("unknown gradcheck module: " + name);
  }
  return c;
}

}  // namespace

const std::vector<std::string>& case_names() {
  static const std::vector<std::string> names{"snake_beta", "daam",      "gated_rel_pos_bias",
                                              "conformer_block", "cluster_head", "predictor",
                                              "encoder",    "jepa_loss", "cluster_kl_loss"};
  return names;
}

encoder::EncoderConfig micro_config() {
  encoder::EncoderConfig c;
  c.input_dim = 6;
  c.channels = {2, 4};
  c.dilations = {1, 2};
  c.n_conformer_layers = 1;
  c.latent_dim = 8;
  c.n_heads = 2;
  c.ffn_mult = 2;
  c.conv_kernel = 5;
  c.rel_pos_buckets = 8;
  c.rel_pos_max_distance = 16;
  c.daam_gaussians = 2;
  c.daam_heads = 2;
  c.agg_dim = 4;
  c.cluster_K = 4;
  c.head_hidden = 8;
  c.head_blocks = 1;
  return c;
}

CaseResult run_case(const std::string& name, bool inject_fault, std::uint64_t seed, const GradCheckOptions& opt) {
  const auto prev = t::precision();
  t::set_precision(t::Precision::F64);
  const auto t0 = std::chrono::steady_clock::now();
  CaseResult r;
  r.name = name;
  try {
    Case c = build(name, inject_fault, seed);
    r.report = grad_check(c.loss, c.params, opt);
  } catch (...) {
    t::set_precision(prev);
    throw;
  }
  t::set_precision(prev);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

std::vector<CaseResult> run_all(bool inject_fault, std::uint64_t seed, const GradCheckOptions& opt) {
  std::vector<CaseResult> out;
  for (const auto& n : case_names()) out.push_back(run_case(n, inject_fault, seed, opt));
  return out;
}

}  // namespace gmmjepa::gradsuite
