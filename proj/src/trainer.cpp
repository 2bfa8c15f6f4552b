#include "gmmjepa/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <iostream>
#include <regex>
#include <sstream>

#include "gmmjepa/rng.hpp"

namespace gmmjepa::trainer {

namespace t = gmmjepa::tensor;
using t::DenseArray;

namespace {

// Stream tags for derive_seed.
enum : std::uint64_t { kTagBatch = 0xB0, kTagAug = 0xA0, kTagMask = 0x30, kTagCrop = 0xC0, kTagInit = 0x10 };

void warn(const std::string& m) { std::cerr << "warning: " << m << "\n"; }

}  // namespace

void TrainConfig::validate() const {
  auto bad = [](const std::string& m) { throw std::invalid_argument("train config: " + m); };
  if (!(lambda_end >= 0.0 && lambda_end <= lambda_start)) bad("need 0 <= lambda_end <= lambda_start");
  if (!(lr_min >= 0.0 && lr_peak >= 0.0)) bad("learning rates must be non-negative");
  if (!(warmup_fraction >= 0.0 && warmup_fraction <= 1.0)) bad("warmup_fraction must be in [0,1]");
  if (weight_decay < 0.0) bad("weight_decay must be non-negative");
  if (!(clip_norm > 0.0)) bad("clip_norm must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) bad("betas must be in [0,1)");
  if (!(adam_eps > 0.0)) bad("adam_eps must be positive");
  if (batch_size == 0) bad("batch_size must be >= 1");
  if (!(ema_tau >= 0.0 && ema_tau <= 1.0)) bad("ema_tau must be in [0,1]");
  if (max_consecutive_skips == 0) bad("max_consecutive_skips must be >= 1");
  if (pure_jepa && baseline_mode) bad("pure_jepa and baseline_mode are exclusive");
}

std::size_t TrainConfig::checkpoint_interval() const {
  if (checkpoint_every > 0) return checkpoint_every;
  return std::max<std::size_t>(1, T_max / 10);
}

nlohmann::json to_json(const TrainConfig& c) {
  return {{"lambda_start", c.lambda_start},
          {"lambda_end", c.lambda_end},
          {"pure_jepa", c.pure_jepa},
          {"baseline_mode", c.baseline_mode},
          {"T_max", c.T_max},
          {"lr_min", c.lr_min},
          {"lr_peak", c.lr_peak},
          {"warmup_fraction", c.warmup_fraction},
          {"weight_decay", c.weight_decay},
          {"clip_norm", c.clip_norm},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"adam_eps", c.adam_eps},
          {"batch_size", c.batch_size},
          {"max_frames", c.max_frames},
          {"ema_tau", c.ema_tau},
          {"checkpoint_every", c.checkpoint_every},
          {"max_consecutive_skips", c.max_consecutive_skips},
          {"f32", c.f32},
          {"seed", c.seed}};
}

TrainConfig train_config_from_json(const nlohmann::json& j) {
  TrainConfig c;
  const auto known = to_json(c);
  for (const auto& [k, _] : j.items()) {
    if (!known.contains(k)) throw std::invalid_argument("train config: unknown key '" + k + "'");
  }
  auto get = [&](const char* k, auto& dst) {
    if (j.contains(k)) j.at(k).get_to(dst);
  };
  get("lambda_start", c.lambda_start);
  get("lambda_end", c.lambda_end);
  get("pure_jepa", c.pure_jepa);
  get("baseline_mode", c.baseline_mode);
  get("T_max", c.T_max);
  get("lr_min", c.lr_min);
  get("lr_peak", c.lr_peak);
  get("warmup_fraction", c.warmup_fraction);
  get("weight_decay", c.weight_decay);
  get("clip_norm", c.clip_norm);
  get("beta1", c.beta1);
  get("beta2", c.beta2);
  get("adam_eps", c.adam_eps);
  get("batch_size", c.batch_size);
  get("max_frames", c.max_frames);
  get("ema_tau", c.ema_tau);
  get("checkpoint_every", c.checkpoint_every);
  get("max_consecutive_skips", c.max_consecutive_skips);
  get("f32", c.f32);
  get("seed", c.seed);
  c.validate();
  return c;
}

nlohmann::json to_json(const StepRecord& r, bool with_wall) {
  nlohmann::json j{{"step", r.step},
                   {"L_JEPA", r.l_jepa},
                   {"L_cluster", r.l_cluster ? nlohmann::json(*r.l_cluster) : nlohmann::json(nullptr)},
                   {"lambda", r.lambda},
                   {"total", r.total},
                   {"grad_norm", r.grad_norm},
                   {"lr", r.lr},
                   {"skipped", r.skipped}};
  if (with_wall) j["wall_ms"] = r.wall_ms;
  return j;
}

// ------------------------------------------------------------------ losses

Var jepa_loss(const Var& z_pred, const Var& z_target, std::span<const std::size_t> masked) {
  if (masked.empty()) throw std::invalid_argument("jepa_loss: empty mask");
  if (z_pred->shape() != z_target->shape()) {
    throw std::invalid_argument("jepa_loss: shape mismatch " + t::shape_str(z_pred->shape()) + " vs " +
                                t::shape_str(z_target->shape()));
  }
  Var d = t::sub(t::index_select(z_pred, masked), t::index_select(z_target, masked));
  return t::div_scalar(t::sum_all(t::square(d)), static_cast<double>(masked.size()));
}

Var cluster_kl_loss(const cluster::PosteriorSeq& q, const Var& logits, std::span<const std::size_t> masked) {
  if (masked.empty()) throw std::invalid_argument("cluster_kl_loss: empty mask");
  const auto& s = logits->shape();
  if (s.size() != 2 || s[0] != q.rows || s[1] != q.K) {
    throw std::invalid_argument("cluster_kl_loss: frame/cluster mismatch, posteriors " + std::to_string(q.rows) + "x" +
                                std::to_string(q.K) + " vs logits " + t::shape_str(s));
  }
  const std::size_t K = q.K;
  DenseArray qm({masked.size(), K});
  double neg_entropy = 0.0;
  for (std::size_t i = 0; i < masked.size(); ++i) {
    const std::size_t r = masked[i];
    if (r >= q.rows) throw std::out_of_range("cluster_kl_loss: masked frame outside sequence");
    double row_sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double v = q.q[r * K + k];
      qm.at(i, k) = v;
      row_sum += v;
      if (v > 0.0) neg_entropy += v * q.log_q[r * K + k];
    }
    if (std::abs(row_sum - 1.0) > 1e-6) {
      throw std::invalid_argument("cluster_kl_loss: posterior row " + std::to_string(r) + " sums to " +
                                  std::to_string(row_sum));
    }
  }
  Var lp = t::log_softmax(t::index_select(logits, masked), 1);
  Var cross = t::sum_all(t::mul(lp, t::constant(std::move(qm))));
  return t::div_scalar(t::add_scalar(t::neg(cross), neg_entropy), static_cast<double>(masked.size()));
}

// -------------------------------------------------------------- schedules

double lambda_at(double step, const TrainConfig& cfg) {
  if (cfg.pure_jepa) return 0.0;
  const double T = static_cast<double>(cfg.T_max);
  if (step < 0.0 || step > T) {
    warn("lambda_at: step " + std::to_string(step) + " outside [0, " + std::to_string(cfg.T_max) + "], clamping");
    step = std::clamp(step, 0.0, T);
  }
  if (step == 0.0) return cfg.lambda_start;
  if (step == T) return cfg.lambda_end;
  return cfg.lambda_start + (cfg.lambda_end - cfg.lambda_start) * step / T;
}

double lr_at(double step, const TrainConfig& cfg) {
  const double T = static_cast<double>(cfg.T_max);
  if (T <= 0.0) return cfg.lr_min;
  step = std::clamp(step, 0.0, T);
  const double W = cfg.warmup_fraction * T;
  if (step < W) return cfg.lr_min + (cfg.lr_peak - cfg.lr_min) * step / W;
  if (T <= W) return cfg.lr_peak;
  return cfg.lr_peak + (cfg.lr_min - cfg.lr_peak) * (step - W) / (T - W);
}

// -------------------------------------------------------------- optimizer

OptStepInfo optimizer_step(ParamStore& params, OptimizerState& state, double lr, const TrainConfig& cfg) {
  if (state.m.size() != params.size() || state.v.size() != params.size()) {
    throw std::invalid_argument("optimizer_step: state does not match parameters");
  }
  OptStepInfo info;
  double sq = 0.0;
  bool finite = true;
  for (const auto& [_, v] : params.items()) {
    if (!v->has_grad()) continue;
    for (double g : v->grad.data()) {
      if (!std::isfinite(g)) finite = false;
      sq += g * g;
    }
  }
  info.grad_norm = std::sqrt(sq);
  if (!finite || !std::isfinite(info.grad_norm)) {
    info.skipped = true;
    ++state.consecutive_skips;
    ++state.skipped_total;
    warn("non-finite gradient, skipping step (" + std::to_string(state.consecutive_skips) + " consecutive)");
    if (state.consecutive_skips >= cfg.max_consecutive_skips) {
      throw TrainingAborted("aborting: " + std::to_string(state.consecutive_skips) +
                            " consecutive steps with non-finite gradients");
    }
    return info;
  }
  state.consecutive_skips = 0;
  const double scale = info.grad_norm > cfg.clip_norm ? cfg.clip_norm / info.grad_norm : 1.0;

  ++state.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  const double decay = 1.0 - lr * cfg.weight_decay;
  double post_sq = 0.0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Var& p = params.items()[i].second;
    auto theta = p->value.data();
    auto m = state.m[i].data();
    auto v = state.v[i].data();
    const bool has = p->has_grad();
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double g = has ? p->grad[j] * scale : 0.0;
      post_sq += g * g;
      theta[j] = theta[j] * decay;
      m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g;
      v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g * g;
      theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.adam_eps);
    }
    t::round_to_precision(p->value);
    t::round_to_precision(state.m[i]);
    t::round_to_precision(state.v[i]);
  }
  info.clipped_norm = std::sqrt(post_sq);
  return info;
}

// ------------------------------------------------------------------- data

nlohmann::json to_json(const FeatureStats& s) { return {{"mean", s.mean}, {"inv_std", s.inv_std}}; }

FeatureStats feature_stats_from_json(const nlohmann::json& j) {
  FeatureStats s;
  j.at("mean").get_to(s.mean);
  j.at("inv_std").get_to(s.inv_std);
  if (s.mean.size() != s.inv_std.size()) throw std::invalid_argument("feature stats: size mismatch");
  return s;
}

PreparedCorpus prepare_corpus(std::vector<audio::Utterance> utts, const audio::MelOptions& opt) {
  PreparedCorpus c;
  c.mel_opt = opt;
  audio::MelExtractor ex(opt);
  c.mel.reserve(utts.size());
  for (const auto& u : utts) c.mel.push_back(ex(u.wave));
  c.utts = std::move(utts);
  return c;
}

FeatureStats compute_feature_stats(const PreparedCorpus& c) {
  const std::size_t D = c.mel_opt.n_mels;
  std::vector<double> sum(D, 0.0), sq(D, 0.0);
  std::size_t n = 0;
  for (const auto& m : c.mel) {
    for (std::size_t tt = 0; tt < m.n_frames; ++tt) {
      for (std::size_t d = 0; d < D; ++d) sum[d] += m.at(tt, d);
    }
    n += m.n_frames;
  }
  if (n == 0) throw std::invalid_argument("feature stats: corpus has no frames");
  FeatureStats s;
  s.mean.resize(D);
  s.inv_std.resize(D);
  for (std::size_t d = 0; d < D; ++d) s.mean[d] = sum[d] / static_cast<double>(n);
  for (const auto& m : c.mel) {
    for (std::size_t tt = 0; tt < m.n_frames; ++tt) {
      for (std::size_t d = 0; d < D; ++d) {
        const double x = m.at(tt, d) - s.mean[d];
        sq[d] += x * x;
      }
    }
  }
  for (std::size_t d = 0; d < D; ++d) s.inv_std[d] = 1.0 / std::max(std::sqrt(sq[d] / static_cast<double>(n)), 1e-8);
  return s;
}

cluster::Matrix stack_frames(const PreparedCorpus& c) {
  std::size_t n = 0;
  for (const auto& m : c.mel) n += m.n_frames;
  cluster::Matrix X(n, c.mel_opt.n_mels);
  std::size_t r = 0;
  for (const auto& m : c.mel) {
    std::copy(m.frames.begin(), m.frames.end(), X.data.begin() + static_cast<std::ptrdiff_t>(r * X.cols));
    r += m.n_frames;
  }
  return X;
}

namespace {

cluster::Matrix utterance_matrix(const audio::MelFrameSeq& m) {
  cluster::Matrix X(m.n_frames, m.n_mels);
  X.data = m.frames;
  return X;
}

cluster::PosteriorSeq slice_rows(const cluster::PosteriorSeq& q, std::size_t begin, std::size_t len) {
  if (begin == 0 && len == q.rows) return q;
  cluster::PosteriorSeq out;
  out.rows = len;
  out.K = q.K;
  out.q.assign(q.q.begin() + static_cast<std::ptrdiff_t>(begin * q.K),
               q.q.begin() + static_cast<std::ptrdiff_t>((begin + len) * q.K));
  out.log_q.assign(q.log_q.begin() + static_cast<std::ptrdiff_t>(begin * q.K),
                   q.log_q.begin() + static_cast<std::ptrdiff_t>((begin + len) * q.K));
  return out;
}

}  // namespace

std::vector<cluster::PosteriorSeq> compute_targets(const cluster::TargetModel& model, const PreparedCorpus& c) {
  std::vector<cluster::PosteriorSeq> out;
  out.reserve(c.mel.size());
  for (const auto& m : c.mel) {
    const auto X = utterance_matrix(m);
    if (const auto* g = std::get_if<cluster::GmmModel>(&model)) {
      if (g->D() != m.n_mels) throw std::invalid_argument("compute_targets: GMM dimension does not match features");
      out.push_back(cluster::chunked_soft_assign(*g, X, 256, g->K()));
    } else {
      const auto& km = std::get<cluster::KmeansModel>(model);
      if (km.D != m.n_mels) throw std::invalid_argument("compute_targets: k-means dimension does not match features");
      const auto ids = cluster::hard_labels(km, X);
      out.push_back(cluster::one_hot_posteriors(ids, km.K));
    }
  }
  return out;
}

Var encoder_input(const audio::MelFrameSeq& mel, const FeatureStats& s, std::size_t begin, std::size_t len) {
  if (begin + len > mel.n_frames) throw std::out_of_range("encoder_input: frame range outside sequence");
  if (s.mean.size() != mel.n_mels) throw std::invalid_argument("encoder_input: feature stats do not match n_mels");
  DenseArray a({mel.n_mels, len});
  for (std::size_t tt = 0; tt < len; ++tt) {
    for (std::size_t d = 0; d < mel.n_mels; ++d) a.at(d, tt) = (mel.at(begin + tt, d) - s.mean[d]) * s.inv_std[d];
  }
  t::round_to_precision(a);
  return t::constant(std::move(a));
}

Var encoder_wave_input(const audio::WaveBuffer& w, std::size_t hop, std::size_t begin, std::size_t len) {
  const std::size_t a = begin * hop;
  const std::size_t b = (begin + len) * hop;
  if (b > w.samples.size()) throw std::out_of_range("encoder_wave_input: sample range outside waveform");
  DenseArray x({1, b - a}, std::vector<double>(w.samples.begin() + static_cast<std::ptrdiff_t>(a),
                                                w.samples.begin() + static_cast<std::ptrdiff_t>(b)));
  t::round_to_precision(x);
  return t::constant(std::move(x));
}

encoder::EncodeOutput encode_utterance(const ParamStore& p, const encoder::EncoderConfig& ecfg, const PreparedCorpus& c,
                                       const FeatureStats& stats, std::size_t index) {
  const auto& mel = c.mel.at(index);
  Var in = ecfg.frontend == encoder::Frontend::Mel
               ? encoder_input(mel, stats, 0, mel.n_frames)
               : encoder_wave_input(c.utts.at(index).wave, c.mel_opt.frame_hop, 0, mel.n_frames);
  auto out = encoder::encode(p, in, ecfg);
  if (out.z->shape()[0] != mel.n_frames) {
    throw std::runtime_error("encoder produced " + std::to_string(out.z->shape()[0]) + " frames for " +
                             std::to_string(mel.n_frames) + " feature frames");
  }
  return out;
}

// ---------------------------------------------------------------- trainer

Trainer::Trainer(TrainerSetup setup, const PreparedCorpus* corpus, const std::vector<cluster::PosteriorSeq>* targets)
    : setup_(std::move(setup)), corpus_(corpus), targets_(targets), buffer_(setup_.augment.buffer_size) {
  setup_.train.validate();
  setup_.encoder.validate();
  setup_.augment.validate();
  setup_.mask.validate();
  if (!corpus_ || corpus_->utts.empty()) throw std::invalid_argument("trainer: empty corpus");
  if (!setup_.train.pure_jepa && !targets_) throw std::invalid_argument("trainer: targets required unless pure_jepa");
  if (targets_ && targets_->size() != corpus_->utts.size()) {
    throw std::invalid_argument("trainer: one target sequence per utterance required");
  }
  if (targets_) {
    for (std::size_t i = 0; i < targets_->size(); ++i) {
      if ((*targets_)[i].rows != corpus_->mel[i].n_frames) {
        throw std::invalid_argument("trainer: target frames do not match features for utterance " + std::to_string(i));
      }
      if ((*targets_)[i].K != setup_.encoder.cluster_K) {
        throw std::invalid_argument("trainer: target K does not match encoder cluster_K");
      }
    }
  }
  const auto& ecfg = setup_.encoder;
  if (ecfg.frontend == encoder::Frontend::Mel && ecfg.input_dim != corpus_->mel_opt.n_mels) {
    throw std::invalid_argument("trainer: encoder input_dim must equal n_mels");
  }
  if (ecfg.frontend == encoder::Frontend::Waveform && ecfg.total_stride() != corpus_->mel_opt.frame_hop) {
    throw std::invalid_argument("trainer: waveform total stride must equal the feature hop");
  }
}

void Trainer::init_fresh() {
  t::set_precision(setup_.train.f32 ? t::Precision::F32 : t::Precision::F64);
  online_ = ParamStore(setup_.train.seed);
  encoder::init_params(online_, setup_.encoder, derive_seed(setup_.train.seed, {kTagInit}));
  target_ = online_.frozen_copy(encoder::kEncoderPrefix);
  opt_ = OptimizerState::zeros_like(online_);
  stats_ = compute_feature_stats(*corpus_);
  buffer_ = augment::AugmentorBuffer(setup_.augment.buffer_size);
  t_ = 0;
}

nlohmann::json Trainer::state_json() const {
  std::vector<std::size_t> keys;
  for (std::size_t i = 0; i < buffer_.size(); ++i) keys.push_back(buffer_.key(i));
  return {{"step", t_}, {"buffer", keys}, {"feature_stats", to_json(stats_)}};
}

void Trainer::restore(const Checkpoint& ck) {
  t::set_precision(setup_.train.f32 ? t::Precision::F32 : t::Precision::F64);
  online_ = ParamStore(setup_.train.seed);
  for (const auto& [name, v] : ck.online.items()) online_.add(name, v->value);
  ParamStore fresh(setup_.train.seed);
  encoder::init_params(fresh, setup_.encoder, 0);
  if (fresh.size() != online_.size()) throw std::invalid_argument("restore: checkpoint does not match encoder config");
  for (std::size_t i = 0; i < fresh.size(); ++i) {
    const auto& [n, v] = fresh.items()[i];
    if (online_.items()[i].first != n || online_.items()[i].second->shape() != v->shape()) {
      throw std::invalid_argument("restore: parameter " + n + " does not match encoder config");
    }
  }
  target_ = ck.target.frozen_copy();
  opt_ = ck.opt;
  t_ = ck.state.at("step").get<std::size_t>();
  stats_ = feature_stats_from_json(ck.state.at("feature_stats"));
  buffer_ = augment::AugmentorBuffer(setup_.augment.buffer_size);
  for (auto k : ck.state.at("buffer")) {
    const auto key = k.get<std::size_t>();
    if (key >= corpus_->utts.size()) throw std::invalid_argument("restore: buffer key outside corpus");
    buffer_.push(key, &corpus_->utts[key].wave);
  }
}

void Trainer::save(const std::filesystem::path& path, const nlohmann::json& config) const {
  save_checkpoint(path, config, state_json(), online_, target_, opt_);
}

StepRecord Trainer::step() {
  const auto t0 = std::chrono::steady_clock::now();
  const TrainConfig& tc = setup_.train;
  const auto& ecfg = setup_.encoder;
  const std::size_t s = t_ + 1;
  StepRecord rec;
  rec.step = s;
  rec.lambda = lambda_at(static_cast<double>(s), tc);
  rec.lr = lr_at(static_cast<double>(s), tc);

  const std::size_t N = corpus_->utts.size();
  Rng batch_rng = make_rng(tc.seed, {kTagBatch, s});
  std::vector<std::size_t> batch(tc.batch_size);
  for (auto& b : batch) b = static_cast<std::size_t>(uniform_int(batch_rng, 0, static_cast<std::int64_t>(N - 1)));

  audio::MelExtractor mel_ex(corpus_->mel_opt);
  online_.zero_grad();
  const Var& table = online_.get(encoder::kRelPosTable);
  const Var& token = online_.get(encoder::kMaskToken);

  struct Part {
    Var jl, kl;
    std::size_t n;
  };
  std::vector<Part> parts;
  std::size_t n_total = 0;
  bool forward_failed = false;
  try {
    for (std::size_t bi = 0; bi < batch.size(); ++bi) {
      const std::size_t idx = batch[bi];
      const auto& utt = corpus_->utts[idx];
      const auto& mel = corpus_->mel[idx];

      Rng aug_rng = make_rng(tc.seed, {kTagAug, s, bi});
      auto pair = augment::augment_pair(utt.wave, idx, buffer_, setup_.augment, aug_rng);

      const std::size_t T_full = mel.n_frames;
      const std::size_t len = tc.max_frames > 0 ? std::min(tc.max_frames, T_full) : T_full;
      Rng crop_rng = make_rng(tc.seed, {kTagCrop, s, bi});
      const auto begin = static_cast<std::size_t>(uniform_int(crop_rng, 0, static_cast<std::int64_t>(T_full - len)));

      Var in_aug, in_clean;
      if (ecfg.frontend == encoder::Frontend::Mel) {
        const auto mel_aug = mel_ex(pair.aug);
        in_aug = encoder_input(mel_aug, stats_, begin, len);
        in_clean = encoder_input(mel, stats_, begin, len);
      } else {
        in_aug = encoder_wave_input(pair.aug, corpus_->mel_opt.frame_hop, begin, len);
        in_clean = encoder_wave_input(utt.wave, corpus_->mel_opt.frame_hop, begin, len);
      }

      auto online_out = encoder::encode(online_, in_aug, ecfg);
      auto target_out = encoder::encode(target_, in_clean, ecfg);
      if (online_out.z->shape()[0] != len || target_out.z->shape()[0] != len) {
        throw std::logic_error("frame alignment: encoder produced " + std::to_string(online_out.z->shape()[0]) +
                               " frames, targets have " + std::to_string(len));
      }

      Rng mask_rng = make_rng(tc.seed, {kTagMask, s, bi});
      const auto mask = masking::sample_block_mask(len, setup_.mask, mask_rng);
      Var z_tilde = masking::apply_mask(online_out.z, mask, token);
      Var z_pred = encoder::predictor(online_, z_tilde, table, ecfg);

      Part part;
      part.n = mask.masked.size();
      part.jl = jepa_loss(z_pred, target_out.z, mask.masked);
      if (targets_) {
        const auto q = slice_rows((*targets_)[idx], begin, len);
        if (q.rows != online_out.z->shape()[0]) {
          throw std::logic_error("frame alignment: posteriors have " + std::to_string(q.rows) + " frames");
        }
        Var logits = encoder::cluster_head(online_, online_out.z, ecfg);
        part.kl = cluster_kl_loss(q, logits, mask.masked);
      }
      n_total += part.n;
      parts.push_back(std::move(part));
    }
  } catch (const t::TensorError& e) {
    warn(std::string("forward pass failed: ") + e.what());
    forward_failed = true;
  }

  if (!forward_failed) {
    Var jl, kl;
    for (const auto& p : parts) {
      const double w = static_cast<double>(p.n) / static_cast<double>(n_total);
      Var a = t::mul_scalar(p.jl, w);
      jl = jl ? t::add(jl, a) : a;
      if (p.kl) {
        Var b = t::mul_scalar(p.kl, w);
        kl = kl ? t::add(kl, b) : b;
      }
    }
    rec.l_jepa = jl->value.item();
    if (kl) rec.l_cluster = kl->value.item();
    rec.total = rec.l_jepa + rec.lambda * rec.l_cluster.value_or(0.0);
    Var loss = (kl && rec.lambda != 0.0) ? t::add(jl, t::mul_scalar(kl, rec.lambda)) : jl;
    try {
      t::backward(loss);
    } catch (const t::TensorError& e) {
      warn(std::string("backward pass failed: ") + e.what());
      forward_failed = true;
    }
  }
  for (const auto& [name, v] : target_.items()) {
    if (v->has_grad() || v->requires_grad) throw std::logic_error("gradient reached target parameter " + name);
  }

  if (forward_failed) {
    rec.skipped = true;
    ++opt_.consecutive_skips;
    ++opt_.skipped_total;
    if (opt_.consecutive_skips >= tc.max_consecutive_skips) {
      throw TrainingAborted("aborting: " + std::to_string(opt_.consecutive_skips) + " consecutive failed steps");
    }
    t_ = s;
    rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return rec;
  }
  const auto info = optimizer_step(online_, opt_, rec.lr, tc);
  rec.grad_norm = info.grad_norm;
  rec.skipped = info.skipped;
  if (!info.skipped) encoder::ema_update(online_, target_, tc.ema_tau);
  t_ = s;
  rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
  return rec;
}

// ------------------------------------------------------------ full run

namespace {

std::optional<std::pair<std::size_t, std::filesystem::path>> newest_checkpoint(const std::filesystem::path& dir) {
  std::optional<std::pair<std::size_t, std::filesystem::path>> best;
  if (!std::filesystem::exists(dir)) return best;
  static const std::regex re("ckpt_(\\d+)\\.bin");
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    std::smatch m;
    const std::string name = e.path().filename().string();
    if (std::regex_match(name, m, re)) {
      const auto step = static_cast<std::size_t>(std::stoull(m[1].str()));
      if (!best || step > best->first) best = {step, e.path()};
    }
  }
  return best;
}

std::filesystem::path ckpt_path(const std::filesystem::path& dir, std::size_t step) {
  std::ostringstream os;
  os << "ckpt_" << std::setw(7) << std::setfill('0') << step << ".bin";
  return dir / os.str();
}

}  // namespace

RunResult run_pretraining(const RunOptions& opt, const PreparedCorpus& corpus,
                          const std::vector<cluster::PosteriorSeq>* targets, std::optional<std::size_t> stop_after) {
  std::filesystem::create_directories(opt.out_dir);
  RunResult res;
  res.metrics = opt.out_dir / "metrics.jsonl";
  res.final_checkpoint = opt.out_dir / "final.bin";
  const auto& tc = opt.setup.train;

  Trainer trainer(opt.setup, &corpus, targets);
  std::vector<std::string> kept_lines;
  if (opt.resume) {
    const auto newest = newest_checkpoint(opt.out_dir);
    if (!newest) throw std::runtime_error("resume requested but no checkpoint found in " + opt.out_dir.string());
    trainer.restore(load_checkpoint(newest->second));
    std::cerr << "resuming from " << newest->second.string() << " at step " << trainer.steps_done() << "\n";
    std::ifstream in(res.metrics);
    std::string line;
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      if (nlohmann::json::parse(line).at("step").get<std::size_t>() <= trainer.steps_done()) kept_lines.push_back(line);
    }
  } else {
    trainer.init_fresh();
  }

  {
    std::ofstream out(res.metrics, std::ios::trunc);
    for (const auto& l : kept_lines) out << l << "\n";
  }
  std::ofstream metrics(res.metrics, std::ios::app);
  if (!metrics) throw std::runtime_error("cannot open " + res.metrics.string());

  if (trainer.steps_done() == 0 && tc.T_max == 0) {
    trainer.save(res.final_checkpoint, opt.config_echo);
    return res;
  }
  if (trainer.steps_done() == 0) trainer.save(ckpt_path(opt.out_dir, 0), opt.config_echo);

  const std::size_t every = tc.checkpoint_interval();
  std::size_t ran = 0;
  while (trainer.steps_done() < tc.T_max) {
    if (stop_after && ran >= *stop_after) return res;
    auto rec = trainer.step();
    ++ran;
    metrics << to_json(rec).dump() << "\n";
    metrics.flush();
    res.records.push_back(rec);
    const std::size_t s = trainer.steps_done();
    if (s % every == 0 || s == tc.T_max) trainer.save(ckpt_path(opt.out_dir, s), opt.config_echo);
    if (s == 1 || s % std::max<std::size_t>(1, tc.T_max / 20) == 0) {
      std::cerr << "step " << s << "/" << tc.T_max << " L_JEPA=" << rec.l_jepa
                << " L_cluster=" << (rec.l_cluster ? std::to_string(*rec.l_cluster) : std::string("-"))
                << " lambda=" << rec.lambda << " lr=" << rec.lr << "\n";
    }
  }
  trainer.save(res.final_checkpoint, opt.config_echo);
  return res;
}

}  // namespace gmmjepa::trainer
