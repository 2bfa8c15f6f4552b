#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmmjepa/audio.hpp"
#include "gmmjepa/augment.hpp"
#include "gmmjepa/checkpoint.hpp"
#include "gmmjepa/clustering.hpp"
#include "gmmjepa/encoder.hpp"
#include "gmmjepa/masking.hpp"
#include "json.hpp"

namespace gmmjepa::trainer {

using tensor::Var;

struct TrainConfig {
  double lambda_start = 1.0;
  double lambda_end = 0.01;
  bool pure_jepa = false;      // lambda fixed at 0
  bool baseline_mode = false;  // one-hot k-means targets instead of GMM posteriors
  std::size_t T_max = 2000;
  double lr_min = 1e-5;
  double lr_peak = 1e-4;
  double warmup_fraction = 0.1;
  double weight_decay = 1e-3;
  double clip_norm = 1.0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t batch_size = 4;
  std::size_t max_frames = 0;  // random crop length per utterance; 0 keeps whole utterances
  double ema_tau = 0.996;
  std::size_t checkpoint_every = 0;  // 0 means max(1, T_max / 10)
  std::size_t max_consecutive_skips = 10;
  bool f32 = false;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t checkpoint_interval() const;
};

nlohmann::json to_json(const TrainConfig& c);
TrainConfig train_config_from_json(const nlohmann::json& j);

struct StepRecord {
  std::size_t step = 0;
  double l_jepa = 0.0;
  std::optional<double> l_cluster;  // empty when no targets are loaded
  double lambda = 0.0;
  double total = 0.0;
  double grad_norm = 0.0;
  double lr = 0.0;
  double wall_ms = 0.0;
  bool skipped = false;
};

nlohmann::json to_json(const StepRecord& r, bool with_wall = true);

// ------------------------------------------------------------------ losses

/// Mean over masked frames of the squared L2 distance. z: [T, C].
Var jepa_loss(const Var& z_pred, const Var& z_target, std::span<const std::size_t> masked);

/// Mean forward KL(q || softmax(logits)) over masked frames, in log space.
/// q rows must sum to 1 within 1e-6.
Var cluster_kl_loss(const cluster::PosteriorSeq& q, const Var& logits, std::span<const std::size_t> masked);

// -------------------------------------------------------------- schedules

/// Linear from lambda_start to lambda_end over [0, T_max]; out-of-range t is
/// clamped with a warning. Pure-JEPA mode returns 0.
double lambda_at(double t, const TrainConfig& cfg);
/// Linear warmup lr_min -> lr_peak over the first warmup_fraction of T_max,
/// then linear decay back to lr_min.
double lr_at(double t, const TrainConfig& cfg);

// -------------------------------------------------------------- optimizer

struct OptStepInfo {
  double grad_norm = 0.0;       // before clipping
  double clipped_norm = 0.0;    // after clipping
  bool skipped = false;
};

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Global-norm clip, then AdamW with decoupled decay applied before the
/// moment step. Parameters without a gradient count as zero-gradient.
/// Non-finite gradients skip the step; too many consecutive skips throw.
OptStepInfo optimizer_step(ParamStore& params, OptimizerState& state, double lr, const TrainConfig& cfg);

// ------------------------------------------------------------------- data

struct FeatureStats {
  std::vector<double> mean;
  std::vector<double> inv_std;
};

nlohmann::json to_json(const FeatureStats& s);
FeatureStats feature_stats_from_json(const nlohmann::json& j);

struct PreparedCorpus {
  std::vector<audio::Utterance> utts;
  std::vector<audio::MelFrameSeq> mel;  // clean log-mel per utterance
  audio::MelOptions mel_opt;
};

PreparedCorpus prepare_corpus(std::vector<audio::Utterance> utts, const audio::MelOptions& opt);
FeatureStats compute_feature_stats(const PreparedCorpus& c);
/// All clean log-mel frames stacked row-wise (input for fitting the targets).
cluster::Matrix stack_frames(const PreparedCorpus& c);

/// Per-utterance targets: GMM soft posteriors or one-hot k-means labels.
std::vector<cluster::PosteriorSeq> compute_targets(const cluster::TargetModel& model, const PreparedCorpus& c);

/// Normalized channels-first encoder input for frames [begin, begin+len).
Var encoder_input(const audio::MelFrameSeq& mel, const FeatureStats& s, std::size_t begin, std::size_t len);
/// Waveform input covering the same frames (len * hop samples from begin * hop).
Var encoder_wave_input(const audio::WaveBuffer& w, std::size_t hop, std::size_t begin, std::size_t len);

/// Encodes one whole clean utterance with the given parameters.
encoder::EncodeOutput encode_utterance(const ParamStore& p, const encoder::EncoderConfig& ecfg, const PreparedCorpus& c,
                                       const FeatureStats& stats, std::size_t index);

// ---------------------------------------------------------------- trainer

struct TrainerSetup {
  TrainConfig train;
  encoder::EncoderConfig encoder;
  augment::AugmentConfig augment;
  masking::MaskSpec mask;
};

class Trainer {
 public:
  /// `targets` may be null only in pure-JEPA mode.
  Trainer(TrainerSetup setup, const PreparedCorpus* corpus, const std::vector<cluster::PosteriorSeq>* targets);

  void init_fresh();
  void restore(const Checkpoint& ck);

  /// One training iteration on the next minibatch.
  StepRecord step();

  std::size_t steps_done() const { return t_; }
  const ParamStore& online() const { return online_; }
  const ParamStore& target() const { return target_; }
  const OptimizerState& optimizer() const { return opt_; }
  const FeatureStats& stats() const { return stats_; }
  const TrainerSetup& setup() const { return setup_; }

  nlohmann::json state_json() const;
  void save(const std::filesystem::path& path, const nlohmann::json& config) const;

 private:
  TrainerSetup setup_;
  const PreparedCorpus* corpus_;
  const std::vector<cluster::PosteriorSeq>* targets_;
  FeatureStats stats_;
  ParamStore online_;
  ParamStore target_;
  OptimizerState opt_;
  augment::AugmentorBuffer buffer_;
  std::size_t t_ = 0;
};

// ------------------------------------------------------------ full run

struct RunOptions {
  TrainerSetup setup;
  audio::MelOptions mel;
  std::filesystem::path out_dir;
  bool resume = false;
  nlohmann::json config_echo;  // resolved config stored in checkpoints
};

struct RunResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path metrics;
  std::vector<StepRecord> records;  // steps run in this invocation
};

/// Pretraining over a prepared corpus with the frozen targets already computed.
/// Writes metrics.jsonl and checkpoints (ckpt_<step>.bin, final.bin) to
/// out_dir. With resume=true, continues from the newest checkpoint there.
/// `stop_after` ends the invocation early (used to test resumption).
RunResult run_pretraining(const RunOptions& opt, const PreparedCorpus& corpus,
                          const std::vector<cluster::PosteriorSeq>* targets,
                          std::optional<std::size_t> stop_after = std::nullopt);

}  // namespace gmmjepa::trainer
