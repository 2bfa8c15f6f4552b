#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

#include "gmmjepa/audio.hpp"
#include "gmmjepa/augment.hpp"
#include "gmmjepa/clustering.hpp"
#include "gmmjepa/encoder.hpp"
#include "gmmjepa/masking.hpp"
#include "gmmjepa/trainer.hpp"
#include "json.hpp"

namespace gmmjepa {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct KmeansOptions {
  std::size_t K = 16;
  std::size_t iters = 20;
  std::uint64_t seed = 0;
};

struct AnalysisOptions {
  std::size_t max_utterances = 0;  // 0 = whole corpus
  std::size_t k_probe = 16;
  std::size_t probe_epochs = 200;
  double probe_l2 = 1e-4;
  double probe_lr = 0.5;
  std::size_t probe_seeds = 3;
  std::uint64_t seed = 0;
};

/// Every tunable of a run, grouped by section. Frame geometry lives in
/// `features` and is copied into the corpus spec.
struct RunConfig {
  audio::SynthCorpusSpec corpus;
  audio::MelOptions features;
  cluster::GmmFitOptions gmm;
  KmeansOptions kmeans;
  encoder::EncoderConfig encoder;
  augment::AugmentConfig augment;
  masking::MaskSpec mask;
  trainer::TrainConfig train;
  AnalysisOptions analysis;

  void validate() const;
  trainer::TrainerSetup trainer_setup() const { return {train, encoder, augment, mask}; }
};

nlohmann::json to_json(const RunConfig& c);
/// Strict: unknown sections or keys throw ConfigError. Missing keys keep
/// their defaults.
RunConfig run_config_from_json(const nlohmann::json& j);
/// Parses JSON with // and /* */ comments allowed.
RunConfig load_run_config(const std::filesystem::path& path);

/// Applies "section.key" = value overrides (values are JSON literals).
void apply_override(nlohmann::json& cfg, const std::string& dotted_key, const nlohmann::json& value);

/// Writes {"config": resolved, "overrides": {...}} as pretty JSON.
void write_config_snapshot(const std::filesystem::path& path, const RunConfig& c, const nlohmann::json& overrides);

}  // namespace gmmjepa
