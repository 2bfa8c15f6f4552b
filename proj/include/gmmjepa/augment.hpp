#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>
#include <stdexcept>
#include <utility>

#include "gmmjepa/audio.hpp"
#include "gmmjepa/rng.hpp"

namespace gmmjepa::augment {

using audio::WaveBuffer;

struct AugmentConfig {
  double snr_min_db = -5.0;
  double snr_max_db = 20.0;
  double mix_ratio_min_db = -5.0;
  double mix_ratio_max_db = 5.0;
  double noise_prob = 0.25;
  double mix_prob = 0.25;
  double max_overlap = 0.5;
  std::size_t buffer_size = 64;
  std::uint64_t seed = 0;

  void validate() const;
};

/// Recent utterances used as noise and mixing sources; oldest evicted first.
/// Entries carry the caller's utterance key so the buffer can be checkpointed
/// as a list of corpus indices.
class AugmentorBuffer {
 public:
  explicit AugmentorBuffer(std::size_t capacity = 64) : capacity_(capacity) {}

  void push(std::size_t key, const WaveBuffer* wave);
  std::size_t size() const { return items_.size(); }
  bool empty() const { return items_.empty(); }
  std::size_t capacity() const { return capacity_; }
  const WaveBuffer& at(std::size_t i) const { return *items_.at(i).second; }
  std::size_t key(std::size_t i) const { return items_.at(i).first; }

 private:
  std::size_t capacity_;
  std::deque<std::pair<std::size_t, const WaveBuffer*>> items_;
};

double energy(const WaveBuffer& x);
double energy(std::span<const double> x);

/// Scale applied to the noise so the mix hits `snr_db`.
double noise_scale(double e_clean, double e_noise, double snr_db);
/// Scale applied to the secondary segment for an energy ratio of `ratio_db`.
double mix_scale(double e1, double e2, double ratio_db);

/// Cropped or tiled copy of `n` with exactly `len` samples.
std::vector<double> fit_length(const WaveBuffer& n, std::size_t len);

WaveBuffer mix_noise(const WaveBuffer& clean, const WaveBuffer& noise, double snr_db);

struct MixRecord {
  bool applied = false;
  std::size_t length = 0;
  std::size_t start_primary = 0;
  std::size_t start_secondary = 0;
  double beta = 0.0;
  int resamples = 0;
};

/// Adds a scaled region of x2 into a region of x1 no longer than
/// max_overlap * |x1|. Samples outside the region are untouched.
WaveBuffer mix_utterance(const WaveBuffer& x1, const WaveBuffer& x2, double ratio_db, Rng& rng,
                         double max_overlap = 0.5, MixRecord* record = nullptr);

struct AugmentRecord {
  bool noise = false;
  bool mix = false;
  double snr_db = 0.0;
  double ratio_db = 0.0;
  std::size_t noise_source = 0;  // buffer key
  std::size_t mix_source = 0;
  MixRecord mix_detail;
};

struct AugmentedPair {
  WaveBuffer aug;
  const WaveBuffer* clean = nullptr;  // the untouched input
  AugmentRecord record;
};

/// Noise and utterance mixing fire independently with their probabilities.
/// The buffer ingests `x` after augmentation, so an utterance never mixes with
/// itself.
AugmentedPair augment_pair(const WaveBuffer& x, std::size_t key, AugmentorBuffer& buffer,
                           const AugmentConfig& cfg, Rng& rng);

}  // namespace gmmjepa::augment
