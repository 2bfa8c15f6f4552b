#include "gmmjepa/augment.hpp"

#include <cmath>
#include <iostream>

namespace gmmjepa::augment {

void AugmentConfig::validate() const {
  auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob_ok(noise_prob) || !prob_ok(mix_prob)) throw std::invalid_argument("augment: probabilities must be in [0,1]");
  if (!(max_overlap > 0.0 && max_overlap <= 1.0)) throw std::invalid_argument("augment: max_overlap must be in (0,1]");
  if (snr_min_db > snr_max_db || mix_ratio_min_db > mix_ratio_max_db) {
    throw std::invalid_argument("augment: ranges must be ordered");
  }
  if (buffer_size == 0) throw std::invalid_argument("augment: buffer_size must be >= 1");
}

void AugmentorBuffer::push(std::size_t key, const WaveBuffer* wave) {
  if (capacity_ == 0) return;
  if (items_.size() == capacity_) items_.pop_front();
  items_.emplace_back(key, wave);
}

double energy(std::span<const double> x) {
  if (x.empty()) throw std::invalid_argument("energy: empty signal");
  double s = 0.0;
  for (double v : x) s += v * v;
  return s / static_cast<double>(x.size());
}

double energy(const WaveBuffer& x) { return energy(std::span<const double>(x.samples)); }

double noise_scale(double e_clean, double e_noise, double snr_db) {
  if (!(e_noise > 0.0)) throw std::invalid_argument("zero-energy noise source");
  return std::sqrt(e_clean / (std::pow(10.0, snr_db / 10.0) * e_noise));
}

double mix_scale(double e1, double e2, double ratio_db) {
  if (!(e2 > 0.0)) throw std::invalid_argument("zero-energy secondary region");
  return std::sqrt(e1 * std::pow(10.0, ratio_db / 10.0) / e2);
}

std::vector<double> fit_length(const WaveBuffer& n, std::size_t len) {
  if (n.samples.empty()) throw std::invalid_argument("fit_length: empty source");
  std::vector<double> out(len);
  for (std::size_t i = 0; i < len; ++i) out[i] = n.samples[i % n.samples.size()];
  return out;
}

WaveBuffer mix_noise(const WaveBuffer& clean, const WaveBuffer& noise, double snr_db) {
  const auto n = fit_length(noise, clean.size());
  const double alpha = noise_scale(energy(clean), energy(n), snr_db);
  WaveBuffer out = clean;
  for (std::size_t i = 0; i < out.samples.size(); ++i) out.samples[i] += alpha * n[i];
  return out;
}

WaveBuffer mix_utterance(const WaveBuffer& x1, const WaveBuffer& x2, double ratio_db, Rng& rng,
                         double max_overlap, MixRecord* record) {
  if (x1.size() < 2) throw std::invalid_argument("mix_utterance: primary needs at least 2 samples");
  if (x2.size() == 0) throw std::invalid_argument("mix_utterance: empty secondary");
  MixRecord rec;
  const auto cap = static_cast<std::size_t>(std::floor(max_overlap * static_cast<double>(x1.size())));
  const std::size_t max_len = std::max<std::size_t>(1, std::min(cap, x2.size()));
  const auto len = static_cast<std::size_t>(uniform_int(rng, 1, static_cast<std::int64_t>(max_len)));
  rec.length = len;
  rec.start_primary = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(x1.size() - len)));
  std::span<const double> r2;
  for (int attempt = 0; attempt <= 8; ++attempt) {
    rec.start_secondary = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(x2.size() - len)));
    r2 = std::span<const double>(x2.samples).subspan(rec.start_secondary, len);
    if (energy(r2) > 0.0) break;
    rec.resamples = attempt + 1;
    r2 = {};
  }
  WaveBuffer out = x1;
  if (r2.empty()) {
    std::cerr << "augment: zero-energy secondary region after 8 resamples, skipping mix\n";
    if (record) *record = rec;
    return out;
  }
  const auto r1 = std::span<const double>(x1.samples).subspan(rec.start_primary, len);
  rec.beta = mix_scale(energy(r1), energy(r2), ratio_db);
  for (std::size_t i = 0; i < len; ++i) out.samples[rec.start_primary + i] = r1[i] + rec.beta * r2[i];
  rec.applied = true;
  if (record) *record = rec;
  return out;
}

AugmentedPair augment_pair(const WaveBuffer& x, std::size_t key, AugmentorBuffer& buffer,
                           const AugmentConfig& cfg, Rng& rng) {
  AugmentedPair out;
  out.clean = &x;
  out.aug = x;
  // Every draw happens regardless of outcome so later draws keep their
  // positions in the stream.
  const double u_noise = uniform(rng, 0.0, 1.0);
  const double u_mix = uniform(rng, 0.0, 1.0);
  const double snr = uniform(rng, cfg.snr_min_db, cfg.snr_max_db);
  const double ratio = uniform(rng, cfg.mix_ratio_min_db, cfg.mix_ratio_max_db);
  const double pick_noise = uniform(rng, 0.0, 1.0);
  const double pick_mix = uniform(rng, 0.0, 1.0);
  Rng mix_rng(rng());

  auto pick = [&](double u) { return std::min(buffer.size() - 1, static_cast<std::size_t>(u * buffer.size())); };

  if (!buffer.empty() && u_noise < cfg.noise_prob) {
    const std::size_t i = pick(pick_noise);
    const WaveBuffer& src = buffer.at(i);
    if (energy(src) > 0.0) {
      out.aug = mix_noise(out.aug, src, snr);
      out.record.noise = true;
      out.record.snr_db = snr;
      out.record.noise_source = buffer.key(i);
    }
  }
  if (!buffer.empty() && u_mix < cfg.mix_prob && x.size() >= 2) {
    const std::size_t i = pick(pick_mix);
    out.aug = mix_utterance(out.aug, buffer.at(i), ratio, mix_rng, cfg.max_overlap, &out.record.mix_detail);
    out.record.mix = out.record.mix_detail.applied;
    out.record.ratio_db = ratio;
    out.record.mix_source = buffer.key(i);
  }
  buffer.push(key, &x);
  return out;
}

}  // namespace gmmjepa::augment
