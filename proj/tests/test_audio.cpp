#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <numbers>

#include "gmmjepa/audio.hpp"
#include "gmmjepa/rng.hpp"

using namespace gmmjepa;
using namespace gmmjepa::audio;
namespace fs = std::filesystem;

namespace {

fs::path tmpdir(const std::string& name) {
  auto p = fs::temp_directory_path() / ("gmmjepa_audio_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// Naive DFT power spectrum of a Hann-windowed, zero-padded frame.
std::vector<double> naive_power(const double* x, std::size_t len, std::size_t n_fft) {
  std::vector<double> p(n_fft / 2 + 1);
  for (std::size_t k = 0; k < p.size(); ++k) {
    double re = 0, im = 0;
    for (std::size_t i = 0; i < len; ++i) {
      const double w = 0.5 - 0.5 * std::cos(2 * std::numbers::pi * i / len);
      const double a = -2 * std::numbers::pi * k * i / n_fft;
      re += w * x[i] * std::cos(a);
      im += w * x[i] * std::sin(a);
    }
    p[k] = re * re + im * im;
  }
  return p;
}

}  // namespace

TEST(Audio, FrameCount) {
  EXPECT_EQ(frame_count(399, 400, 320), 0u);
  EXPECT_EQ(frame_count(400, 400, 320), 1u);
  EXPECT_EQ(frame_count(16000, 400, 320), 49u);
}

TEST(Audio, HtkMelScale) {
  EXPECT_NEAR(hz_to_mel(700.0), 2595.0 * std::log10(2.0), 1e-12);
  EXPECT_NEAR(mel_to_hz(hz_to_mel(1234.5)), 1234.5, 1e-9);
}

TEST(Audio, FilterbankIsTriangularAndPeaksNearCentres) {
  const std::size_t n_fft = 512, bins = n_fft / 2 + 1;
  const auto fb = mel_filterbank(20, n_fft, 16000);
  const auto centres = mel_centers(20, 16000);
  for (std::size_t m = 0; m < 20; ++m) {
    std::size_t best = 0;
    for (std::size_t k = 0; k < bins; ++k) {
      EXPECT_GE(fb[m * bins + k], 0.0);
      EXPECT_LE(fb[m * bins + k], 1.0);
      if (fb[m * bins + k] > fb[m * bins + best]) best = k;
    }
    EXPECT_NEAR(best * 16000.0 / n_fft, centres[m], 16000.0 / n_fft);
  }
}

TEST(Audio, LogMelMatchesNaiveDft) {
  MelOptions o;
  o.n_mels = 10;
  WaveBuffer w;
  Rng rng = make_rng(5, {1});
  for (int i = 0; i < 1200; ++i) w.samples.push_back(uniform(rng, -0.5, 0.5));
  const auto mel = log_mel(w, o);
  ASSERT_EQ(mel.n_frames, frame_count(1200, 400, 320));
  const auto fb = mel_filterbank(o.n_mels, 512, 16000);
  for (std::size_t t = 0; t < mel.n_frames; ++t) {
    const auto p = naive_power(w.samples.data() + t * 320, 400, 512);
    for (std::size_t m = 0; m < o.n_mels; ++m) {
      double e = 0;
      for (std::size_t k = 0; k < p.size(); ++k) e += fb[m * p.size() + k] * p[k];
      EXPECT_NEAR(mel.at(t, m), std::log(e + o.eps), 1e-9);
    }
  }
}

TEST(Audio, SineEnergyLandsInMatchingBand) {
  MelOptions o;
  o.n_mels = 40;
  WaveBuffer w;
  for (int i = 0; i < 4000; ++i) w.samples.push_back(0.5 * std::sin(2 * std::numbers::pi * 1000.0 * i / 16000.0));
  const auto mel = log_mel(w, o);
  const auto centres = mel_centers(40, 16000);
  std::size_t best = 0;
  for (std::size_t m = 0; m < 40; ++m)
    if (mel.at(2, m) > mel.at(2, best)) best = m;
  EXPECT_LT(std::abs(centres[best] - 1000.0), 120.0);
}

TEST(Audio, ShortOrMismatchedInputThrows) {
  WaveBuffer w;
  w.samples.assign(100, 0.0);
  EXPECT_THROW(log_mel(w), AudioError);
  w.samples.assign(1000, 0.0);
  w.sample_rate = 8000;
  EXPECT_THROW(log_mel(w), AudioError);
}

TEST(Audio, WavRoundTripIsExactOnPcmGrid) {
  const auto dir = tmpdir("wav");
  WaveBuffer w;
  for (int i = -50; i < 50; ++i) w.samples.push_back(i * 300 / 32768.0);
  w.samples.push_back(2.0);
  std::size_t clipped = 0;
  write_wav(dir / "a.wav", w, &clipped);
  EXPECT_EQ(clipped, 1u);
  const auto r = read_wav(dir / "a.wav");
  ASSERT_EQ(r.size(), w.size());
  for (std::size_t i = 0; i + 1 < w.size(); ++i) EXPECT_EQ(r.samples[i], w.samples[i]);
  EXPECT_EQ(r.samples.back(), 32767 / 32768.0);
}

TEST(Synth, DeterministicAndLabelled) {
  SynthCorpusSpec s;
  s.n_utterances = 4;
  const auto a = synth_corpus(s);
  const auto b = synth_corpus(s);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].wave.samples, b[i].wave.samples);
    EXPECT_EQ(a[i].labels.size(), frame_count(a[i].wave.size(), s.frame_len, s.frame_hop));
    for (int l : a[i].labels) {
      EXPECT_GE(l, 0);
      EXPECT_LT(l, 16);
    }
    const double dur = a[i].wave.size() / 16000.0;
    EXPECT_GE(dur, s.duration_min_s - 1e-9);
    EXPECT_LE(dur, s.duration_max_s + 1e-9);
  }
  s.seed = 2;
  EXPECT_NE(synth_corpus(s)[0].wave.samples, a[0].wave.samples);
}

TEST(Synth, CorpusDirectoryRoundTrip) {
  const auto dir = tmpdir("corpus");
  SynthCorpusSpec s;
  s.n_utterances = 3;
  const auto a = synth_corpus(s);
  write_corpus(dir, a, s);
  const auto b = read_corpus(dir);
  ASSERT_EQ(b.size(), a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(b[i].id, a[i].id);
    EXPECT_EQ(b[i].labels, a[i].labels);
    ASSERT_EQ(b[i].wave.size(), a[i].wave.size());
    for (std::size_t j = 0; j < a[i].wave.size(); ++j) EXPECT_NEAR(b[i].wave.samples[j], a[i].wave.samples[j], 1.0 / 32768);
  }
}

TEST(Synth, EmptyCorpusAndBadSpec) {
  SynthCorpusSpec s;
  s.n_utterances = 0;
  EXPECT_TRUE(synth_corpus(s).empty());
  s.duration_min_s = 0.01;
  EXPECT_THROW(s.validate(), std::invalid_argument);
}
