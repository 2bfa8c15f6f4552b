#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace gmmjepa::audio {

class AudioError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct WaveBuffer {
  std::vector<double> samples;
  int sample_rate = 16000;

  std::size_t size() const { return samples.size(); }
};

/// T x D log-mel matrix, row-major (frame-major).
struct MelFrameSeq {
  std::size_t n_frames = 0;
  std::size_t n_mels = 0;
  std::size_t frame_len = 400;
  std::size_t frame_hop = 320;
  std::vector<double> frames;

  double at(std::size_t t, std::size_t d) const { return frames[t * n_mels + d]; }
  const double* row(std::size_t t) const { return frames.data() + t * n_mels; }
};

// 16-bit PCM mono only. Samples are scaled by 1/32768 on read and clipped to
// [-1, 1) on write; clipping is counted in `clipped` when provided.
WaveBuffer read_wav(const std::filesystem::path& path);
void write_wav(const std::filesystem::path& path, const WaveBuffer& wav, std::size_t* clipped = nullptr);

struct MelOptions {
  std::size_t n_mels = 80;
  std::size_t frame_len = 400;
  std::size_t frame_hop = 320;
  double eps = 1e-6;
  int sample_rate = 16000;
};

std::size_t frame_count(std::size_t n_samples, std::size_t frame_len, std::size_t frame_hop);

double hz_to_mel(double hz);
double mel_to_hz(double mel);

/// Triangular filters on the HTK mel scale between 0 Hz and Nyquist, evaluated
/// at FFT bin centres. Row-major n_mels x (n_fft/2 + 1).
std::vector<double> mel_filterbank(std::size_t n_mels, std::size_t n_fft, int sample_rate);
/// Centre frequency (Hz) of each filter.
std::vector<double> mel_centers(std::size_t n_mels, int sample_rate);

/// Hann-windowed power STFT -> mel filterbank -> log(E + eps). Owns its FFT
/// plan, so one extractor per thread.
class MelExtractor {
 public:
  explicit MelExtractor(MelOptions opt = {});
  ~MelExtractor();
  MelExtractor(const MelExtractor&) = delete;
  MelExtractor& operator=(const MelExtractor&) = delete;

  MelFrameSeq operator()(const WaveBuffer& x) const;
  const MelOptions& options() const { return opt_; }
  std::size_t n_fft() const { return n_fft_; }
  const std::vector<double>& filterbank() const { return fbank_; }

 private:
  struct Fft;
  MelOptions opt_;
  std::size_t n_fft_;
  std::vector<double> window_;
  std::vector<double> fbank_;
  std::unique_ptr<Fft> fft_;
};

MelFrameSeq log_mel(const WaveBuffer& x, const MelOptions& opt = {});

// ------------------------------------------------------------ synthetic data

struct PhoneClass {
  std::vector<double> formants_hz;
  std::vector<double> bandwidths_hz;
};

struct SynthCorpusSpec {
  std::size_t n_utterances = 200;
  double duration_min_s = 1.0;
  double duration_max_s = 2.0;
  std::size_t n_phone_classes = 16;
  double segment_min_ms = 50.0;
  double segment_max_ms = 200.0;
  double noise_floor = 1e-3;
  double amplitude = 0.3;
  int sample_rate = 16000;
  std::size_t frame_len = 400;
  std::size_t frame_hop = 320;
  std::uint64_t seed = 1;
  // Empty means "derive from seed".
  std::vector<PhoneClass> classes;

  void validate() const;
};

std::vector<PhoneClass> default_phone_classes(std::size_t n, std::uint64_t seed);

struct Utterance {
  std::string id;
  WaveBuffer wave;
  std::vector<int> labels;  // one per analysis frame
};

std::vector<Utterance> synth_corpus(const SynthCorpusSpec& spec);

// Manifest: manifest.json with utterance paths (relative to the directory)
// and frame-label arrays.
void write_corpus(const std::filesystem::path& dir, const std::vector<Utterance>& corpus,
                  const SynthCorpusSpec& spec);
std::vector<Utterance> read_corpus(const std::filesystem::path& dir);

}  // namespace gmmjepa::audio
