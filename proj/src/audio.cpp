#include "gmmjepa/audio.hpp"

#include <fftw3.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <fstream>
#include <mutex>
#include <numbers>

namespace gmmjepa::audio {

namespace {

// FFTW planning is not thread-safe; execution on a plan's own buffers is.
std::mutex& fftw_planner_mutex() {
  static std::mutex m;
  return m;
}

std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

}  // namespace

WaveBuffer read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw AudioError("cannot open " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = " in " + path.string();
  if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
      std::memcmp(bytes.data() + 8, "WAVE", 4) != 0) {
    throw AudioError("not a RIFF/WAVE file" + where);
  }
  std::size_t pos = 12;
  bool have_fmt = false;
  int sample_rate = 0;
  while (pos + 8 <= bytes.size()) {
    const unsigned char* hdr = bytes.data() + pos;
    const std::uint32_t len = read_u32(hdr + 4);
    const std::size_t body = pos + 8;
    if (std::memcmp(hdr, "fmt ", 4) == 0) {
      if (len < 16 || body + 16 > bytes.size()) throw AudioError("truncated fmt chunk" + where);
      const std::uint16_t format = read_u16(bytes.data() + body);
      const std::uint16_t channels = read_u16(bytes.data() + body + 2);
      sample_rate = static_cast<int>(read_u32(bytes.data() + body + 4));
      const std::uint16_t bits = read_u16(bytes.data() + body + 14);
      if (format != 1) throw AudioError("expected PCM (format 1), got format " + std::to_string(format) + where);
      if (channels != 1) throw AudioError("expected mono, got " + std::to_string(channels) + " channels" + where);
      if (bits != 16) throw AudioError("expected 16-bit samples, got " + std::to_string(bits) + where);
      have_fmt = true;
    } else if (std::memcmp(hdr, "data", 4) == 0) {
      if (!have_fmt) throw AudioError("data chunk before fmt chunk" + where);
      if (body + len > bytes.size() || len % 2 != 0) throw AudioError("truncated data chunk" + where);
      WaveBuffer w;
      w.sample_rate = sample_rate;
      w.samples.resize(len / 2);
      for (std::size_t i = 0; i < w.samples.size(); ++i) {
        const auto v = static_cast<std::int16_t>(read_u16(bytes.data() + body + 2 * i));
        w.samples[i] = static_cast<double>(v) / 32768.0;
      }
      if (w.samples.empty()) throw AudioError("empty data chunk" + where);
      return w;
    }
    pos = body + len + (len & 1);
  }
  throw AudioError("truncated file: no data chunk" + where);
}

void write_wav(const std::filesystem::path& path, const WaveBuffer& wav, std::size_t* clipped) {
  std::string out;
  const auto n = static_cast<std::uint32_t>(wav.samples.size());
  out.reserve(44 + 2 * n);
  out += "RIFF";
  put_u32(out, 36 + 2 * n);
  out += "WAVEfmt ";
  put_u32(out, 16);
  put_u16(out, 1);
  put_u16(out, 1);
  put_u32(out, static_cast<std::uint32_t>(wav.sample_rate));
  put_u32(out, static_cast<std::uint32_t>(wav.sample_rate) * 2);
  put_u16(out, 2);
  put_u16(out, 16);
  out += "data";
  put_u32(out, 2 * n);
  std::size_t nclip = 0;
  for (double s : wav.samples) {
    double q = std::round(s * 32768.0);
    if (q > 32767.0 || q < -32768.0) {
      ++nclip;
      q = std::clamp(q, -32768.0, 32767.0);
    }
    put_u16(out, static_cast<std::uint16_t>(static_cast<std::int16_t>(q)));
  }
  if (clipped) *clipped = nclip;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw AudioError("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw AudioError("write failed for " + path.string());
}

// ---------------------------------------------------------------- log-mel

std::size_t frame_count(std::size_t n_samples, std::size_t frame_len, std::size_t frame_hop) {
  if (n_samples < frame_len) return 0;
  return (n_samples - frame_len) / frame_hop + 1;
}

double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

namespace {

std::vector<double> mel_points(std::size_t n_mels, int sample_rate) {
  const double lo = hz_to_mel(0.0);
  const double hi = hz_to_mel(sample_rate / 2.0);
  std::vector<double> hz(n_mels + 2);
  for (std::size_t i = 0; i < hz.size(); ++i) {
    hz[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(n_mels + 1));
  }
  return hz;
}

}  // namespace

std::vector<double> mel_centers(std::size_t n_mels, int sample_rate) {
  auto pts = mel_points(n_mels, sample_rate);
  return {pts.begin() + 1, pts.end() - 1};
}

std::vector<double> mel_filterbank(std::size_t n_mels, std::size_t n_fft, int sample_rate) {
  const std::size_t n_bins = n_fft / 2 + 1;
  const auto pts = mel_points(n_mels, sample_rate);
  std::vector<double> fb(n_mels * n_bins, 0.0);
  for (std::size_t m = 0; m < n_mels; ++m) {
    const double lo = pts[m], c = pts[m + 1], hi = pts[m + 2];
    for (std::size_t k = 0; k < n_bins; ++k) {
      const double f = static_cast<double>(k) * sample_rate / static_cast<double>(n_fft);
      double w = 0.0;
      if (f > lo && f <= c) {
        w = (f - lo) / (c - lo);
      } else if (f > c && f < hi) {
        w = (hi - f) / (hi - c);
      }
      fb[m * n_bins + k] = w;
    }
  }
  return fb;
}

struct MelExtractor::Fft {
  double* in = nullptr;
  fftw_complex* out = nullptr;
  fftw_plan plan = nullptr;
};

MelExtractor::MelExtractor(MelOptions opt) : opt_(opt), fft_(std::make_unique<Fft>()) {
  if (opt_.frame_len < opt_.frame_hop || opt_.frame_hop == 0 || opt_.n_mels == 0) {
    throw AudioError("log_mel: need frame_len >= frame_hop > 0 and n_mels > 0");
  }
  n_fft_ = 1;
  while (n_fft_ < opt_.frame_len) n_fft_ <<= 1;
  window_.resize(opt_.frame_len);
  for (std::size_t i = 0; i < opt_.frame_len; ++i) {
    window_[i] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * static_cast<double>(i) /
                                      static_cast<double>(opt_.frame_len));
  }
  fbank_ = mel_filterbank(opt_.n_mels, n_fft_, opt_.sample_rate);
  std::lock_guard lock(fftw_planner_mutex());
  fft_->in = fftw_alloc_real(n_fft_);
  fft_->out = fftw_alloc_complex(n_fft_ / 2 + 1);
  fft_->plan = fftw_plan_dft_r2c_1d(static_cast<int>(n_fft_), fft_->in, fft_->out, FFTW_ESTIMATE);
}

MelExtractor::~MelExtractor() {
  std::lock_guard lock(fftw_planner_mutex());
  fftw_destroy_plan(fft_->plan);
  fftw_free(fft_->in);
  fftw_free(fft_->out);
}

MelFrameSeq MelExtractor::operator()(const WaveBuffer& x) const {
  if (x.samples.size() < opt_.frame_len) {
    throw AudioError("log_mel: input of " + std::to_string(x.samples.size()) +
                     " samples is shorter than one frame (" + std::to_string(opt_.frame_len) + ")");
  }
  if (x.sample_rate != opt_.sample_rate) {
    throw AudioError("log_mel: sample rate " + std::to_string(x.sample_rate) + " != " +
                     std::to_string(opt_.sample_rate));
  }
  MelFrameSeq out;
  out.n_mels = opt_.n_mels;
  out.frame_len = opt_.frame_len;
  out.frame_hop = opt_.frame_hop;
  out.n_frames = frame_count(x.samples.size(), opt_.frame_len, opt_.frame_hop);
  out.frames.resize(out.n_frames * out.n_mels);
  const std::size_t n_bins = n_fft_ / 2 + 1;
  std::vector<double> power(n_bins);
  for (std::size_t t = 0; t < out.n_frames; ++t) {
    const double* src = x.samples.data() + t * opt_.frame_hop;
    for (std::size_t i = 0; i < opt_.frame_len; ++i) fft_->in[i] = src[i] * window_[i];
    std::fill(fft_->in + opt_.frame_len, fft_->in + n_fft_, 0.0);
    fftw_execute(fft_->plan);
    for (std::size_t k = 0; k < n_bins; ++k) {
      power[k] = fft_->out[k][0] * fft_->out[k][0] + fft_->out[k][1] * fft_->out[k][1];
    }
    for (std::size_t m = 0; m < opt_.n_mels; ++m) {
      const double* w = fbank_.data() + m * n_bins;
      double e = 0.0;
      for (std::size_t k = 0; k < n_bins; ++k) e += w[k] * power[k];
      out.frames[t * opt_.n_mels + m] = std::log(e + opt_.eps);
    }
  }
  return out;
}

MelFrameSeq log_mel(const WaveBuffer& x, const MelOptions& opt) {
  MelExtractor ex(opt);
  return ex(x);
}

}  // namespace gmmjepa::audio
