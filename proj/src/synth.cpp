#include <algorithm>
#include <cmath>
#include <span>
#include <fstream>
#include <numbers>

#include "gmmjepa/audio.hpp"
#include "gmmjepa/rng.hpp"
#include "json.hpp"

namespace gmmjepa::audio {

using nlohmann::json;

void SynthCorpusSpec::validate() const {
  if (n_phone_classes < 1) throw std::invalid_argument("synth corpus: n_phone_classes must be >= 1");
  if (!(duration_min_s > 0.0) || duration_max_s < duration_min_s) {
    throw std::invalid_argument("synth corpus: durations must be positive and ordered");
  }
  if (!(segment_min_ms > 0.0) || segment_max_ms < segment_min_ms) {
    throw std::invalid_argument("synth corpus: segment durations must be positive and ordered");
  }
  if (duration_min_s * sample_rate < static_cast<double>(frame_len)) {
    throw std::invalid_argument("synth corpus: minimum duration shorter than one analysis frame");
  }
  if (!classes.empty() && classes.size() != n_phone_classes) {
    throw std::invalid_argument("synth corpus: classes list does not match n_phone_classes");
  }
  for (const auto& c : classes) {
    if (c.formants_hz.empty() || c.formants_hz.size() != c.bandwidths_hz.size()) {
      throw std::invalid_argument("synth corpus: each class needs matching formants and bandwidths");
    }
  }
}

std::vector<PhoneClass> default_phone_classes(std::size_t n, std::uint64_t seed) {
  Rng rng = make_rng(seed, {0xc1a55});
  std::vector<PhoneClass> out(n);
  for (auto& c : out) {
    const double f1 = uniform(rng, 250.0, 900.0);
    const double f2 = uniform(rng, std::max(f1 + 300.0, 850.0), 2600.0);
    const double f3 = uniform(rng, std::max(f2 + 300.0, 2200.0), 3800.0);
    c.formants_hz = {f1, f2, f3};
    c.bandwidths_hz = {uniform(rng, 60.0, 140.0), uniform(rng, 80.0, 180.0), uniform(rng, 100.0, 240.0)};
  }
  return out;
}

namespace {

// One labelled segment: a glottal-like pulse train exciting damped resonators
// at the class formants.
void render_segment(std::span<double> out, const PhoneClass& cls, double f0, int sr, double gain, Rng& rng) {
  const double period = sr / f0;
  const auto ring = static_cast<std::size_t>(0.03 * sr);
  double phase = uniform(rng, 0.0, period);
  while (phase < static_cast<double>(out.size())) {
    const auto start = static_cast<std::size_t>(phase);
    for (std::size_t f = 0; f < cls.formants_hz.size(); ++f) {
      const double w = 2.0 * std::numbers::pi * cls.formants_hz[f] / sr;
      const double decay = std::numbers::pi * cls.bandwidths_hz[f] / sr;
      const double amp = 1.0 / static_cast<double>(f + 1);
      const std::size_t end = std::min(out.size(), start + ring);
      for (std::size_t i = start; i < end; ++i) {
        const double t = static_cast<double>(i - start);
        out[i] += amp * std::exp(-decay * t) * std::sin(w * t);
      }
    }
    phase += period * uniform(rng, 0.97, 1.03);
  }
  double e = 0.0;
  for (double v : out) e += v * v;
  const double rms = std::sqrt(e / static_cast<double>(std::max<std::size_t>(out.size(), 1)));
  if (rms > 0.0) {
    for (double& v : out) v *= gain / rms;
  }
}

}  // namespace

std::vector<Utterance> synth_corpus(const SynthCorpusSpec& spec) {
  spec.validate();
  const auto classes =
      spec.classes.empty() ? default_phone_classes(spec.n_phone_classes, spec.seed) : spec.classes;
  std::vector<Utterance> corpus;
  corpus.reserve(spec.n_utterances);
  for (std::size_t u = 0; u < spec.n_utterances; ++u) {
    Rng rng = make_rng(spec.seed, {0x5e9, u});
    const double dur = uniform(rng, spec.duration_min_s, spec.duration_max_s);
    const auto n = static_cast<std::size_t>(std::llround(dur * spec.sample_rate));
    const double f0 = uniform(rng, 90.0, 220.0);

    Utterance utt;
    char name[32];
    std::snprintf(name, sizeof(name), "utt_%05zu", u);
    utt.id = name;
    utt.wave.sample_rate = spec.sample_rate;
    utt.wave.samples.assign(n, 0.0);

    std::vector<int> sample_class(n, 0);
    std::size_t pos = 0;
    int prev = -1;
    while (pos < n) {
      const double ms = uniform(rng, spec.segment_min_ms, spec.segment_max_ms);
      const auto len = std::min(n - pos, static_cast<std::size_t>(std::llround(ms * spec.sample_rate / 1000.0)));
      int cls = static_cast<int>(uniform_int(rng, 0, static_cast<std::int64_t>(classes.size()) - 1));
      if (classes.size() > 1 && cls == prev) {
        cls = (cls + 1 + static_cast<int>(uniform_int(rng, 0, static_cast<std::int64_t>(classes.size()) - 2))) %
              static_cast<int>(classes.size());
      }
      const double gain = spec.amplitude * uniform(rng, 0.7, 1.3);
      render_segment(std::span<double>(utt.wave.samples).subspan(pos, len), classes[static_cast<std::size_t>(cls)],
                     f0 * uniform(rng, 0.95, 1.05), spec.sample_rate, gain, rng);
      std::fill_n(sample_class.begin() + static_cast<std::ptrdiff_t>(pos), len, cls);
      prev = cls;
      pos += len;
    }
    for (double& s : utt.wave.samples) {
      s = std::clamp(s + spec.noise_floor * normal(rng), -1.0, 1.0);
    }
    const std::size_t t = frame_count(n, spec.frame_len, spec.frame_hop);
    utt.labels.resize(t);
    for (std::size_t i = 0; i < t; ++i) utt.labels[i] = sample_class[i * spec.frame_hop + spec.frame_len / 2];
    corpus.push_back(std::move(utt));
  }
  return corpus;
}

void write_corpus(const std::filesystem::path& dir, const std::vector<Utterance>& corpus,
                  const SynthCorpusSpec& spec) {
  std::error_code ec;
  std::filesystem::create_directories(dir / "wav", ec);
  if (ec) throw AudioError("cannot create corpus directory " + dir.string() + ": " + ec.message());
  json utts = json::array();
  for (const auto& u : corpus) {
    const std::string rel = "wav/" + u.id + ".wav";
    write_wav(dir / rel, u.wave);
    utts.push_back({{"id", u.id}, {"path", rel}, {"n_samples", u.wave.size()}, {"labels", u.labels}});
  }
  json m = {{"sample_rate", spec.sample_rate},
            {"frame_len", spec.frame_len},
            {"frame_hop", spec.frame_hop},
            {"n_phone_classes", spec.n_phone_classes},
            {"seed", spec.seed},
            {"utterances", utts}};
  std::ofstream f(dir / "manifest.json");
  if (!f) throw AudioError("cannot write manifest in " + dir.string());
  f << m.dump(1) << '\n';
}

std::vector<Utterance> read_corpus(const std::filesystem::path& dir) {
  std::ifstream f(dir / "manifest.json");
  if (!f) throw AudioError("missing manifest.json in " + dir.string());
  json m;
  try {
    m = json::parse(f);
  } catch (const json::exception& e) {
    throw AudioError("invalid manifest in " + dir.string() + ": " + e.what());
  }
  std::vector<Utterance> out;
  for (const auto& j : m.at("utterances")) {
    Utterance u;
    u.id = j.at("id").get<std::string>();
    u.wave = read_wav(dir / j.at("path").get<std::string>());
    u.labels = j.at("labels").get<std::vector<int>>();
    out.push_back(std::move(u));
  }
  return out;
}

}  // namespace gmmjepa::audio
