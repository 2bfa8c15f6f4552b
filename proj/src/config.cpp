#include "gmmjepa/config.hpp"

#include <fstream>
#include <sstream>

namespace gmmjepa {

namespace {

using nlohmann::json;

void reject_unknown(const json& j, const json& known, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, _] : j.items()) {
    if (!known.contains(k)) throw ConfigError(where + ": unknown key '" + k + "'");
  }
}

template <class T>
void get(const json& j, const char* k, T& dst) {
  if (j.contains(k)) j.at(k).get_to(dst);
}

json corpus_json(const audio::SynthCorpusSpec& s) {
  return {{"n_utterances", s.n_utterances},     {"duration_min_s", s.duration_min_s},
          {"duration_max_s", s.duration_max_s}, {"n_phone_classes", s.n_phone_classes},
          {"segment_min_ms", s.segment_min_ms}, {"segment_max_ms", s.segment_max_ms},
          {"noise_floor", s.noise_floor},       {"amplitude", s.amplitude},
          {"seed", s.seed}};
}

json features_json(const audio::MelOptions& m) {
  return {{"n_mels", m.n_mels},
          {"frame_len", m.frame_len},
          {"frame_hop", m.frame_hop},
          {"eps", m.eps},
          {"sample_rate", m.sample_rate}};
}

json gmm_json(const cluster::GmmFitOptions& g) {
  return {{"K", g.K},
          {"epochs", g.epochs},
          {"batch", g.batch},
          {"lr_max", g.lr_max},
          {"lr_min", g.lr_min},
          {"var_floor", g.var_floor},
          {"holdout_fraction", g.holdout_fraction},
          {"seed", g.seed}};
}

json kmeans_json(const KmeansOptions& k) { return {{"K", k.K}, {"iters", k.iters}, {"seed", k.seed}}; }

json augment_json(const augment::AugmentConfig& a) {
  return {{"snr_min_db", a.snr_min_db},
          {"snr_max_db", a.snr_max_db},
          {"mix_ratio_min_db", a.mix_ratio_min_db},
          {"mix_ratio_max_db", a.mix_ratio_max_db},
          {"noise_prob", a.noise_prob},
          {"mix_prob", a.mix_prob},
          {"max_overlap", a.max_overlap},
          {"buffer_size", a.buffer_size},
          {"seed", a.seed}};
}

json mask_json(const masking::MaskSpec& m) {
  return {{"span_min", m.span_min}, {"span_max", m.span_max}, {"ratio_min", m.ratio_min}, {"ratio_max", m.ratio_max}};
}

json analysis_json(const AnalysisOptions& a) {
  return {{"max_utterances", a.max_utterances}, {"k_probe", a.k_probe},   {"probe_epochs", a.probe_epochs},
          {"probe_l2", a.probe_l2},             {"probe_lr", a.probe_lr}, {"probe_seeds", a.probe_seeds},
          {"seed", a.seed}};
}

}  // namespace

void RunConfig::validate() const {
  try {
    corpus.validate();
    encoder.validate();
    augment.validate();
    mask.validate();
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (features.n_mels == 0 || features.frame_len == 0 || features.frame_hop == 0 || features.sample_rate <= 0) {
    throw ConfigError("features: n_mels, frame_len, frame_hop and sample_rate must be positive");
  }
  if (gmm.K < 1 || gmm.epochs < 1 || gmm.batch < 1 || !(gmm.var_floor > 0.0)) {
    throw ConfigError("gmm: K, epochs, batch and var_floor must be positive");
  }
  if (!(gmm.holdout_fraction >= 0.0 && gmm.holdout_fraction < 1.0)) throw ConfigError("gmm: holdout_fraction in [0,1)");
  if (kmeans.K < 1) throw ConfigError("kmeans: K must be positive");
  if (encoder.frontend == encoder::Frontend::Mel && encoder.input_dim != features.n_mels) {
    throw ConfigError("encoder.input_dim must equal features.n_mels for the mel frontend");
  }
  if (analysis.k_probe < 2 || analysis.probe_seeds < 1) throw ConfigError("analysis: k_probe >= 2, probe_seeds >= 1");
}

json to_json(const RunConfig& c) {
  return {{"corpus", corpus_json(c.corpus)},
          {"features", features_json(c.features)},
          {"gmm", gmm_json(c.gmm)},
          {"kmeans", kmeans_json(c.kmeans)},
          {"encoder", encoder::to_json(c.encoder)},
          {"augment", augment_json(c.augment)},
          {"mask", mask_json(c.mask)},
          {"train", trainer::to_json(c.train)},
          {"analysis", analysis_json(c.analysis)}};
}

RunConfig run_config_from_json(const json& j) {
  RunConfig c;
  const json defaults = to_json(c);
  reject_unknown(j, defaults, "config");
  auto section = [&](const char* name) -> json {
    if (!j.contains(name)) return json::object();
    reject_unknown(j.at(name), defaults.at(name), name);
    return j.at(name);
  };
  try {
    const json co = section("corpus");
    get(co, "n_utterances", c.corpus.n_utterances);
    get(co, "duration_min_s", c.corpus.duration_min_s);
    get(co, "duration_max_s", c.corpus.duration_max_s);
    get(co, "n_phone_classes", c.corpus.n_phone_classes);
    get(co, "segment_min_ms", c.corpus.segment_min_ms);
    get(co, "segment_max_ms", c.corpus.segment_max_ms);
    get(co, "noise_floor", c.corpus.noise_floor);
    get(co, "amplitude", c.corpus.amplitude);
    get(co, "seed", c.corpus.seed);

    const json fe = section("features");
    get(fe, "n_mels", c.features.n_mels);
    get(fe, "frame_len", c.features.frame_len);
    get(fe, "frame_hop", c.features.frame_hop);
    get(fe, "eps", c.features.eps);
    get(fe, "sample_rate", c.features.sample_rate);
    c.corpus.frame_len = c.features.frame_len;
    c.corpus.frame_hop = c.features.frame_hop;
    c.corpus.sample_rate = c.features.sample_rate;

    const json gm = section("gmm");
    get(gm, "K", c.gmm.K);
    get(gm, "epochs", c.gmm.epochs);
    get(gm, "batch", c.gmm.batch);
    get(gm, "lr_max", c.gmm.lr_max);
    get(gm, "lr_min", c.gmm.lr_min);
    get(gm, "var_floor", c.gmm.var_floor);
    get(gm, "holdout_fraction", c.gmm.holdout_fraction);
    get(gm, "seed", c.gmm.seed);

    const json km = section("kmeans");
    get(km, "K", c.kmeans.K);
    get(km, "iters", c.kmeans.iters);
    get(km, "seed", c.kmeans.seed);

    c.encoder = encoder::encoder_config_from_json(section("encoder"));

    const json au = section("augment");
    get(au, "snr_min_db", c.augment.snr_min_db);
    get(au, "snr_max_db", c.augment.snr_max_db);
    get(au, "mix_ratio_min_db", c.augment.mix_ratio_min_db);
    get(au, "mix_ratio_max_db", c.augment.mix_ratio_max_db);
    get(au, "noise_prob", c.augment.noise_prob);
    get(au, "mix_prob", c.augment.mix_prob);
    get(au, "max_overlap", c.augment.max_overlap);
    get(au, "buffer_size", c.augment.buffer_size);
    get(au, "seed", c.augment.seed);

    const json ma = section("mask");
    get(ma, "span_min", c.mask.span_min);
    get(ma, "span_max", c.mask.span_max);
    get(ma, "ratio_min", c.mask.ratio_min);
    get(ma, "ratio_max", c.mask.ratio_max);

    c.train = trainer::train_config_from_json(section("train"));

    const json an = section("analysis");
    get(an, "max_utterances", c.analysis.max_utterances);
    get(an, "k_probe", c.analysis.k_probe);
    get(an, "probe_epochs", c.analysis.probe_epochs);
    get(an, "probe_l2", c.analysis.probe_l2);
    get(an, "probe_lr", c.analysis.probe_lr);
    get(an, "probe_seeds", c.analysis.probe_seeds);
    get(an, "seed", c.analysis.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    j = json::parse(f, nullptr, true, true);
  } catch (const json::parse_error& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

void apply_override(json& cfg, const std::string& dotted_key, const json& value) {
  const auto dot = dotted_key.find('.');
  if (dot == std::string::npos) throw ConfigError("override key must be section.key: " + dotted_key);
  cfg[dotted_key.substr(0, dot)][dotted_key.substr(dot + 1)] = value;
}

void write_config_snapshot(const std::filesystem::path& path, const RunConfig& c, const json& overrides) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot write config snapshot " + path.string());
  f << json{{"config", to_json(c)}, {"overrides", overrides}}.dump(2) << "\n";
}

}  // namespace gmmjepa
