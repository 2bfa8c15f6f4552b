#include "gmmjepa/cli.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "gmmjepa/analysis.hpp"
#include "gmmjepa/checkpoint.hpp"
#include "gmmjepa/config.hpp"
#include "gmmjepa/gradsuite.hpp"
#include "gmmjepa/trainer.hpp"

namespace gmmjepa::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kFail = 1;
constexpr int kUsage = 2;
constexpr const char* kConfigEnv = "GMMJEPA_CONFIG";

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Common {
  std::string config_path;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config_path, std::string("Config file (default: $") + kConfigEnv + ")");
  cmd->add_option("--set", c.sets, "Override a field, e.g. --set train.T_max=500");
}

json parse_literal(const std::string& s) {
  try {
    return json::parse(s);
  } catch (const json::parse_error&) {
    return s;  // bare strings
  }
}

// Resolves the config file plus overrides; `overrides` collects what was changed.
RunConfig resolve(const Common& c, json& overrides, const std::vector<std::pair<std::string, json>>& extra = {}) {
  std::string path = c.config_path;
  if (path.empty()) {
    if (const char* env = std::getenv(kConfigEnv)) path = env;
  }
  json j = json::object();
  if (!path.empty()) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config " + path);
    try {
      j = json::parse(f, nullptr, true, true);
    } catch (const json::parse_error& e) {
      throw ConfigError("config " + path + ": " + e.what());
    }
  }
  auto apply = [&](const std::string& key, const json& v) {
    apply_override(j, key, v);
    overrides[key] = v;
  };
  for (const auto& s : c.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects section.key=value, got " + s);
    apply(s.substr(0, eq), parse_literal(s.substr(eq + 1)));
  }
  for (const auto& [k, v] : extra) apply(k, v);
  return run_config_from_json(j);
}

std::vector<audio::Utterance> load_or_synth(const std::string& corpus_dir, const RunConfig& cfg) {
  if (!corpus_dir.empty()) return audio::read_corpus(corpus_dir);
  std::cerr << "no --corpus given; synthesizing " << cfg.corpus.n_utterances << " utterances from config\n";
  return audio::synth_corpus(cfg.corpus);
}

fs::path sidecar(const fs::path& p, const std::string& suffix) { return fs::path(p.string() + suffix); }

// ------------------------------------------------------------- commands

int cmd_synth(const Common& c, const std::string& out) {
  json ov = json::object();
  const RunConfig cfg = resolve(c, ov);
  const auto corpus = audio::synth_corpus(cfg.corpus);
  audio::write_corpus(out, corpus, cfg.corpus);
  write_config_snapshot(fs::path(out) / "config.resolved.json", cfg, ov);
  std::cerr << "wrote " << corpus.size() << " utterances to " << out << "\n";
  return kOk;
}

int cmd_fit(const Common& c, const std::string& method, const std::string& corpus_dir, const std::string& out) {
  json ov = json::object();
  const RunConfig cfg = resolve(c, ov);
  const auto prepared = trainer::prepare_corpus(load_or_synth(corpus_dir, cfg), cfg.features);
  const cluster::Matrix X = trainer::stack_frames(prepared);
  std::cerr << "fitting " << method << " on " << X.rows << " frames x " << X.cols << " dims\n";
  json meta = {{"method", method}, {"n_frames", X.rows}, {"dim", X.cols}, {"n_utterances", prepared.utts.size()}};
  if (method == "gmm") {
    cluster::GmmFitReport rep;
    const auto model = cluster::gmm_fit_minibatch(X, cfg.gmm, &rep);
    meta.update({{"K", cfg.gmm.K},
                 {"epochs", cfg.gmm.epochs},
                 {"steps", rep.steps},
                 {"seed", cfg.gmm.seed},
                 {"var_clamps", rep.var_clamps},
                 {"heldout_ll", rep.heldout_ll},
                 {"final_heldout_ll", rep.final_heldout_ll},
                 {"warnings", rep.warnings}});
    for (const auto& w : rep.warnings) std::cerr << "warning: " << w << "\n";
    cluster::save_gmm(out, model, meta);
  } else {
    cluster::LloydReport rep;
    const auto model = cluster::lloyd_fit(X, cfg.kmeans.K, cfg.kmeans.iters, cfg.kmeans.seed, &rep);
    meta.update({{"K", cfg.kmeans.K},
                 {"iterations", rep.iterations_requested},
                 {"lloyd_rounds", rep.rounds_run},
                 {"reseeded", rep.reseeded},
                 {"seed", cfg.kmeans.seed},
                 {"inertia", rep.inertia}});
    cluster::save_kmeans(out, model, meta);
  }
  write_config_snapshot(sidecar(out, ".config.json"), cfg, ov);
  std::cerr << "wrote " << out << "\n";
  return kOk;
}

struct PretrainArgs {
  std::string targets, corpus, out;
  std::optional<double> lambda_end;
  bool pure = false, baseline = false, resume = false;
};

int cmd_pretrain(const Common& c, const PretrainArgs& a) {
  if (a.targets.empty() && !a.pure) throw UsageError("pretrain: --targets is required unless --pure-jepa is given");
  if (a.pure && a.baseline) throw UsageError("pretrain: --pure-jepa and --baseline are exclusive");
  std::vector<std::pair<std::string, json>> extra;
  if (a.lambda_end) extra.emplace_back("train.lambda_end", *a.lambda_end);
  if (a.pure) extra.emplace_back("train.pure_jepa", true);
  if (a.baseline) extra.emplace_back("train.baseline_mode", true);
  json ov = json::object();
  const RunConfig cfg = resolve(c, ov, extra);

  const auto prepared = trainer::prepare_corpus(load_or_synth(a.corpus, cfg), cfg.features);
  std::vector<cluster::PosteriorSeq> targets;
  if (!a.targets.empty() && !cfg.train.pure_jepa) {
    const auto model = cluster::load_target_model(a.targets);
    const bool is_kmeans = std::holds_alternative<cluster::KmeansModel>(model);
    if (is_kmeans != cfg.train.baseline_mode) {
      throw UsageError(is_kmeans ? "k-means targets need --baseline" : "--baseline needs k-means targets");
    }
    targets = trainer::compute_targets(model, prepared);
  }

  trainer::RunOptions ro;
  ro.setup = cfg.trainer_setup();
  ro.mel = cfg.features;
  ro.out_dir = a.out;
  ro.resume = a.resume;
  ro.config_echo = to_json(cfg);
  fs::create_directories(a.out);
  write_config_snapshot(fs::path(a.out) / "config.resolved.json", cfg, ov);
  std::cerr << "pretraining " << cfg.train.T_max << " steps on " << prepared.utts.size() << " utterances\n";
  const auto res = trainer::run_pretraining(ro, prepared, targets.empty() ? nullptr : &targets);
  if (!res.records.empty()) {
    const auto& r = res.records.back();
    std::cerr << "step " << r.step << " total " << r.total << " l_jepa " << r.l_jepa << "\n";
  }
  std::cerr << "wrote " << res.final_checkpoint.string() << "\n";
  return kOk;
}

struct Loaded {
  RunConfig cfg;
  Checkpoint ck;
};

Loaded load_for_analysis(const std::string& path) {
  Loaded l{RunConfig{}, load_checkpoint(path)};
  l.cfg = run_config_from_json(l.ck.config);
  return l;
}

analysis::EmbeddingDump dump_of(const Loaded& l, const trainer::PreparedCorpus& corpus) {
  tensor::set_precision(l.cfg.train.f32 ? tensor::Precision::F32 : tensor::Precision::F64);
  const auto stats = trainer::feature_stats_from_json(l.ck.state.at("feature_stats"));
  return analysis::extract_embeddings(l.ck.online, l.cfg.encoder, corpus, stats, l.cfg.analysis.max_utterances);
}

struct AnalyzeArgs {
  std::string checkpoint, corpus, report, export_path, nmi_csv;
  std::vector<std::string> compare;
};

int cmd_analyze(const AnalyzeArgs& a) {
  const Loaded main = load_for_analysis(a.checkpoint);
  const auto& cfg = main.cfg;
  const auto prepared = trainer::prepare_corpus(load_or_synth(a.corpus, cfg), cfg.features);
  const auto dump = dump_of(main, prepared);
  if (!a.export_path.empty()) analysis::write_dump(a.export_path, dump);

  std::vector<std::vector<int>> labels;
  for (std::size_t i = 0; i < dump.utts.size(); ++i) {
    const auto& lab = prepared.utts[i].labels;
    labels.emplace_back(lab.begin(), lab.begin() + std::min<std::size_t>(lab.size(), dump.utts[i].n_frames));
  }
  analysis::ProbeOptions po{cfg.analysis.probe_l2, cfg.analysis.probe_epochs, cfg.analysis.probe_lr, cfg.analysis.seed};
  const auto report = analysis::evaluate(dump, &labels, &po);

  json out = report.to_json();
  out["checkpoint"] = a.checkpoint;
  const fs::path rp(a.report);
  if (rp.has_parent_path()) fs::create_directories(rp.parent_path());
  std::ofstream(rp) << out.dump(2) << "\n";
  analysis::write_cluster_csv(sidecar(rp, ".clusters.csv"), report);
  std::cerr << std::fixed << std::setprecision(2) << "entropy " << report.normalized_entropy_pct << "% used "
            << report.used_clusters << "/" << report.K << "\n";

  if (!a.compare.empty()) {
    std::vector<analysis::EmbeddingDump> dumps{dump};
    for (const auto& f : a.compare) dumps.push_back(dump_of(load_for_analysis(f), prepared));
    std::vector<const analysis::EmbeddingDump*> ptrs;
    for (const auto& d : dumps) ptrs.push_back(&d);
    const auto m = analysis::kmeans_nmi_matrix(ptrs, cfg.analysis.k_probe, cfg.analysis.seed);
    std::vector<std::string> names{a.checkpoint};
    names.insert(names.end(), a.compare.begin(), a.compare.end());
    const fs::path csv = a.nmi_csv.empty() ? sidecar(rp, ".nmi.csv") : fs::path(a.nmi_csv);
    std::ofstream f(csv);
    f << "model";
    for (const auto& n : names) f << "," << n;
    f << "\n" << std::setprecision(17);
    for (std::size_t i = 0; i < m.size(); ++i) {
      f << names[i];
      for (double v : m[i]) f << "," << v;
      f << "\n";
    }
    std::cerr << "wrote " << csv.string() << "\n";
  }
  return kOk;
}

int cmd_gradcheck(const std::string& module, bool fault) {
  std::vector<std::string> names = gradsuite::case_names();
  if (!module.empty()) {
    if (std::find(names.begin(), names.end(), module) == names.end()) {
      throw UsageError("unknown module '" + module + "'");
    }
    names = {module};
  }
  bool ok = true;
  double worst = 0.0, total_s = 0.0;
  for (const auto& n : names) {
    const auto r = gradsuite::run_case(n, fault);
    ok = ok && r.report.passed;
    worst = std::max(worst, r.report.max_rel_err);
    total_s += r.seconds;
    std::printf("%-20s %s max_rel_err=%.3e (%s[%zu]) %.2fs\n", n.c_str(), r.report.passed ? "PASS" : "FAIL",
                r.report.max_rel_err, r.report.worst_param.c_str(), r.report.worst_index, r.seconds);
  }
  std::printf("max_rel_err=%.3e total=%.2fs %s\n", worst, total_s, ok ? "PASS" : "FAIL");
  return ok ? kOk : kFail;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"GMM-anchored JEPA speech pretraining"};
  app.require_subcommand(1);

  Common common;

  auto* synth = app.add_subcommand("synth-corpus", "Generate the synthetic corpus");
  std::string synth_out;
  add_common(synth, common);
  synth->add_option("--out", synth_out, "Output directory")->required();

  auto* fit = app.add_subcommand("fit-targets", "Fit the frozen clustering targets");
  std::string method = "gmm", fit_out, fit_corpus;
  add_common(fit, common);
  fit->add_option("--method", method)->check(CLI::IsMember({"gmm", "kmeans"}));
  fit->add_option("--corpus", fit_corpus, "Corpus directory (default: synthesize from config)");
  fit->add_option("--out", fit_out, "Model file")->required();

  auto* pre = app.add_subcommand("pretrain", "Run pretraining");
  PretrainArgs pa;
  double lambda_end = 0.0;
  add_common(pre, common);
  pre->add_option("--targets", pa.targets, "GMM or k-means file from fit-targets");
  auto* le = pre->add_option("--lambda-end", lambda_end, "Final cluster-loss weight");
  pre->add_flag("--pure-jepa", pa.pure, "Train without the cluster loss");
  pre->add_flag("--baseline", pa.baseline, "Use one-hot k-means targets");
  pre->add_option("--corpus", pa.corpus, "Corpus directory (default: synthesize from config)");
  pre->add_option("--out", pa.out, "Run directory")->required();
  pre->add_flag("--resume", pa.resume, "Continue from the newest checkpoint in --out");

  auto* an = app.add_subcommand("analyze", "Evaluate a checkpoint");
  AnalyzeArgs aa;
  an->add_option("--checkpoint", aa.checkpoint)->required();
  an->add_option("--corpus", aa.corpus, "Corpus directory (default: synthesize from the checkpoint config)");
  an->add_option("--report", aa.report, "MetricsReport JSON path")->required();
  an->add_option("--compare", aa.compare, "Other checkpoints for the NMI matrix");
  an->add_option("--nmi-csv", aa.nmi_csv, "NMI matrix path (default: <report>.nmi.csv)");
  an->add_option("--export", aa.export_path, "Write an embedding dump");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  std::string module;
  bool fault = false;
  gc->add_option("--module", module, "Check a single block");
  gc->add_flag("--inject-fault", fault, "Drop a gradient term on purpose (negative control)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*synth) return cmd_synth(common, synth_out);
    if (*fit) return cmd_fit(common, method, fit_corpus, fit_out);
    if (*pre) {
      if (*le) pa.lambda_end = lambda_end;
      return cmd_pretrain(common, pa);
    }
    if (*an) return cmd_analyze(aa);
    if (*gc) return cmd_gradcheck(module, fault);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kUsage;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFail;
  }
  return kUsage;
}

}  // namespace gmmjepa::cli
