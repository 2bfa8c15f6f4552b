#include <gtest/gtest.h>

#include <cstdlib>
#include <fstream>
#include <sys/wait.h>

#include "fixture.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

int run(const std::string& args) {
  const std::string cmd = std::string(GMMJEPA_BIN) + " " + args + " >/dev/null 2>&1";
  const int st = std::system(cmd.c_str());
  return WIFEXITED(st) ? WEXITSTATUS(st) : -1;
}

json read_json(const fs::path& p) {
  std::ifstream f(p);
  return json::parse(f);
}

class Cli : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    dir_ = fixture::fresh_dir("cli");
    const json cfg = {
        {"corpus", {{"n_utterances", 6}, {"duration_min_s", 0.4}, {"duration_max_s", 0.6}, {"seed", 3}}},
        {"features", {{"n_mels", 6}}},
        {"gmm", {{"K", 4}, {"epochs", 2}, {"batch", 32}}},
        {"kmeans", {{"K", 4}, {"iters", 20}}},
        {"encoder", gmmjepa::encoder::to_json(gmmjepa::gradsuite::micro_config())},
        {"mask", {{"span_min", 2}, {"span_max", 4}}},
        {"train", {{"T_max", 3}, {"batch_size", 2}, {"max_frames", 12}}},
        {"analysis", {{"k_probe", 3}, {"probe_epochs", 20}, {"probe_seeds", 2}}}};
    std::ofstream(dir_ / "cfg.json") << "// toy run\n" << cfg.dump(2);
  }
  static std::string cfg() { return "--config " + (dir_ / "cfg.json").string(); }
  static fs::path dir_;
};
fs::path Cli::dir_;

}  // namespace

TEST_F(Cli, SynthCorpusIsDeterministic) {
  ASSERT_EQ(run("synth-corpus " + cfg() + " --out " + (dir_ / "c1").string()), 0);
  ASSERT_EQ(run("synth-corpus " + cfg() + " --out " + (dir_ / "c2").string()), 0);
  EXPECT_EQ(fixture::slurp(dir_ / "c1/manifest.json"), fixture::slurp(dir_ / "c2/manifest.json"));
  EXPECT_EQ(read_json(dir_ / "c1/manifest.json").at("utterances").size(), 6u);
  EXPECT_TRUE(fs::exists(dir_ / "c1/config.resolved.json"));
  ASSERT_EQ(run("synth-corpus " + cfg() + " --set corpus.n_utterances=0 --out " + (dir_ / "c0").string()), 0);
  EXPECT_EQ(read_json(dir_ / "c0/manifest.json").at("utterances").size(), 0u);
  EXPECT_EQ(read_json(dir_ / "c0/config.resolved.json").at("overrides").at("corpus.n_utterances"), 0);
}

TEST_F(Cli, FitTargetsAndPretrainAndAnalyze) {
  const std::string corpus = (dir_ / "corpus").string();
  ASSERT_EQ(run("synth-corpus " + cfg() + " --out " + corpus), 0);
  ASSERT_EQ(run("fit-targets " + cfg() + " --method gmm --corpus " + corpus + " --out " + (dir_ / "g.bin").string()), 0);
  ASSERT_EQ(run("fit-targets " + cfg() + " --method gmm --corpus " + corpus + " --out " + (dir_ / "g2.bin").string()), 0);
  EXPECT_EQ(fixture::slurp(dir_ / "g.bin"), fixture::slurp(dir_ / "g2.bin"));
  EXPECT_EQ(read_json(dir_ / "g.bin.json").at("K"), 4);
  ASSERT_EQ(run("fit-targets " + cfg() + " --method kmeans --corpus " + corpus + " --out " + (dir_ / "k.bin").string()), 0);
  const auto km = read_json(dir_ / "k.bin.json");
  EXPECT_EQ(km.at("iterations"), 20);
  EXPECT_EQ(km.at("lloyd_rounds"), 20);

  const std::string base = "pretrain " + cfg() + " --corpus " + corpus;
  EXPECT_EQ(run(base + " --out " + (dir_ / "r_missing").string()), 2);
  ASSERT_EQ(run(base + " --targets " + (dir_ / "g.bin").string() + " --out " + (dir_ / "r_anch").string()), 0);
  ASSERT_EQ(run(base + " --pure-jepa --out " + (dir_ / "r_pure").string()), 0);
  ASSERT_EQ(run(base + " --targets " + (dir_ / "g.bin").string() + " --lambda-end 0.0 --out " + (dir_ / "r_rel").string()), 0);
  EXPECT_EQ(run(base + " --targets " + (dir_ / "g.bin").string() + " --baseline --out " + (dir_ / "r_bad").string()), 2);
  ASSERT_EQ(run(base + " --targets " + (dir_ / "k.bin").string() + " --baseline --out " + (dir_ / "r_base").string()), 0);

  std::ifstream m(dir_ / "r_pure/metrics.jsonl");
  std::string line;
  int n = 0;
  while (std::getline(m, line)) {
    EXPECT_EQ(json::parse(line).at("lambda"), 0.0);
    ++n;
  }
  EXPECT_EQ(n, 3);
  const auto snap = read_json(dir_ / "r_rel/config.resolved.json");
  EXPECT_EQ(snap.at("overrides").at("train.lambda_end"), 0.0);
  EXPECT_EQ(snap.at("config").at("train").at("lambda_end"), 0.0);

  const std::string an = "analyze --checkpoint " + (dir_ / "r_anch/final.bin").string() + " --corpus " + corpus;
  ASSERT_EQ(run(an + " --report " + (dir_ / "rep1.json").string() + " --compare " +
                (dir_ / "r_pure/final.bin").string() + " " + (dir_ / "r_rel/final.bin").string()),
            0);
  ASSERT_EQ(run(an + " --report " + (dir_ / "rep2.json").string()), 0);
  auto r1 = read_json(dir_ / "rep1.json"), r2 = read_json(dir_ / "rep2.json");
  for (const char* k : {"normalized_entropy_pct", "used_clusters", "adjacent_consistency", "mean_confidence",
                        "label_nmi", "probe"})
    EXPECT_TRUE(r1.contains(k)) << k;
  EXPECT_EQ(r1, r2);
  std::ifstream csv(dir_ / "rep1.json.nmi.csv");
  std::string header;
  std::getline(csv, header);
  EXPECT_EQ(std::count(header.begin(), header.end(), ','), 3);
  EXPECT_TRUE(fs::exists(dir_ / "rep1.json.clusters.csv"));
}

TEST_F(Cli, GradcheckExitCodes) {
  EXPECT_EQ(run("gradcheck --module daam"), 0);
  EXPECT_EQ(run("gradcheck --module daam --inject-fault"), 1);
  EXPECT_EQ(run("gradcheck --module bogus"), 2);
}

TEST_F(Cli, UsageAndConfigErrors) {
  EXPECT_EQ(run(""), 2);
  EXPECT_EQ(run("frobnicate"), 2);
  std::ofstream(dir_ / "bad.json") << R"({"train": {"T_maxx": 3}})";
  EXPECT_EQ(run("synth-corpus --config " + (dir_ / "bad.json").string() + " --out " + (dir_ / "x").string()), 2);
  EXPECT_EQ(run("synth-corpus --config /nonexistent.json --out " + (dir_ / "x").string()), 2);
  EXPECT_EQ(run("analyze --checkpoint /nonexistent.bin --report " + (dir_ / "x.json").string()), 1);
  const std::string env = "GMMJEPA_CONFIG=" + (dir_ / "bad.json").string() + " ";
  EXPECT_NE(std::system((env + GMMJEPA_BIN + " synth-corpus --out " + (dir_ / "y").string() + " >/dev/null 2>&1").c_str()), 0);
}
