#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "gmmjepa/clustering.hpp"
#include "gmmjepa/rng.hpp"

using namespace gmmjepa;
using namespace gmmjepa::cluster;
namespace fs = std::filesystem;

namespace {

// Three well separated blobs in 2-D.
Matrix blobs(std::size_t per, std::uint64_t seed, std::vector<int>* truth = nullptr) {
  const double cx[3] = {-5, 0, 5}, cy[3] = {0, 6, 0};
  Matrix X(3 * per, 2);
  Rng rng = make_rng(seed, {9});
  for (std::size_t i = 0; i < X.rows; ++i) {
    const int k = static_cast<int>(i % 3);
    X.at(i, 0) = cx[k] + normal(rng, 0, 0.5);
    X.at(i, 1) = cy[k] + normal(rng, 0, 0.5);
    if (truth) truth->push_back(k);
  }
  return X;
}

GmmModel random_gmm(std::size_t K, std::size_t D, Rng& rng) {
  GmmModel g(K, D);
  std::vector<double> lp(K), mu(K * D), lv(K * D);
  double z = 0;
  for (auto& v : lp) z += std::exp(v = uniform(rng, -1, 1));
  for (auto& v : lp) v -= std::log(z);
  for (auto& v : mu) v = uniform(rng, -2, 2);
  for (auto& v : lv) v = uniform(rng, -1, 1);
  g.set_log_pi(lp);
  g.set_mu(mu);
  g.set_log_var(lv);
  return g;
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(f), {}};
}

}  // namespace

TEST(Kmeans, RecoversSeparatedBlobs) {
  std::vector<int> truth;
  const Matrix X = blobs(50, 1, &truth);
  LloydReport rep;
  const auto m = lloyd_fit(X, 3, 20, 7, &rep);
  EXPECT_EQ(rep.iterations_requested, 20u);
  const auto ids = hard_labels(m, X);
  // Same partition as the truth up to relabeling.
  for (std::size_t i = 0; i < ids.size(); ++i)
    for (std::size_t j = 0; j < ids.size(); ++j) ASSERT_EQ(ids[i] == ids[j], truth[i] == truth[j]);
  for (std::size_t i = 1; i < rep.inertia.size(); ++i) EXPECT_LE(rep.inertia[i], rep.inertia[i - 1] + 1e-9);
}

TEST(Kmeans, HardLabelTieGoesToLowestIndex) {
  KmeansModel m;
  m.K = 2;
  m.D = 1;
  m.centers = Matrix(2, 1);
  m.centers.at(0, 0) = -1;
  m.centers.at(1, 0) = 1;
  Matrix X(1, 1, 0.0);
  EXPECT_EQ(hard_labels(m, X)[0], 0);
}

TEST(Kmeans, OneHotPosteriors) {
  std::vector<int> ids{2, 0};
  const auto q = one_hot_posteriors(ids, 3);
  EXPECT_EQ(q.q, (std::vector<double>{0, 0, 1, 1, 0, 0}));
  EXPECT_EQ(q.log_q[2], 0.0);
  EXPECT_TRUE(std::isinf(q.log_q[0]));
}

TEST(Gmm, LogPosteriorMatchesDirectFormula) {
  Rng rng = make_rng(3, {1});
  const auto g = random_gmm(4, 3, rng);
  std::vector<double> x{0.3, -0.7, 1.1};
  const auto lj = gmm_log_joint(g, x);
  for (std::size_t k = 0; k < 4; ++k) {
    double ref = g.log_pi()[k];
    for (std::size_t d = 0; d < 3; ++d) {
      const double var = std::exp(g.log_var(k, d));
      ref += -0.5 * (std::log(2 * M_PI) + g.log_var(k, d) + (x[d] - g.mu(k, d)) * (x[d] - g.mu(k, d)) / var);
    }
    EXPECT_NEAR(lj[k], ref, 1e-12);
  }
  const auto lp = gmm_log_posterior(g, x);
  double s = 0;
  for (double v : lp) s += std::exp(v);
  EXPECT_NEAR(s, 1.0, 1e-14);
}

TEST(Gmm, ChunkedAssignmentEqualsDirect) {
  Rng rng = make_rng(11, {2});
  const auto g = random_gmm(32, 16, rng);
  Matrix X(200, 16);
  for (auto& v : X.data) v = normal(rng, 0, 2);
  const auto direct = chunked_soft_assign(g, X, X.rows, g.K());
  for (std::size_t r = 0; r < X.rows; ++r) {
    const auto lp = gmm_log_posterior(g, X.row(r));
    for (std::size_t k = 0; k < 32; ++k) ASSERT_NEAR(direct.q[r * 32 + k], std::exp(lp[k]), 1e-12);
  }
  for (auto [b, c] : {std::pair{1, 1}, {7, 5}, {64, 32}, {500, 3}}) {
    const auto q = chunked_soft_assign(g, X, b, c);
    for (std::size_t i = 0; i < q.q.size(); ++i) ASSERT_NEAR(q.q[i], direct.q[i], 1e-10);
  }
}

TEST(Gmm, MinibatchFitImprovesHeldoutLikelihood) {
  const Matrix X = blobs(200, 2);
  GmmFitOptions o;
  o.K = 3;
  o.epochs = 15;
  o.batch = 64;
  o.seed = 4;
  GmmFitReport rep;
  const auto g = gmm_fit_minibatch(X, o, &rep);
  ASSERT_FALSE(rep.heldout_ll.empty());
  EXPECT_GT(rep.final_heldout_ll, rep.heldout_ll.front() - 1e-9);
  // Blobs have per-dim std 0.5: ll per frame near 2 * (-0.5 log(2 pi 0.25) - 0.5) - log 3.
  const double ideal = 2 * (-0.5 * std::log(2 * M_PI * 0.25) - 0.5) - std::log(3.0);
  EXPECT_GT(gmm_mean_log_likelihood(g, X), ideal - 0.5);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t d = 0; d < 2; ++d) EXPECT_GE(std::exp(g.log_var(k, d)), o.var_floor * (1 - 1e-12));
}

TEST(Gmm, FrozenModelRejectsMutation) {
  GmmModel g(2, 1);
  g.freeze();
  EXPECT_THROW(g.set_mu({0, 1}), FrozenModelError);
}

TEST(Io, ModelFilesRoundTripBitExactly) {
  const auto dir = fs::temp_directory_path() / "gmmjepa_cluster_io";
  fs::create_directories(dir);
  Rng rng = make_rng(5, {3});
  const auto g = random_gmm(5, 4, rng);
  save_gmm(dir / "g.bin", g, {{"K", 5}});
  const auto g2 = load_gmm(dir / "g.bin");
  EXPECT_EQ(g2.mu(), g.mu());
  EXPECT_EQ(g2.log_var(), g.log_var());
  EXPECT_EQ(g2.log_pi(), g.log_pi());
  EXPECT_TRUE(g2.frozen());
  save_gmm(dir / "g2.bin", g2, {{"K", 5}});
  EXPECT_EQ(slurp(dir / "g.bin"), slurp(dir / "g2.bin"));
  EXPECT_TRUE(fs::exists(dir / "g.bin.json"));

  const auto km = lloyd_fit(blobs(10, 3), 3, 5, 1);
  save_kmeans(dir / "k.bin", km, {});
  const auto tm = load_target_model(dir / "k.bin");
  ASSERT_TRUE(std::holds_alternative<KmeansModel>(tm));
  EXPECT_EQ(std::get<KmeansModel>(tm).centers.data, km.centers.data);
  EXPECT_TRUE(std::holds_alternative<GmmModel>(load_target_model(dir / "g.bin")));
}
