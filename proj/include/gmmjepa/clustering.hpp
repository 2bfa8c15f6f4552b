#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"

namespace gmmjepa::cluster {

/// Dense row-major N x D matrix of features.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

  std::span<const double> row(std::size_t i) const { return {data.data() + i * cols, cols}; }
  std::span<double> row(std::size_t i) { return {data.data() + i * cols, cols}; }
  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

class FrozenModelError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline constexpr double kDefaultVarFloor = 1e-4;

/// Diagonal-covariance mixture. Once frozen, every mutator throws.
class GmmModel {
 public:
  GmmModel() = default;
  GmmModel(std::size_t k, std::size_t d);

  std::size_t K() const { return k_; }
  std::size_t D() const { return d_; }
  const std::vector<double>& log_pi() const { return log_pi_; }
  const std::vector<double>& mu() const { return mu_; }
  const std::vector<double>& log_var() const { return log_var_; }
  double mu(std::size_t k, std::size_t d) const { return mu_[k * d_ + d]; }
  double log_var(std::size_t k, std::size_t d) const { return log_var_[k * d_ + d]; }

  void set_log_pi(std::vector<double> v);
  void set_mu(std::vector<double> v);
  void set_log_var(std::vector<double> v);

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

 private:
  void check_mutable() const;
  std::size_t k_ = 0, d_ = 0;
  std::vector<double> log_pi_, mu_, log_var_;
  bool frozen_ = false;
};

struct KmeansModel {
  std::size_t K = 0;
  std::size_t D = 0;
  Matrix centers;
};

/// Row-stochastic T x K posteriors, kept in both probability and log form.
struct PosteriorSeq {
  std::size_t rows = 0;
  std::size_t K = 0;
  std::vector<double> q;
  std::vector<double> log_q;
};

// -------------------------------------------------------------------- k-means

Matrix kmeanspp_init(const Matrix& X, std::size_t K, std::uint64_t seed);

struct LloydReport {
  std::size_t iterations_requested = 0;
  std::size_t rounds_run = 0;
  std::size_t reseeded = 0;
  std::vector<double> inertia;  // after each assignment step
};

KmeansModel lloyd_fit(const Matrix& X, std::size_t K, std::size_t iters, std::uint64_t seed,
                      LloydReport* report = nullptr);

/// Nearest center per row; ties go to the lowest index.
std::vector<int> hard_labels(const KmeansModel& model, const Matrix& X);

/// One-hot targets in PosteriorSeq form (log of zero stored as -inf).
PosteriorSeq one_hot_posteriors(std::span<const int> ids, std::size_t K);

// ------------------------------------------------------------------------ GMM

struct GmmFitOptions {
  std::size_t K = 16;
  std::size_t epochs = 30;
  std::size_t batch = 256;
  double lr_max = 1e-2;
  double lr_min = 1e-4;
  double var_floor = kDefaultVarFloor;
  double holdout_fraction = 0.1;
  std::uint64_t seed = 0;
};

struct GmmFitReport {
  std::size_t steps = 0;
  std::size_t var_clamps = 0;
  std::vector<double> heldout_ll;  // mean per-frame log-likelihood after each epoch
  std::vector<std::string> warnings;
  double final_heldout_ll = 0.0;
};

/// Stochastic gradient ascent on minibatch mean log-likelihood over
/// (softmax logits, means, log-variances), cosine-annealed step size.
/// `init` replaces the k-means++ initialization when given.
GmmModel gmm_fit_minibatch(const Matrix& X, const GmmFitOptions& opt, GmmFitReport* report = nullptr,
                           const GmmModel* init = nullptr);

/// log pi_k + log N(m | mu_k, diag var_k) for every k.
std::vector<double> gmm_log_joint(const GmmModel& model, std::span<const double> m);
/// Normalized log posteriors (logsumexp == 0).
std::vector<double> gmm_log_posterior(const GmmModel& model, std::span<const double> m);
/// Mean per-row log-likelihood.
double gmm_mean_log_likelihood(const GmmModel& model, const Matrix& X);

/// Posteriors computed over data batches x component chunks, accumulating
/// component log densities before a single softmax per row.
PosteriorSeq chunked_soft_assign(const GmmModel& model, const Matrix& X, std::size_t batch_size,
                                 std::size_t chunk_k);

// ----------------------------------------------------------------------- I/O

// Binary layout: 8-byte magic, u32 version, u32 K, u32 D, then f64 arrays
// (log_pi, mu, log_var) or (centers). Metadata goes to `<path>.json`.
void save_gmm(const std::filesystem::path& path, const GmmModel& model, const nlohmann::json& meta);
GmmModel load_gmm(const std::filesystem::path& path);
void save_kmeans(const std::filesystem::path& path, const KmeansModel& model, const nlohmann::json& meta);
KmeansModel load_kmeans(const std::filesystem::path& path);

using TargetModel = std::variant<GmmModel, KmeansModel>;
/// Dispatches on the file magic. GMMs come back frozen.
TargetModel load_target_model(const std::filesystem::path& path);

}  // namespace gmmjepa::cluster
