#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "gmmjepa/clustering.hpp"
#include "gmmjepa/encoder.hpp"
#include "gmmjepa/trainer.hpp"
#include "json.hpp"

namespace gmmjepa::analysis {

std::vector<std::size_t> cluster_counts(std::span<const int> ids, std::size_t K);

/// 100 * H(p) / log K over the usage distribution given by counts (K = size).
double cluster_entropy(std::span<const std::size_t> counts);
double cluster_entropy(std::span<const int> ids, std::size_t K);

std::size_t used_clusters(std::span<const int> ids, std::size_t K);

/// Fraction of consecutive frames sharing an ID. Requires T >= 2.
double adjacent_consistency(std::span<const int> ids);
/// Frame-weighted over utterances; sequences shorter than 2 are skipped with
/// a warning and never cross utterance boundaries.
double adjacent_consistency(const std::vector<std::vector<int>>& seqs);

/// 1 - H(row) / log K for each row of a row-major T x K matrix.
std::vector<double> frame_confidence(std::span<const double> posteriors, std::size_t K);

/// 2 I(U;V) / (H(U) + H(V)), natural logs; 0 when both labelings are constant.
double nmi(std::span<const int> u, std::span<const int> v);

// ---------------------------------------------------------------- dumps

struct UttEntry {
  std::string id;
  std::uint64_t offset = 0;
  std::uint64_t n_frames = 0;
};

struct EmbeddingDump {
  std::uint64_t n_frames = 0;
  std::uint32_t C = 0;
  std::uint32_t K = 0;
  std::vector<UttEntry> utts;
  std::vector<float> embeddings;  // n_frames x C
  std::vector<float> posteriors;  // n_frames x K
  std::vector<std::int32_t> ids;

  std::vector<std::vector<int>> ids_per_utt() const;
};

/// Encodes clean utterances (the first `max_utts`, 0 = all) with the online
/// encoder and cluster head.
EmbeddingDump extract_embeddings(const ParamStore& online, const encoder::EncoderConfig& ecfg,
                                 const trainer::PreparedCorpus& corpus, const trainer::FeatureStats& stats,
                                 std::size_t max_utts = 0);

// Layout: "GJEPAEMB", u32 version, u64 n_frames, u32 C, u32 K, u64 n_utts,
// per utterance (string id, u64 offset, u64 n_frames), then f32 embeddings,
// f32 posteriors, i32 ids, all little-endian.
void write_dump(const std::filesystem::path& path, const EmbeddingDump& d);
EmbeddingDump read_dump(const std::filesystem::path& path);

/// Lloyd k-means (shared seed) on each dump's embeddings, then pairwise NMI.
std::vector<std::vector<double>> kmeans_nmi_matrix(const std::vector<const EmbeddingDump*>& dumps, std::size_t k_probe,
                                                   std::uint64_t seed, std::size_t iters = 20);

// ---------------------------------------------------------------- probes

struct ProbeOptions {
  double l2 = 1e-4;
  std::size_t epochs = 200;
  double lr = 0.5;
  std::uint64_t seed = 0;
};

/// Multinomial logistic regression by full-batch gradient descent on
/// standardized features. Returns held-out accuracy.
double linear_probe(const cluster::Matrix& x_train, std::span<const int> y_train, const cluster::Matrix& x_test,
                    std::span<const int> y_test, const ProbeOptions& opt);

struct ProbeSummary {
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;
};

/// Utterance-level random 80/20 splits, one per seed.
ProbeSummary probe_over_seeds(const EmbeddingDump& d, const std::vector<std::vector<int>>& labels,
                              const ProbeOptions& opt, std::size_t n_seeds = 3);

// ---------------------------------------------------------------- reports

struct MetricsReport {
  std::size_t K = 0;
  std::size_t n_frames = 0;
  std::size_t n_utterances = 0;
  double normalized_entropy_pct = 0.0;
  std::size_t used_clusters = 0;
  double adjacent_consistency = 0.0;
  double mean_confidence = 0.0;
  std::vector<std::size_t> counts;
  std::optional<double> label_nmi;
  std::optional<ProbeSummary> probe;

  nlohmann::json to_json() const;
};

/// Collapse and quality metrics from a dump; label NMI and the probe use the
/// per-utterance labels when given.
MetricsReport evaluate(const EmbeddingDump& d, const std::vector<std::vector<int>>* labels = nullptr,
                       const ProbeOptions* probe = nullptr);

/// rank,cluster,count rows sorted by descending count.
void write_cluster_csv(const std::filesystem::path& path, const MetricsReport& r);

}  // namespace gmmjepa::analysis
