#include "gmmjepa/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <stdexcept>

#include "gmmjepa/binio.hpp"
#include "gmmjepa/rng.hpp"

namespace gmmjepa::analysis {

namespace {

constexpr std::string_view kDumpMagic = "GJEPAEMB";
constexpr std::uint32_t kDumpVersion = 1;

// Sum over nonzero n of (n/N) * (log N - log n).
double entropy_of_counts(const std::vector<std::size_t>& counts, std::size_t total) {
  const double N = static_cast<double>(total);
  const double logN = std::log(N);
  double h = 0.0;
  for (auto c : counts) {
    if (c == 0) continue;
    const double n = static_cast<double>(c);
    h += n / N * (logN - std::log(n));
  }
  return h;
}

}  // namespace

std::vector<std::size_t> cluster_counts(std::span<const int> ids, std::size_t K) {
  std::vector<std::size_t> counts(K, 0);
  for (int id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= K) {
      throw std::out_of_range("cluster id " + std::to_string(id) + " outside [0, " + std::to_string(K) + ")");
    }
    ++counts[static_cast<std::size_t>(id)];
  }
  return counts;
}

double cluster_entropy(std::span<const std::size_t> counts) {
  if (counts.size() < 2) throw std::invalid_argument("cluster_entropy: K must be >= 2");
  const std::size_t total = std::accumulate(counts.begin(), counts.end(), std::size_t{0});
  if (total == 0) throw std::invalid_argument("cluster_entropy: no frames");
  const std::vector<std::size_t> c(counts.begin(), counts.end());
  return 100.0 * entropy_of_counts(c, total) / std::log(static_cast<double>(counts.size()));
}

double cluster_entropy(std::span<const int> ids, std::size_t K) {
  if (K < 2) throw std::invalid_argument("cluster_entropy: K must be >= 2");
  const auto c = cluster_counts(ids, K);
  return cluster_entropy(std::span<const std::size_t>(c));
}

std::size_t used_clusters(std::span<const int> ids, std::size_t K) {
  const auto c = cluster_counts(ids, K);
  return static_cast<std::size_t>(std::count_if(c.begin(), c.end(), [](std::size_t n) { return n > 0; }));
}

double adjacent_consistency(std::span<const int> ids) {
  if (ids.size() < 2) throw std::invalid_argument("adjacent_consistency: need at least 2 frames");
  std::size_t same = 0;
  for (std::size_t i = 0; i + 1 < ids.size(); ++i) same += ids[i] == ids[i + 1] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(ids.size() - 1);
}

double adjacent_consistency(const std::vector<std::vector<int>>& seqs) {
  std::size_t same = 0, pairs = 0, skipped = 0;
  for (const auto& s : seqs) {
    if (s.size() < 2) {
      ++skipped;
      continue;
    }
    for (std::size_t i = 0; i + 1 < s.size(); ++i) same += s[i] == s[i + 1] ? 1 : 0;
    pairs += s.size() - 1;
  }
  if (skipped > 0) std::cerr << "warning: adjacent_consistency skipped " << skipped << " utterances with T < 2\n";
  if (pairs == 0) throw std::invalid_argument("adjacent_consistency: no utterance with T >= 2");
  return static_cast<double>(same) / static_cast<double>(pairs);
}

std::vector<double> frame_confidence(std::span<const double> posteriors, std::size_t K) {
  if (K < 2 || posteriors.size() % K != 0) throw std::invalid_argument("frame_confidence: bad shape");
  const double logK = std::log(static_cast<double>(K));
  std::vector<double> out(posteriors.size() / K);
  for (std::size_t r = 0; r < out.size(); ++r) {
    double h = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      const double p = posteriors[r * K + k];
      if (p > 0.0) h -= p * std::log(p);
    }
    out[r] = std::clamp(1.0 - h / logK, 0.0, 1.0);
  }
  return out;
}

double nmi(std::span<const int> u, std::span<const int> v) {
  if (u.size() != v.size()) throw std::invalid_argument("nmi: length mismatch");
  if (u.empty()) throw std::invalid_argument("nmi: empty labelings");
  std::map<int, std::size_t> cu, cv;
  std::map<std::pair<int, int>, std::size_t> cuv;
  for (std::size_t i = 0; i < u.size(); ++i) {
    ++cu[u[i]];
    ++cv[v[i]];
    ++cuv[{u[i], v[i]}];
  }
  auto values = [](const auto& m) {
    std::vector<std::size_t> out;
    for (const auto& [_, n] : m) out.push_back(n);
    return out;
  };
  const std::size_t total = u.size();
  const double hu = entropy_of_counts(values(cu), total);
  const double hv = entropy_of_counts(values(cv), total);
  if (hu + hv == 0.0) return 0.0;
  const double N = static_cast<double>(total);
  const double logN = std::log(N);
  double mi = 0.0;
  for (const auto& [key, n] : cuv) {
    const double nd = static_cast<double>(n);
    mi += nd / N *
          (std::log(nd) + logN - std::log(static_cast<double>(cu[key.first])) -
           std::log(static_cast<double>(cv[key.second])));
  }
  return std::clamp(2.0 * mi / (hu + hv), 0.0, 1.0);
}

// ---------------------------------------------------------------- dumps

std::vector<std::vector<int>> EmbeddingDump::ids_per_utt() const {
  std::vector<std::vector<int>> out;
  for (const auto& u : utts) {
    out.emplace_back(ids.begin() + static_cast<std::ptrdiff_t>(u.offset),
                     ids.begin() + static_cast<std::ptrdiff_t>(u.offset + u.n_frames));
  }
  return out;
}

EmbeddingDump extract_embeddings(const ParamStore& online, const encoder::EncoderConfig& ecfg,
                                 const trainer::PreparedCorpus& corpus, const trainer::FeatureStats& stats,
                                 std::size_t max_utts) {
  EmbeddingDump d;
  d.C = static_cast<std::uint32_t>(ecfg.latent_dim);
  d.K = static_cast<std::uint32_t>(ecfg.cluster_K);
  const std::size_t n = max_utts == 0 ? corpus.utts.size() : std::min(max_utts, corpus.utts.size());
  const ParamStore frozen = online.frozen_copy();
  for (std::size_t i = 0; i < n; ++i) {
    auto enc = trainer::encode_utterance(frozen, ecfg, corpus, stats, i);
    auto post = tensor::softmax(encoder::cluster_head(frozen, enc.z, ecfg), 1);
    const std::size_t T = enc.z->shape()[0];
    d.utts.push_back({corpus.utts[i].id, d.n_frames, T});
    d.n_frames += T;
    for (double x : enc.z->value.data()) d.embeddings.push_back(static_cast<float>(x));
    for (std::size_t tt = 0; tt < T; ++tt) {
      std::size_t best = 0;
      for (std::size_t k = 0; k < d.K; ++k) {
        const double p = post->value.at(tt, k);
        d.posteriors.push_back(static_cast<float>(p));
        if (p > post->value.at(tt, best)) best = k;
      }
      d.ids.push_back(static_cast<std::int32_t>(best));
    }
  }
  return d;
}

void write_dump(const std::filesystem::path& path, const EmbeddingDump& d) {
  if (d.embeddings.size() != d.n_frames * d.C || d.posteriors.size() != d.n_frames * d.K ||
      d.ids.size() != d.n_frames) {
    throw std::invalid_argument("write_dump: inconsistent array sizes");
  }
  binio::Writer w;
  w.magic(kDumpMagic);
  w.u32(kDumpVersion);
  w.u64(d.n_frames);
  w.u32(d.C);
  w.u32(d.K);
  w.u64(d.utts.size());
  for (const auto& u : d.utts) {
    w.str(u.id);
    w.u64(u.offset);
    w.u64(u.n_frames);
  }
  for (float f : d.embeddings) w.pod(f);
  for (float f : d.posteriors) w.pod(f);
  for (std::int32_t i : d.ids) w.pod(i);
  w.save(path);
}

EmbeddingDump read_dump(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kDumpMagic);
  const auto version = r.u32();
  if (version != kDumpVersion) throw binio::FormatError("dump: unsupported version " + std::to_string(version));
  EmbeddingDump d;
  d.n_frames = r.u64();
  d.C = r.u32();
  d.K = r.u32();
  const auto n_utts = r.u64();
  if (n_utts > r.remaining()) throw binio::FormatError("dump: bad utterance count");
  std::uint64_t expect = 0;
  for (std::uint64_t i = 0; i < n_utts; ++i) {
    UttEntry u;
    u.id = r.str();
    u.offset = r.u64();
    u.n_frames = r.u64();
    if (u.offset != expect) throw binio::FormatError("dump: utterance table is not contiguous");
    expect += u.n_frames;
    d.utts.push_back(std::move(u));
  }
  if (expect != d.n_frames) throw binio::FormatError("dump: utterance table does not cover n_frames");
  d.embeddings = r.f32s(d.n_frames * d.C);
  d.posteriors = r.f32s(d.n_frames * d.K);
  if (d.n_frames > r.remaining() / sizeof(std::int32_t)) throw binio::FormatError("dump: truncated ids");
  d.ids.resize(d.n_frames);
  for (auto& id : d.ids) id = r.pod<std::int32_t>();
  if (!r.at_end()) throw binio::FormatError("dump: trailing bytes");
  return d;
}

std::vector<std::vector<double>> kmeans_nmi_matrix(const std::vector<const EmbeddingDump*>& dumps, std::size_t k_probe,
                                                   std::uint64_t seed, std::size_t iters) {
  if (dumps.empty()) throw std::invalid_argument("kmeans_nmi_matrix: no dumps");
  for (const auto* d : dumps) {
    if (d->utts.size() != dumps[0]->utts.size() || d->n_frames != dumps[0]->n_frames) {
      throw std::invalid_argument("kmeans_nmi_matrix: dumps cover different frames");
    }
    for (std::size_t i = 0; i < d->utts.size(); ++i) {
      const auto& a = d->utts[i];
      const auto& b = dumps[0]->utts[i];
      if (a.id != b.id || a.offset != b.offset || a.n_frames != b.n_frames) {
        throw std::invalid_argument("kmeans_nmi_matrix: frame index mismatch at utterance " + a.id);
      }
    }
  }
  std::vector<std::vector<int>> labels;
  for (const auto* d : dumps) {
    cluster::Matrix X(d->n_frames, d->C);
    std::copy(d->embeddings.begin(), d->embeddings.end(), X.data.begin());
    const auto model = cluster::lloyd_fit(X, k_probe, iters, seed);
    labels.push_back(cluster::hard_labels(model, X));
  }
  const std::size_t n = dumps.size();
  std::vector<std::vector<double>> m(n, std::vector<double>(n, 1.0));
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) m[i][j] = m[j][i] = nmi(labels[i], labels[j]);
  }
  return m;
}

// ---------------------------------------------------------------- probes

double linear_probe(const cluster::Matrix& x_train, std::span<const int> y_train, const cluster::Matrix& x_test,
                    std::span<const int> y_test, const ProbeOptions& opt) {
  const std::size_t N = x_train.rows;
  const std::size_t D = x_train.cols;
  if (N == 0 || y_train.size() != N || x_test.rows != y_test.size() || x_test.cols != D) {
    throw std::invalid_argument("linear_probe: inconsistent shapes");
  }
  if (x_test.rows == 0) throw std::invalid_argument("linear_probe: empty test set");
  int max_label = 0;
  for (int y : y_train) {
    if (y < 0) throw std::invalid_argument("linear_probe: negative label");
    max_label = std::max(max_label, y);
  }
  for (int y : y_test) max_label = std::max(max_label, y);
  const std::size_t K = static_cast<std::size_t>(max_label) + 1;
  if (std::all_of(y_train.begin(), y_train.end(), [&](int y) { return y == y_train[0]; })) {
    throw std::invalid_argument("linear_probe: training set has a single class");
  }

  std::vector<double> mean(D, 0.0), inv_std(D, 0.0);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) mean[d] += x_train.at(i, d);
  for (auto& m : mean) m /= static_cast<double>(N);
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t d = 0; d < D; ++d) inv_std[d] += std::pow(x_train.at(i, d) - mean[d], 2);
  for (auto& s : inv_std) s = 1.0 / std::max(std::sqrt(s / static_cast<double>(N)), 1e-8);
  auto standardize = [&](const cluster::Matrix& X) {
    cluster::Matrix Z(X.rows, D);
    for (std::size_t i = 0; i < X.rows; ++i)
      for (std::size_t d = 0; d < D; ++d) Z.at(i, d) = (X.at(i, d) - mean[d]) * inv_std[d];
    return Z;
  };
  const auto Xtr = standardize(x_train);
  const auto Xte = standardize(x_test);

  Rng rng = make_rng(opt.seed, {0x9B});
  std::vector<double> W(D * K), b(K, 0.0);
  for (auto& w : W) w = normal(rng, 0.0, 0.01);
  std::vector<double> gW(D * K), gb(K), logits(K);
  for (std::size_t e = 0; e < opt.epochs; ++e) {
    std::fill(gW.begin(), gW.end(), 0.0);
    std::fill(gb.begin(), gb.end(), 0.0);
    for (std::size_t i = 0; i < N; ++i) {
      const auto x = Xtr.row(i);
      for (std::size_t k = 0; k < K; ++k) logits[k] = b[k];
      for (std::size_t d = 0; d < D; ++d)
        for (std::size_t k = 0; k < K; ++k) logits[k] += x[d] * W[d * K + k];
      const double mx = *std::max_element(logits.begin(), logits.end());
      double z = 0.0;
      for (auto& l : logits) z += (l = std::exp(l - mx));
      for (std::size_t k = 0; k < K; ++k) {
        const double g = logits[k] / z - (static_cast<int>(k) == y_train[i] ? 1.0 : 0.0);
        gb[k] += g;
        for (std::size_t d = 0; d < D; ++d) gW[d * K + k] += g * x[d];
      }
    }
    const double inv = 1.0 / static_cast<double>(N);
    for (std::size_t j = 0; j < W.size(); ++j) W[j] -= opt.lr * (gW[j] * inv + opt.l2 * W[j]);
    for (std::size_t k = 0; k < K; ++k) b[k] -= opt.lr * gb[k] * inv;
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < Xte.rows; ++i) {
    const auto x = Xte.row(i);
    std::size_t best = 0;
    double best_v = -INFINITY;
    for (std::size_t k = 0; k < K; ++k) {
      double l = b[k];
      for (std::size_t d = 0; d < D; ++d) l += x[d] * W[d * K + k];
      if (l > best_v) {
        best_v = l;
        best = k;
      }
    }
    correct += static_cast<int>(best) == y_test[i] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(Xte.rows);
}

ProbeSummary probe_over_seeds(const EmbeddingDump& d, const std::vector<std::vector<int>>& labels,
                              const ProbeOptions& opt, std::size_t n_seeds) {
  if (labels.size() != d.utts.size()) throw std::invalid_argument("probe: one label sequence per utterance required");
  if (d.utts.size() < 2) throw std::invalid_argument("probe: need at least 2 utterances");
  ProbeSummary s;
  for (std::size_t seed = 0; seed < n_seeds; ++seed) {
    std::vector<std::size_t> order(d.utts.size());
    std::iota(order.begin(), order.end(), 0);
    Rng rng = make_rng(opt.seed, {0x5E, seed});
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n_test = std::max<std::size_t>(1, order.size() / 5);
    auto build = [&](std::size_t from, std::size_t to, cluster::Matrix& X, std::vector<int>& y) {
      std::size_t rows = 0;
      for (std::size_t i = from; i < to; ++i) rows += d.utts[order[i]].n_frames;
      X = cluster::Matrix(rows, d.C);
      y.clear();
      std::size_t r = 0;
      for (std::size_t i = from; i < to; ++i) {
        const auto& u = d.utts[order[i]];
        const auto& lab = labels[order[i]];
        if (lab.size() != u.n_frames) throw std::invalid_argument("probe: label count mismatch for " + u.id);
        for (std::size_t f = 0; f < u.n_frames; ++f, ++r) {
          for (std::size_t c = 0; c < d.C; ++c) X.at(r, c) = d.embeddings[(u.offset + f) * d.C + c];
          y.push_back(lab[f]);
        }
      }
    };
    cluster::Matrix xtr, xte;
    std::vector<int> ytr, yte;
    build(n_test, order.size(), xtr, ytr);
    build(0, n_test, xte, yte);
    ProbeOptions o = opt;
    o.seed = derive_seed(opt.seed, {seed});
    s.accuracies.push_back(linear_probe(xtr, ytr, xte, yte, o));
  }
  const double n = static_cast<double>(s.accuracies.size());
  s.mean = std::accumulate(s.accuracies.begin(), s.accuracies.end(), 0.0) / n;
  double var = 0.0;
  for (double a : s.accuracies) var += (a - s.mean) * (a - s.mean);
  s.stddev = s.accuracies.size() > 1 ? std::sqrt(var / (n - 1.0)) : 0.0;
  return s;
}

// ---------------------------------------------------------------- reports

nlohmann::json MetricsReport::to_json() const {
  nlohmann::json j{{"K", K},
                   {"n_frames", n_frames},
                   {"n_utterances", n_utterances},
                   {"normalized_entropy_pct", normalized_entropy_pct},
                   {"used_clusters", used_clusters},
                   {"adjacent_consistency", adjacent_consistency},
                   {"mean_confidence", mean_confidence},
                   {"counts", counts}};
  j["label_nmi"] = label_nmi ? nlohmann::json(*label_nmi) : nlohmann::json(nullptr);
  if (probe) {
    j["probe"] = {{"accuracies", probe->accuracies}, {"mean", probe->mean}, {"std", probe->stddev}};
  } else {
    j["probe"] = nullptr;
  }
  return j;
}

MetricsReport evaluate(const EmbeddingDump& d, const std::vector<std::vector<int>>* labels, const ProbeOptions* probe) {
  MetricsReport r;
  r.K = d.K;
  r.n_frames = d.n_frames;
  r.n_utterances = d.utts.size();
  const std::span<const int> ids(d.ids.data(), d.ids.size());
  r.counts = cluster_counts(ids, d.K);
  r.normalized_entropy_pct = cluster_entropy(std::span<const std::size_t>(r.counts));
  r.used_clusters = used_clusters(ids, d.K);
  r.adjacent_consistency = adjacent_consistency(d.ids_per_utt());
  const std::vector<double> post(d.posteriors.begin(), d.posteriors.end());
  const auto conf = frame_confidence(post, d.K);
  r.mean_confidence = std::accumulate(conf.begin(), conf.end(), 0.0) / static_cast<double>(conf.size());
  if (labels) {
    if (labels->size() != d.utts.size()) throw std::invalid_argument("evaluate: one label sequence per utterance");
    std::vector<int> flat;
    for (std::size_t i = 0; i < labels->size(); ++i) {
      if ((*labels)[i].size() != d.utts[i].n_frames) {
        throw std::invalid_argument("evaluate: label count mismatch for " + d.utts[i].id);
      }
      flat.insert(flat.end(), (*labels)[i].begin(), (*labels)[i].end());
    }
    r.label_nmi = nmi(ids, flat);
    if (probe) r.probe = probe_over_seeds(d, *labels, *probe);
  }
  return r;
}

void write_cluster_csv(const std::filesystem::path& path, const MetricsReport& r) {
  std::vector<std::size_t> order(r.counts.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return r.counts[a] > r.counts[b]; });
  std::ofstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path.string());
  f << "rank,cluster,count\n";
  for (std::size_t i = 0; i < order.size(); ++i) f << i + 1 << "," << order[i] << "," << r.counts[order[i]] << "\n";
}

}  // namespace gmmjepa::analysis
