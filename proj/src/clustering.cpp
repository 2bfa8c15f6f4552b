#include "gmmjepa/clustering.hpp"

#include <algorithm>
#include <cmath>
#include <iostream>
#include <limits>
#include <numbers>
#include <numeric>

#include "gmmjepa/binio.hpp"
#include "gmmjepa/rng.hpp"

namespace gmmjepa::cluster {

namespace {

constexpr std::string_view kGmmMagic = "GJEPAGMM";
constexpr std::string_view kKmeansMagic = "GJEPAKMN";
constexpr std::uint32_t kFormatVersion = 1;

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

double logsumexp(std::span<const double> v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;
  double s = 0.0;
  for (double x : v) s += std::exp(x - mx);
  return mx + std::log(s);
}

void write_meta(const std::filesystem::path& path, const nlohmann::json& meta) {
  std::ofstream f(path.string() + ".json");
  if (!f) throw std::runtime_error("cannot write metadata for " + path.string());
  f << meta.dump(2) << '\n';
}

}  // namespace

// ------------------------------------------------------------------- GmmModel

GmmModel::GmmModel(std::size_t k, std::size_t d)
    : k_(k), d_(d), log_pi_(k, -std::log(static_cast<double>(k))), mu_(k * d, 0.0), log_var_(k * d, 0.0) {}

void GmmModel::check_mutable() const {
  if (frozen_) throw FrozenModelError("GmmModel is frozen; parameters cannot be modified");
}

void GmmModel::set_log_pi(std::vector<double> v) {
  check_mutable();
  if (v.size() != k_) throw std::invalid_argument("set_log_pi: expected K values");
  log_pi_ = std::move(v);
}

void GmmModel::set_mu(std::vector<double> v) {
  check_mutable();
  if (v.size() != k_ * d_) throw std::invalid_argument("set_mu: expected K*D values");
  mu_ = std::move(v);
}

void GmmModel::set_log_var(std::vector<double> v) {
  check_mutable();
  if (v.size() != k_ * d_) throw std::invalid_argument("set_log_var: expected K*D values");
  log_var_ = std::move(v);
}

// -------------------------------------------------------------------- k-means

Matrix kmeanspp_init(const Matrix& X, std::size_t K, std::uint64_t seed) {
  if (K == 0) throw std::invalid_argument("kmeanspp_init: K must be >= 1");
  if (X.rows < K) {
    throw std::invalid_argument("kmeanspp_init: need N >= K (N=" + std::to_string(X.rows) +
                                ", K=" + std::to_string(K) + ")");
  }
  Rng rng = make_rng(seed, {0x6b6d7070});
  Matrix centers(K, X.cols);
  std::vector<bool> taken(X.rows, false);
  auto take = [&](std::size_t idx, std::size_t slot) {
    taken[idx] = true;
    std::copy(X.row(idx).begin(), X.row(idx).end(), centers.row(slot).begin());
  };
  take(static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(X.rows) - 1)), 0);
  std::vector<double> d2(X.rows);
  for (std::size_t i = 0; i < X.rows; ++i) d2[i] = sq_dist(X.row(i), centers.row(0));
  for (std::size_t c = 1; c < K; ++c) {
    double total = 0.0;
    for (double v : d2) total += v;
    std::size_t pick = X.rows;
    if (total > 0.0) {
      const double u = uniform(rng, 0.0, total);
      double cum = 0.0;
      for (std::size_t i = 0; i < X.rows; ++i) {
        cum += d2[i];
        if (cum > u) {
          pick = i;
          break;
        }
      }
      // Rounding can leave u just past the last positive mass.
      if (pick == X.rows) {
        for (std::size_t i = X.rows; i-- > 0;) {
          if (d2[i] > 0.0) {
            pick = i;
            break;
          }
        }
      }
    } else {
      // Every row coincides with a chosen center: fall back to an untaken row.
      std::vector<std::size_t> free;
      for (std::size_t i = 0; i < X.rows; ++i)
        if (!taken[i]) free.push_back(i);
      pick = free[static_cast<std::size_t>(uniform_int(rng, 0, static_cast<std::int64_t>(free.size()) - 1))];
    }
    take(pick, c);
    for (std::size_t i = 0; i < X.rows; ++i) d2[i] = std::min(d2[i], sq_dist(X.row(i), centers.row(c)));
  }
  return centers;
}

namespace {

std::size_t nearest(const Matrix& centers, std::span<const double> x, double* dist = nullptr) {
  std::size_t best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < centers.rows; ++k) {
    const double d = sq_dist(x, centers.row(k));
    if (d < bd) {
      bd = d;
      best = k;
    }
  }
  if (dist) *dist = bd;
  return best;
}

}  // namespace

KmeansModel lloyd_fit(const Matrix& X, std::size_t K, std::size_t iters, std::uint64_t seed, LloydReport* report) {
  KmeansModel m;
  m.K = K;
  m.D = X.cols;
  m.centers = kmeanspp_init(X, K, seed);
  LloydReport rep;
  rep.iterations_requested = iters;
  std::vector<std::size_t> assign(X.rows, K);
  std::vector<double> dist(X.rows);
  for (std::size_t it = 0; it < iters; ++it) {
    // Every requested round runs; rounds after convergence leave the centers unchanged.
    double inertia = 0.0;
    for (std::size_t i = 0; i < X.rows; ++i) {
      assign[i] = nearest(m.centers, X.row(i), &dist[i]);
      inertia += dist[i];
    }
    rep.inertia.push_back(inertia);
    ++rep.rounds_run;

    Matrix sums(K, X.cols);
    std::vector<std::size_t> counts(K, 0);
    for (std::size_t i = 0; i < X.rows; ++i) {
      auto s = sums.row(assign[i]);
      const auto x = X.row(i);
      for (std::size_t d = 0; d < X.cols; ++d) s[d] += x[d];
      ++counts[assign[i]];
    }
    for (std::size_t k = 0; k < K; ++k) {
      if (counts[k] == 0) {
        // Empty cluster: move it to the point farthest from its own center.
        std::size_t far = 0;
        for (std::size_t i = 1; i < X.rows; ++i)
          if (dist[i] > dist[far]) far = i;
        std::copy(X.row(far).begin(), X.row(far).end(), m.centers.row(k).begin());
        dist[far] = 0.0;
        ++rep.reseeded;
        continue;
      }
      auto c = m.centers.row(k);
      const auto s = sums.row(k);
      for (std::size_t d = 0; d < X.cols; ++d) c[d] = s[d] / static_cast<double>(counts[k]);
    }
  }
  if (report) *report = std::move(rep);
  return m;
}

std::vector<int> hard_labels(const KmeansModel& model, const Matrix& X) {
  if (X.rows > 0 && X.cols != model.D) throw std::invalid_argument("hard_labels: dimension mismatch");
  std::vector<int> ids(X.rows);
  for (std::size_t i = 0; i < X.rows; ++i) ids[i] = static_cast<int>(nearest(model.centers, X.row(i)));
  return ids;
}

PosteriorSeq one_hot_posteriors(std::span<const int> ids, std::size_t K) {
  PosteriorSeq p;
  p.rows = ids.size();
  p.K = K;
  p.q.assign(p.rows * K, 0.0);
  p.log_q.assign(p.rows * K, -std::numeric_limits<double>::infinity());
  for (std::size_t t = 0; t < ids.size(); ++t) {
    const auto k = static_cast<std::size_t>(ids[t]);
    if (k >= K) throw std::out_of_range("one_hot_posteriors: id out of range");
    p.q[t * K + k] = 1.0;
    p.log_q[t * K + k] = 0.0;
  }
  return p;
}

// ------------------------------------------------------------------------ GMM

std::vector<double> gmm_log_joint(const GmmModel& model, std::span<const double> m) {
  if (m.size() != model.D()) {
    throw std::invalid_argument("gmm_log_posterior: feature dim " + std::to_string(m.size()) +
                                " != model dim " + std::to_string(model.D()));
  }
  const std::size_t D = model.D();
  const double c = -0.5 * static_cast<double>(D) * std::log(2.0 * std::numbers::pi);
  std::vector<double> out(model.K());
  for (std::size_t k = 0; k < model.K(); ++k) {
    double s = 0.0;
    for (std::size_t d = 0; d < D; ++d) {
      const double lv = model.log_var(k, d);
      const double diff = m[d] - model.mu(k, d);
      s += lv + diff * diff / std::exp(lv);
    }
    out[k] = model.log_pi()[k] + c - 0.5 * s;
  }
  return out;
}

std::vector<double> gmm_log_posterior(const GmmModel& model, std::span<const double> m) {
  auto lj = gmm_log_joint(model, m);
  const double lse = logsumexp(lj);
  for (double& v : lj) v -= lse;
  return lj;
}

double gmm_mean_log_likelihood(const GmmModel& model, const Matrix& X) {
  if (X.rows == 0) return 0.0;
  double s = 0.0;
  for (std::size_t i = 0; i < X.rows; ++i) s += logsumexp(gmm_log_joint(model, X.row(i)));
  return s / static_cast<double>(X.rows);
}

PosteriorSeq chunked_soft_assign(const GmmModel& model, const Matrix& X, std::size_t batch_size,
                                 std::size_t chunk_k) {
  if (batch_size == 0 || chunk_k == 0) throw std::invalid_argument("chunked_soft_assign: sizes must be >= 1");
  PosteriorSeq out;
  out.rows = X.rows;
  out.K = model.K();
  if (X.rows == 0) return out;
  if (X.cols != model.D()) throw std::invalid_argument("chunked_soft_assign: dimension mismatch");
  const std::size_t K = model.K(), D = model.D();
  out.q.resize(X.rows * K);
  out.log_q.resize(X.rows * K);
  const double c = -0.5 * static_cast<double>(D) * std::log(2.0 * std::numbers::pi);
  std::vector<double> logp;
  for (std::size_t n0 = 0; n0 < X.rows; n0 += batch_size) {
    const std::size_t n1 = std::min(X.rows, n0 + batch_size);
    logp.assign((n1 - n0) * K, 0.0);
    for (std::size_t k0 = 0; k0 < K; k0 += chunk_k) {
      const std::size_t k1 = std::min(K, k0 + chunk_k);
      for (std::size_t n = n0; n < n1; ++n) {
        const auto x = X.row(n);
        for (std::size_t k = k0; k < k1; ++k) {
          double s = 0.0;
          for (std::size_t d = 0; d < D; ++d) {
            const double lv = model.log_var(k, d);
            const double diff = x[d] - model.mu(k, d);
            s += lv + diff * diff / std::exp(lv);
          }
          logp[(n - n0) * K + k] = c - 0.5 * s;
        }
      }
    }
    for (std::size_t n = n0; n < n1; ++n) {
      double* row = logp.data() + (n - n0) * K;
      for (std::size_t k = 0; k < K; ++k) row[k] += model.log_pi()[k];
      const double lse = logsumexp({row, K});
      for (std::size_t k = 0; k < K; ++k) {
        out.log_q[n * K + k] = row[k] - lse;
        out.q[n * K + k] = std::exp(row[k] - lse);
      }
    }
  }
  return out;
}

GmmModel gmm_fit_minibatch(const Matrix& X, const GmmFitOptions& opt, GmmFitReport* report, const GmmModel* init) {
  if (opt.K == 0) throw std::invalid_argument("gmm_fit_minibatch: K must be >= 1");
  if (opt.batch == 0) throw std::invalid_argument("gmm_fit_minibatch: batch must be >= 1");
  const std::size_t D = X.cols;
  const std::size_t K = opt.K;
  const double log_floor = std::log(opt.var_floor);
  GmmFitReport rep;

  // Deterministic train / held-out split.
  std::vector<std::size_t> order(X.rows);
  std::iota(order.begin(), order.end(), 0);
  {
    Rng rng = make_rng(opt.seed, {0x73706c74});
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::size_t n_hold = static_cast<std::size_t>(opt.holdout_fraction * static_cast<double>(X.rows));
  if (X.rows - n_hold < K) n_hold = 0;
  Matrix train(X.rows - n_hold, D), hold(n_hold, D);
  for (std::size_t i = 0; i < X.rows; ++i) {
    auto dst = i < n_hold ? hold.row(i) : train.row(i - n_hold);
    std::copy(X.row(order[i]).begin(), X.row(order[i]).end(), dst.begin());
  }

  std::vector<double> logits(K), mu, log_var;
  if (init) {
    if (init->K() != K || init->D() != D) throw std::invalid_argument("gmm_fit_minibatch: init shape mismatch");
    logits = init->log_pi();
    mu = init->mu();
    log_var = init->log_var();
  } else {
    if (train.rows < K) throw std::invalid_argument("gmm_fit_minibatch: fewer training rows than components");
    Matrix c = kmeanspp_init(train, K, opt.seed);
    mu = c.data;
    // Per-cluster variances from a hard assignment to the initial centers.
    std::vector<double> s1(K * D, 0.0), s2(K * D, 0.0);
    std::vector<std::size_t> cnt(K, 0);
    for (std::size_t i = 0; i < train.rows; ++i) {
      const std::size_t k = nearest(c, train.row(i));
      ++cnt[k];
      for (std::size_t d = 0; d < D; ++d) {
        const double v = train.at(i, d);
        s1[k * D + d] += v;
        s2[k * D + d] += v * v;
      }
    }
    std::vector<double> gvar(D, 0.0);
    {
      std::vector<double> g1(D, 0.0), g2(D, 0.0);
      for (std::size_t i = 0; i < train.rows; ++i)
        for (std::size_t d = 0; d < D; ++d) {
          g1[d] += train.at(i, d);
          g2[d] += train.at(i, d) * train.at(i, d);
        }
      const auto n = static_cast<double>(train.rows);
      for (std::size_t d = 0; d < D; ++d) gvar[d] = std::max(g2[d] / n - (g1[d] / n) * (g1[d] / n), opt.var_floor);
    }
    log_var.resize(K * D);
    for (std::size_t k = 0; k < K; ++k) {
      for (std::size_t d = 0; d < D; ++d) {
        double v = gvar[d];
        if (cnt[k] >= 2) {
          const auto n = static_cast<double>(cnt[k]);
          const double m1 = s1[k * D + d] / n;
          v = s2[k * D + d] / n - m1 * m1;
        }
        log_var[k * D + d] = std::log(std::max(v, opt.var_floor));
      }
    }
    std::fill(logits.begin(), logits.end(), 0.0);
  }

  auto make_model = [&](bool normalize) {
    GmmModel m(K, D);
    std::vector<double> lp = logits;
    if (normalize) {
      const double lse = logsumexp(lp);
      for (double& v : lp) v -= lse;
    }
    m.set_log_pi(std::move(lp));
    m.set_mu(mu);
    m.set_log_var(log_var);
    return m;
  };

  const std::size_t per_epoch = (train.rows + opt.batch - 1) / opt.batch;
  const std::size_t total_steps = opt.epochs * per_epoch;
  std::vector<double> g_logits(K), g_mu(K * D), g_lv(K * D), r(K), inv_var(K * D);
  std::vector<std::size_t> perm(train.rows);
  std::iota(perm.begin(), perm.end(), 0);
  std::size_t step = 0;
  std::size_t decreasing = 0;
  bool warned = false;
  const bool frozen_lr = opt.lr_max == 0.0 && opt.lr_min == 0.0;

  for (std::size_t epoch = 0; epoch < opt.epochs && !frozen_lr; ++epoch) {
    Rng rng = make_rng(opt.seed, {0x65706f63, epoch});
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t b0 = 0; b0 < train.rows; b0 += opt.batch, ++step) {
      const std::size_t b1 = std::min(train.rows, b0 + opt.batch);
      const double frac = total_steps > 1 ? static_cast<double>(step) / static_cast<double>(total_steps - 1) : 0.0;
      const double lr = opt.lr_min + 0.5 * (opt.lr_max - opt.lr_min) * (1.0 + std::cos(std::numbers::pi * frac));

      const GmmModel cur = make_model(true);
      for (std::size_t i = 0; i < K * D; ++i) inv_var[i] = std::exp(-log_var[i]);
      std::fill(g_logits.begin(), g_logits.end(), 0.0);
      std::fill(g_mu.begin(), g_mu.end(), 0.0);
      std::fill(g_lv.begin(), g_lv.end(), 0.0);
      for (std::size_t bi = b0; bi < b1; ++bi) {
        const auto x = train.row(perm[bi]);
        const auto lq = gmm_log_posterior(cur, x);
        for (std::size_t k = 0; k < K; ++k) {
          r[k] = std::exp(lq[k]);
          g_logits[k] += r[k] - std::exp(cur.log_pi()[k]);
          for (std::size_t d = 0; d < D; ++d) {
            const double diff = x[d] - mu[k * D + d];
            const double z = diff * inv_var[k * D + d];
            g_mu[k * D + d] += r[k] * z;
            g_lv[k * D + d] += 0.5 * r[k] * (diff * z - 1.0);
          }
        }
      }
      const double inv_b = 1.0 / static_cast<double>(b1 - b0);
      for (std::size_t k = 0; k < K; ++k) logits[k] += lr * g_logits[k] * inv_b;
      for (std::size_t i = 0; i < K * D; ++i) {
        mu[i] += lr * g_mu[i] * inv_b;
        log_var[i] += lr * g_lv[i] * inv_b;
        if (log_var[i] < log_floor) {
          log_var[i] = log_floor;
          ++rep.var_clamps;
        }
      }
    }
    if (hold.rows > 0) {
      const double ll = gmm_mean_log_likelihood(make_model(true), hold);
      if (!rep.heldout_ll.empty() && ll < rep.heldout_ll.back()) {
        ++decreasing;
      } else {
        decreasing = 0;
      }
      rep.heldout_ll.push_back(ll);
      if (decreasing >= 3 && !warned) {
        rep.warnings.push_back("held-out log-likelihood decreased for 3 consecutive epochs (epoch " +
                               std::to_string(epoch) + ")");
        std::cerr << "warning: gmm fit: " << rep.warnings.back() << '\n';
        warned = true;
      }
    }
  }
  rep.steps = step;
  GmmModel out = (frozen_lr && init) ? *init : make_model(!frozen_lr);
  if (hold.rows > 0) rep.final_heldout_ll = gmm_mean_log_likelihood(out, hold);
  if (report) *report = std::move(rep);
  return out;
}

// ----------------------------------------------------------------------- I/O

void save_gmm(const std::filesystem::path& path, const GmmModel& model, const nlohmann::json& meta) {
  binio::Writer w;
  w.magic(kGmmMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.K()));
  w.u32(static_cast<std::uint32_t>(model.D()));
  w.f64s(model.log_pi());
  w.f64s(model.mu());
  w.f64s(model.log_var());
  w.save(path);
  write_meta(path, meta);
}

GmmModel load_gmm(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kGmmMagic);
  if (r.u32() != kFormatVersion) throw binio::FormatError("unsupported GMM file version in " + path.string());
  const std::size_t K = r.u32(), D = r.u32();
  GmmModel m(K, D);
  m.set_log_pi(r.f64s(K));
  m.set_mu(r.f64s(K * D));
  m.set_log_var(r.f64s(K * D));
  if (!r.at_end()) throw binio::FormatError("trailing bytes in " + path.string());
  m.freeze();
  return m;
}

void save_kmeans(const std::filesystem::path& path, const KmeansModel& model, const nlohmann::json& meta) {
  binio::Writer w;
  w.magic(kKmeansMagic);
  w.u32(kFormatVersion);
  w.u32(static_cast<std::uint32_t>(model.K));
  w.u32(static_cast<std::uint32_t>(model.D));
  w.f64s(model.centers.data);
  w.save(path);
  write_meta(path, meta);
}

KmeansModel load_kmeans(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  r.expect_magic(kKmeansMagic);
  if (r.u32() != kFormatVersion) throw binio::FormatError("unsupported k-means file version in " + path.string());
  KmeansModel m;
  m.K = r.u32();
  m.D = r.u32();
  m.centers = Matrix(m.K, m.D);
  m.centers.data = r.f64s(m.K * m.D);
  if (!r.at_end()) throw binio::FormatError("trailing bytes in " + path.string());
  return m;
}

TargetModel load_target_model(const std::filesystem::path& path) {
  auto r = binio::Reader::from_file(path);
  std::string magic(8, '\0');
  r.bytes(magic.data(), magic.size());
  if (magic == kGmmMagic) return load_gmm(path);
  if (magic == kKmeansMagic) return load_kmeans(path);
  throw binio::FormatError("unrecognized target model file " + path.string());
}

}  // namespace gmmjepa::cluster
