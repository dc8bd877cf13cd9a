#pragma once

// Correlation, split-half reliability, reliability-adjusted neural
// predictivity, and the summary statistics used to aggregate it.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "msim/array3.hpp"
#include "msim/error.hpp"
#include "msim/regress.hpp"
#include "msim/rng.hpp"

namespace msim::metrics {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

// ---------------------------------------------------------------------------
// Correlation

/// Pearson r; NaN when either input has zero variance or contains NaN.
inline double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw DimensionMismatch("pearson: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  if (a.size() < 2) throw ConfigError("pearson needs at least 2 values");
  const double n = static_cast<double>(a.size());
  double ma = 0, mb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    ma += a[i];
    mb += b[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0, qa = 0, qb = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma, db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
    qa += a[i] * a[i];
    qb += b[i] * b[i];
  }
  // Spread at rounding level of the values themselves counts as constant.
  constexpr double tiny = 1e-28;
  if (!(saa > tiny * qa) || !(sbb > tiny * qb)) return kNaN;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

inline double pearson(const VectorXd& a, const VectorXd& b) {
  return pearson(std::span<const double>(a.data(), static_cast<std::size_t>(a.size())),
                 std::span<const double>(b.data(), static_cast<std::size_t>(b.size())));
}

/// Pearson over the pairs where both entries are finite; NaN if fewer than 2.
inline double pearson_complete(const VectorXd& a, const VectorXd& b) {
  if (a.size() != b.size()) throw DimensionMismatch("pearson: length mismatch");
  std::vector<double> x, y;
  x.reserve(static_cast<std::size_t>(a.size()));
  y.reserve(static_cast<std::size_t>(a.size()));
  for (Index i = 0; i < a.size(); ++i)
    if (std::isfinite(a(i)) && std::isfinite(b(i))) {
      x.push_back(a(i));
      y.push_back(b(i));
    }
  if (x.size() < 2) return kNaN;
  return pearson(x, y);
}

/// 2r / (1 + r); NaN for r <= -1 or NaN input.
inline double spearman_brown(double r) {
  if (!(r > -1.0)) return kNaN;
  return 2.0 * r / (1.0 + r);
}

// ---------------------------------------------------------------------------
// Trial averaging and split halves

/// Trials [trials x frames x units] with at least one finite entry.
inline std::vector<std::size_t> usable_trials(const Array3& trials) {
  std::vector<std::size_t> out;
  for (std::size_t t = 0; t < trials.dim(0); ++t) {
    const auto s = trials.slab(t);
    if (s.size() && !s.array().isNaN().all()) out.push_back(t);
  }
  return out;
}

/// NaN-aware mean of the listed trials; [frames x units]. An entry with no
/// finite value among them is NaN.
inline MatrixXd trial_mean(const Array3& trials, const std::vector<std::size_t>& which) {
  const auto F = static_cast<Index>(trials.dim(1)), U = static_cast<Index>(trials.dim(2));
  MatrixXd sum = MatrixXd::Zero(F, U), count = MatrixXd::Zero(F, U);
  for (auto t : which) {
    const auto s = trials.slab(t);
    for (Index j = 0; j < U; ++j)
      for (Index i = 0; i < F; ++i) {
        const double v = s(i, j);
        if (!std::isnan(v)) {
          sum(i, j) += v;
          count(i, j) += 1;
        }
      }
  }
  return sum.binaryExpr(count, [](double s, double c) { return c > 0 ? s / c : kNaN; });
}

inline MatrixXd trial_mean(const Array3& trials) { return trial_mean(trials, usable_trials(trials)); }

struct HalfSplit {
  std::vector<std::size_t> first, second;  // trial indices, ascending
  MatrixXd avg1, avg2;                     // [frames x units]
};

/// One random split of the usable trials into disjoint halves; with an odd
/// count the second half holds the extra trial.
inline HalfSplit split_half_once(const Array3& trials, Rng& rng) {
  auto use = usable_trials(trials);
  if (use.size() < 2)
    throw DataError("split-half needs at least 2 usable trials, got " + std::to_string(use.size()));
  rng.shuffle(std::span<std::size_t>(use));
  HalfSplit h;
  const std::size_t half = use.size() / 2;
  h.first.assign(use.begin(), use.begin() + static_cast<std::ptrdiff_t>(half));
  h.second.assign(use.begin() + static_cast<std::ptrdiff_t>(half), use.end());
  std::sort(h.first.begin(), h.first.end());
  std::sort(h.second.begin(), h.second.end());
  h.avg1 = trial_mean(trials, h.first);
  h.avg2 = trial_mean(trials, h.second);
  return h;
}

/// n_repeats independent split halves, draw r seeded from (seed, r).
inline std::vector<HalfSplit> split_half(const Array3& trials, std::uint64_t seed, std::size_t n_repeats) {
  std::vector<HalfSplit> out;
  out.reserve(n_repeats);
  for (std::size_t r = 0; r < n_repeats; ++r) {
    Rng rng(seed, {0x68616c66ULL, r});
    out.push_back(split_half_once(trials, rng));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Neural predictivity

/// Per-condition trial tensors [trials x frames x units], already restricted
/// to the frames being scored. Deterministic sources (models) have one trial.
struct TrialSet {
  std::vector<Array3> conditions;
  bool deterministic = false;

  std::size_t n_units() const { return conditions.empty() ? 0 : conditions.front().dim(2); }
};

inline TrialSet deterministic_set(const std::vector<MatrixXd>& features) {
  TrialSet ts;
  ts.deterministic = true;
  for (const auto& f : features) {
    Array3 a(1, static_cast<std::size_t>(f.rows()), static_cast<std::size_t>(f.cols()));
    a.slab(0) = f;
    ts.conditions.push_back(std::move(a));
  }
  return ts;
}

/// Train/test partitions of condition indices.
struct SplitPlan {
  std::vector<std::vector<std::size_t>> train, test;
  std::uint64_t seed = 0;

  std::size_t size() const { return train.size(); }
};

/// Each split shuffles the conditions with Rng(seed, {split}); the first
/// floor(n/2) go to train.
inline SplitPlan make_split_plan(std::size_t n_conditions, std::size_t n_splits = 5, std::uint64_t seed = 0) {
  if (n_conditions < 4) throw ConfigError("train/test splits need at least 4 conditions");
  if (n_splits < 1) throw ConfigError("need at least one train/test split");
  SplitPlan p;
  p.seed = seed;
  for (std::size_t s = 0; s < n_splits; ++s) {
    std::vector<std::size_t> idx(n_conditions);
    for (std::size_t i = 0; i < n_conditions; ++i) idx[i] = i;
    Rng rng(seed, {0x73706c74ULL, s});
    rng.shuffle(std::span<std::size_t>(idx));
    const std::size_t half = n_conditions / 2;
    std::vector<std::size_t> tr(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(half));
    std::vector<std::size_t> te(idx.begin() + static_cast<std::ptrdiff_t>(half), idx.end());
    std::sort(tr.begin(), tr.end());
    std::sort(te.begin(), te.end());
    p.train.push_back(std::move(tr));
    p.test.push_back(std::move(te));
  }
  return p;
}

struct NpOptions {
  std::vector<double> lambda_grid = regress::default_lambda_grid();
  std::size_t inner_folds = 5;
  std::size_t n_repeats = 10;
  std::uint64_t seed = 0;
  regress::RidgeOptions ridge;
  std::optional<double> fixed_lambda;  // skip the inner search
};

struct PredictivityResult {
  std::vector<double> np;                   // per target unit, mean over finite splits
  std::vector<std::vector<double>> per_split;  // [unit][split]
  std::vector<bool> flagged;                // NaN NP: non-positive reliability or excluded unit
  std::vector<double> lambdas;              // chosen per split
  std::size_t n_excluded = 0;               // target units with no usable responses
  std::size_t n_excluded_source = 0;        // source features dropped for the same reason
  std::vector<std::string> animal;          // optional labels for export
  std::vector<std::size_t> unit_id;

  std::size_t n_flagged() const { return static_cast<std::size_t>(std::count(flagged.begin(), flagged.end(), true)); }
};

namespace detail {

inline MatrixXd stack_rows(const std::vector<MatrixXd>& parts, const std::vector<std::size_t>& which,
                           const std::vector<Index>& cols) {
  Index rows = 0;
  for (auto c : which) rows += parts[c].rows();
  MatrixXd out(rows, static_cast<Index>(cols.size()));
  Index r = 0;
  for (auto c : which) {
    const auto& m = parts[c];
    for (std::size_t j = 0; j < cols.size(); ++j) out.block(r, static_cast<Index>(j), m.rows(), 1) = m.col(cols[j]);
    r += m.rows();
  }
  return out;
}

inline std::vector<Index> finite_columns(const std::vector<MatrixXd>& parts, Index n_cols) {
  std::vector<Index> cols;
  for (Index j = 0; j < n_cols; ++j) {
    bool ok = true;
    for (const auto& m : parts)
      if (!m.col(j).allFinite()) {
        ok = false;
        break;
      }
    if (ok) cols.push_back(j);
  }
  return cols;
}

}  // namespace detail

/// Per target unit, on each split's held-out conditions:
///   NP = Corr(L(S), A) / sqrt(SB(Corr(L(S1), L(S2))) * SB(Corr(A1, A2)))
/// with L a ridge map fit on the training conditions (lambda from grouped
/// k-fold CV over training conditions), A the trial average, and (S1, S2),
/// (A1, A2) split-half averages; a deterministic side uses its single
/// response for both halves. A draw whose radicand is not positive gives
/// NaN; NP averages the finite draws, then the finite splits.
inline PredictivityResult neural_predictivity(const TrialSet& source, const TrialSet& target, const SplitPlan& plan,
                                              const NpOptions& opt = {}) {
  const std::size_t C = target.conditions.size();
  if (source.conditions.size() != C)
    throw AlignmentError("source has " + std::to_string(source.conditions.size()) + " conditions, target has " +
                         std::to_string(C));
  if (C == 0) throw EmptyDataset("no conditions to score");
  for (std::size_t c = 0; c < C; ++c)
    if (source.conditions[c].dim(1) != target.conditions[c].dim(1))
      throw AlignmentError("condition " + std::to_string(c) + ": source has " +
                           std::to_string(source.conditions[c].dim(1)) + " frames, target has " +
                           std::to_string(target.conditions[c].dim(1)));
  if (opt.n_repeats < 1) throw ConfigError("n_repeats must be >= 1");

  const auto Q = static_cast<Index>(target.n_units());
  const auto P = static_cast<Index>(source.n_units());
  std::vector<MatrixXd> s_mean(C), a_mean(C);
  for (std::size_t c = 0; c < C; ++c) {
    s_mean[c] = trial_mean(source.conditions[c]);
    a_mean[c] = trial_mean(target.conditions[c]);
  }
  const auto s_cols = detail::finite_columns(s_mean, P);
  const auto a_cols = detail::finite_columns(a_mean, Q);
  if (s_cols.empty()) throw DataError("source has no feature with finite responses in every condition");

  PredictivityResult res;
  res.n_excluded = static_cast<std::size_t>(Q) - a_cols.size();
  res.n_excluded_source = static_cast<std::size_t>(P) - s_cols.size();
  res.per_split.assign(static_cast<std::size_t>(Q), std::vector<double>(plan.size(), kNaN));

  for (std::size_t sp = 0; sp < plan.size() && !a_cols.empty(); ++sp) {
    const auto& tr = plan.train[sp];
    const auto& te = plan.test[sp];
    const MatrixXd X = detail::stack_rows(s_mean, tr, s_cols);
    const MatrixXd Y = detail::stack_rows(a_mean, tr, a_cols);
    regress::RidgeSolution L;
    if (opt.fixed_lambda) {
      L = regress::ridge_fit(X, Y, *opt.fixed_lambda, opt.ridge);
    } else {
      std::vector<std::int64_t> groups;
      for (auto c : tr) groups.insert(groups.end(), static_cast<std::size_t>(s_mean[c].rows()), static_cast<std::int64_t>(c));
      const auto folds = regress::make_folds(groups, opt.inner_folds, regress::FoldKind::grouped,
                                             derive_key({opt.seed, 0x696e6eULL, sp}));
      L = regress::ridge_cv(X, Y, opt.lambda_grid, folds, regress::neg_mse_score, opt.ridge).solution;
    }
    res.lambdas.push_back(L.lambda);

    const MatrixXd pred = L.predict(detail::stack_rows(s_mean, te, s_cols));
    const MatrixXd truth = detail::stack_rows(a_mean, te, a_cols);
    VectorXd num(static_cast<Index>(a_cols.size()));
    for (Index u = 0; u < num.size(); ++u) num(u) = pearson_complete(pred.col(u), truth.col(u));

    VectorXd np_sum = VectorXd::Zero(num.size()), np_count = VectorXd::Zero(num.size());
    for (std::size_t r = 0; r < opt.n_repeats; ++r) {
      std::vector<MatrixXd> a1(C), a2(C), s1(C), s2(C);
      for (auto c : te) {
        if (target.deterministic) {
          a1[c] = a_mean[c];
          a2[c] = a_mean[c];
        } else {
          Rng ra(opt.seed, {0x68616c66ULL, sp, r, c, 0});
          auto ha = split_half_once(target.conditions[c], ra);
          a1[c] = std::move(ha.avg1);
          a2[c] = std::move(ha.avg2);
        }
        if (source.deterministic) {
          s1[c] = s_mean[c];
        } else {
          Rng rs(opt.seed, {0x68616c66ULL, sp, r, c, 1});
          auto hs = split_half_once(source.conditions[c], rs);
          s1[c] = std::move(hs.avg1);
          s2[c] = std::move(hs.avg2);
        }
      }
      const MatrixXd A1 = detail::stack_rows(a1, te, a_cols), A2 = detail::stack_rows(a2, te, a_cols);
      const MatrixXd P1 = L.predict(detail::stack_rows(s1, te, s_cols));
      const MatrixXd P2 = source.deterministic ? P1 : L.predict(detail::stack_rows(s2, te, s_cols));
      for (Index u = 0; u < num.size(); ++u) {
        const double rel_s = source.deterministic ? spearman_brown(pearson_complete(P1.col(u), P1.col(u)))
                                                  : spearman_brown(pearson_complete(P1.col(u), P2.col(u)));
        const double rel_a = spearman_brown(pearson_complete(A1.col(u), A2.col(u)));
        const double radicand = rel_s * rel_a;
        if (radicand > 0 && std::isfinite(num(u))) {
          np_sum(u) += num(u) / std::sqrt(radicand);
          np_count(u) += 1;
        }
      }
    }
    for (std::size_t k = 0; k < a_cols.size(); ++k) {
      const auto u = static_cast<std::size_t>(a_cols[k]);
      const auto ki = static_cast<Index>(k);
      res.per_split[u][sp] = np_count(ki) > 0 ? np_sum(ki) / np_count(ki) : kNaN;
    }
  }

  res.np.assign(static_cast<std::size_t>(Q), kNaN);
  res.flagged.assign(static_cast<std::size_t>(Q), true);
  for (std::size_t u = 0; u < static_cast<std::size_t>(Q); ++u) {
    double sum = 0, n = 0;
    for (double v : res.per_split[u])
      if (std::isfinite(v)) {
        sum += v;
        n += 1;
      }
    if (n > 0) {
      res.np[u] = sum / n;
      res.flagged[u] = false;
    }
  }
  res.unit_id.resize(static_cast<std::size_t>(Q));
  for (std::size_t u = 0; u < res.unit_id.size(); ++u) res.unit_id[u] = u;
  return res;
}

/// Concatenates per-unit results (e.g. two animals or two directions).
inline PredictivityResult concat(const std::vector<PredictivityResult>& parts) {
  PredictivityResult out;
  for (const auto& p : parts) {
    out.np.insert(out.np.end(), p.np.begin(), p.np.end());
    out.per_split.insert(out.per_split.end(), p.per_split.begin(), p.per_split.end());
    out.flagged.insert(out.flagged.end(), p.flagged.begin(), p.flagged.end());
    out.lambdas.insert(out.lambdas.end(), p.lambdas.begin(), p.lambdas.end());
    out.animal.insert(out.animal.end(), p.animal.begin(), p.animal.end());
    out.unit_id.insert(out.unit_id.end(), p.unit_id.begin(), p.unit_id.end());
    out.n_excluded += p.n_excluded;
    out.n_excluded_source += p.n_excluded_source;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Aggregation

struct MedianSem {
  double median = kNaN;
  double sem = kNaN;
  std::size_t n = 0;      // finite values used
  std::size_t n_nan = 0;  // NaN values skipped
};

/// Median and standard error (sample std, ddof = 1, over sqrt(n)) of the
/// finite values. A single value has sem 0.
inline MedianSem median_sem(std::span<const double> values) {
  MedianSem out;
  std::vector<double> v;
  for (double x : values) {
    if (std::isnan(x))
      ++out.n_nan;
    else
      v.push_back(x);
  }
  out.n = v.size();
  if (v.empty()) return out;
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  out.median = v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  if (v.size() == 1) {
    out.sem = 0.0;
    return out;
  }
  double mean = 0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0;
  for (double x : v) ss += (x - mean) * (x - mean);
  out.sem = std::sqrt(ss / static_cast<double>(v.size() - 1)) / std::sqrt(static_cast<double>(v.size()));
  return out;
}

struct WeightedStats {
  double weighted_mean = kNaN;
  double variance = kNaN;
  double effective_sample_size = kNaN;
  double weighted_sem = kNaN;
};

/// weighted_mean = sum(w x) / sum(w)
/// variance = sum(w (x - mean)^2) / sum(w)
/// effective_sample_size = sum(w)^2 / sum(w^2)
/// weighted_sem = sqrt(variance / effective_sample_size)
inline WeightedStats weighted_mean_sem(std::span<const double> x, std::span<const double> w) {
  if (x.size() != w.size())
    throw DimensionMismatch("weighted stats: " + std::to_string(x.size()) + " values, " + std::to_string(w.size()) +
                            " weights");
  if (x.empty()) throw EmptyDataset("weighted stats of an empty set");
  double sw = 0, sw2 = 0, swx = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(w[i] > 0)) throw ConfigError("weights must be positive");
    sw += w[i];
    sw2 += w[i] * w[i];
    swx += w[i] * x[i];
  }
  WeightedStats s;
  s.weighted_mean = swx / sw;
  double sv = 0;
  for (std::size_t i = 0; i < x.size(); ++i) sv += w[i] * (x[i] - s.weighted_mean) * (x[i] - s.weighted_mean);
  s.variance = sv / sw;
  s.effective_sample_size = sw * sw / sw2;
  s.weighted_sem = std::sqrt(s.variance / s.effective_sample_size);
  return s;
}

}  // namespace msim::metrics
