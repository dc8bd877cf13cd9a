#pragma once

// Ridge and logistic regression plus the k-fold splitters used to
// cross-validate them.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "msim/error.hpp"
#include "msim/rng.hpp"

namespace msim::regress {

using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

// ---------------------------------------------------------------------------
// Standardization

/// Column means and scales from training rows; constant columns get scale 1.
struct Standardizer {
  Eigen::RowVectorXd mean;
  Eigen::RowVectorXd scale;

  static Standardizer fit(const MatrixXd& X, bool enabled = true) {
    Standardizer s;
    const Index p = X.cols();
    s.mean = Eigen::RowVectorXd::Zero(p);
    s.scale = Eigen::RowVectorXd::Ones(p);
    if (!enabled || X.rows() == 0) return s;
    s.mean = X.colwise().mean();
    for (Index j = 0; j < p; ++j) {
      const double sd = std::sqrt((X.col(j).array() - s.mean(j)).square().mean());
      if (sd > 0 && std::isfinite(sd)) s.scale(j) = sd;
    }
    return s;
  }

  MatrixXd apply(const MatrixXd& X) const {
    return (X.rowwise() - mean).array().rowwise() / scale.array();
  }
};

namespace detail {

inline void require_finite(const MatrixXd& m, const char* what) {
  if (!m.allFinite()) throw NumericalError(std::string(what) + " contains non-finite values");
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Ridge

struct RidgeSolution {
  MatrixXd W;          // [targets x features], acts on raw features
  VectorXd intercept;  // [targets]
  double lambda = 0.0;

  MatrixXd predict(const MatrixXd& X) const {
    if (X.cols() != W.cols())
      throw DimensionMismatch("ridge expects " + std::to_string(W.cols()) + " features, got " +
                              std::to_string(X.cols()));
    return (X * W.transpose()).rowwise() + intercept.transpose();
  }
};

struct RidgeOptions {
  bool standardize = true;
};

/// Centered (optionally standardized) SVD of one training set. Solving for
/// another lambda reuses the factorization.
class RidgeFactor {
 public:
  RidgeFactor(const MatrixXd& X, const MatrixXd& Y, const RidgeOptions& opt = {}) {
    if (X.rows() < 1) throw EmptyDataset("ridge needs at least one sample");
    if (X.rows() != Y.rows())
      throw DimensionMismatch("ridge: X has " + std::to_string(X.rows()) + " rows, Y has " +
                              std::to_string(Y.rows()));
    detail::require_finite(X, "ridge X");
    detail::require_finite(Y, "ridge Y");
    st_ = Standardizer::fit(X, opt.standardize);
    x_mean_ = X.colwise().mean();
    y_mean_ = Y.colwise().mean();
    MatrixXd Z = X.rowwise() - x_mean_;
    Z = Z.array().rowwise() / st_.scale.array();
    Eigen::BDCSVD<MatrixXd> svd(Z, Eigen::ComputeThinU | Eigen::ComputeThinV);
    s_ = svd.singularValues();
    V_ = svd.matrixV();
    UtY_ = svd.matrixU().transpose() * (Y.rowwise() - y_mean_);
    cutoff_ = s_.size() ? s_(0) * 1e-13 * static_cast<double>(std::max(Z.rows(), Z.cols())) : 0.0;
  }

  /// Minimizes ||Y - Z W - 1 c^T||^2 + lambda ||W||^2 where Z is X, or X
  /// standardized; the returned W is mapped back onto raw X.
  RidgeSolution solve(double lambda) const {
    if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("ridge lambda must be finite and >= 0");
    VectorXd shrink(s_.size());
    for (Index i = 0; i < s_.size(); ++i) {
      const double si = s_(i);
      shrink(i) = (lambda == 0.0 && si <= cutoff_) ? 0.0 : si / (si * si + lambda);
    }
    const MatrixXd B = V_ * (shrink.asDiagonal() * UtY_);  // [features x targets], standardized space
    RidgeSolution sol;
    sol.lambda = lambda;
    sol.W = (B.array().colwise() / st_.scale.transpose().array()).matrix().transpose();
    sol.intercept = (y_mean_ - x_mean_ * sol.W.transpose()).transpose();
    detail::require_finite(sol.W, "ridge solution");
    return sol;
  }

 private:
  Standardizer st_;
  Eigen::RowVectorXd x_mean_, y_mean_;
  VectorXd s_;
  MatrixXd V_, UtY_;
  double cutoff_ = 0.0;
};

inline RidgeSolution ridge_fit(const MatrixXd& X, const MatrixXd& Y, double lambda, const RidgeOptions& opt = {}) {
  if (!(lambda >= 0) || !std::isfinite(lambda)) throw ConfigError("ridge lambda must be finite and >= 0");
  return RidgeFactor(X, Y, opt).solve(lambda);
}

// ---------------------------------------------------------------------------
// Folds

enum class FoldKind { stratified, grouped };

struct FoldPlan {
  FoldKind kind = FoldKind::stratified;
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> folds;  // held-out indices, ascending
  std::vector<std::int64_t> labels;             // class or group per sample

  std::size_t k() const { return folds.size(); }
  const std::vector<std::size_t>& test(std::size_t f) const { return folds.at(f); }
  std::vector<std::size_t> train(std::size_t f) const {
    std::vector<bool> held(n, false);
    for (auto i : folds.at(f)) held[i] = true;
    std::vector<std::size_t> out;
    out.reserve(n - folds[f].size());
    for (std::size_t i = 0; i < n; ++i)
      if (!held[i]) out.push_back(i);
    return out;
  }
};

/// Stratified: each class is shuffled and dealt round-robin, continuing the
/// deal across classes so fold sizes differ by at most one. Grouped: groups are
/// shuffled, ordered largest first, and each goes to the currently smallest fold.
inline FoldPlan make_folds(const std::vector<std::int64_t>& labels, std::size_t k, FoldKind kind,
                           std::uint64_t seed) {
  if (k < 2) throw ConfigError("k-fold needs k >= 2");
  FoldPlan plan;
  plan.kind = kind;
  plan.n = labels.size();
  plan.labels = labels;
  plan.folds.assign(k, {});

  std::map<std::int64_t, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);

  if (kind == FoldKind::stratified) {
    if (labels.size() < k)
      throw ConfigError("stratified " + std::to_string(k) + "-fold needs at least k samples, got " +
                        std::to_string(labels.size()));
    std::size_t deal = 0;
    std::uint64_t ci = 0;
    for (auto& [label, idx] : members) {
      Rng rng(seed, {0x737472ULL, ci++});
      rng.shuffle(std::span<std::size_t>(idx));
      for (auto i : idx) plan.folds[deal++ % k].push_back(i);
    }
  } else {
    if (members.size() < k)
      throw ConfigError("grouped " + std::to_string(k) + "-fold needs at least k groups, got " +
                        std::to_string(members.size()));
    std::vector<std::int64_t> groups;
    for (const auto& [g, idx] : members) groups.push_back(g);
    Rng rng(seed, {0x67727075ULL});
    rng.shuffle(std::span<std::int64_t>(groups));
    std::stable_sort(groups.begin(), groups.end(),
                     [&](auto a, auto b) { return members[a].size() > members[b].size(); });
    for (auto g : groups) {
      std::size_t best = 0;
      for (std::size_t f = 1; f < k; ++f)
        if (plan.folds[f].size() < plan.folds[best].size()) best = f;
      auto& fold = plan.folds[best];
      fold.insert(fold.end(), members[g].begin(), members[g].end());
    }
  }
  for (auto& f : plan.folds) std::sort(f.begin(), f.end());
  return plan;
}

// ---------------------------------------------------------------------------
// Cross-validated ridge

/// 9 points log-spaced over [1e-4, 1e4].
inline std::vector<double> default_lambda_grid() {
  std::vector<double> g;
  for (int e = -4; e <= 4; ++e) g.push_back(std::pow(10.0, e));
  return g;
}

/// Higher is better. Receives held-out predictions and truth, [n x targets].
using ScoreFn = std::function<double(const MatrixXd& pred, const MatrixXd& truth)>;

inline double neg_mse_score(const MatrixXd& pred, const MatrixXd& truth) {
  return -(pred - truth).squaredNorm() / static_cast<double>(truth.size());
}

inline MatrixXd take_rows(const MatrixXd& M, const std::vector<std::size_t>& rows) {
  MatrixXd out(static_cast<Index>(rows.size()), M.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = M.row(static_cast<Index>(rows[i]));
  return out;
}

struct RidgeCvResult {
  double lambda = 0.0;
  RidgeSolution solution;
  std::vector<double> grid;    // deduplicated, ascending
  std::vector<double> scores;  // mean held-fold score per grid point
};

/// Picks the lambda with the best mean held-fold score (exact ties go to the
/// larger lambda) and refits on every sample.
inline RidgeCvResult ridge_cv(const MatrixXd& X, const MatrixXd& Y, std::vector<double> grid, const FoldPlan& plan,
                              const ScoreFn& score = neg_mse_score, const RidgeOptions& opt = {}) {
  if (grid.empty()) throw ConfigError("ridge_cv: empty lambda grid");
  if (plan.n != static_cast<std::size_t>(X.rows()))
    throw DimensionMismatch("fold plan covers " + std::to_string(plan.n) + " samples, X has " +
                            std::to_string(X.rows()));
  for (std::size_t f = 0; f < plan.k(); ++f) {
    if (plan.test(f).size() < 2) throw ConfigError("ridge_cv: fold " + std::to_string(f) + " has fewer than 2 samples");
    if (plan.n - plan.test(f).size() < 2)
      throw ConfigError("ridge_cv: fold " + std::to_string(f) + " leaves fewer than 2 training samples");
  }
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  RidgeCvResult res;
  res.grid = grid;
  res.scores.assign(grid.size(), 0.0);
  for (std::size_t f = 0; f < plan.k(); ++f) {
    const auto tr = plan.train(f);
    const MatrixXd Xtr = take_rows(X, tr), Ytr = take_rows(Y, tr);
    const MatrixXd Xte = take_rows(X, plan.test(f)), Yte = take_rows(Y, plan.test(f));
    const RidgeFactor factor(Xtr, Ytr, opt);
    for (std::size_t g = 0; g < grid.size(); ++g)
      res.scores[g] += score(factor.solve(grid[g]).predict(Xte), Yte) / static_cast<double>(plan.k());
  }
  std::size_t best = 0;
  for (std::size_t g = 1; g < grid.size(); ++g)
    if (!(res.scores[g] < res.scores[best])) best = g;  // >= keeps the larger lambda on ties
  if (!std::isfinite(res.scores[best])) throw NumericalError("ridge_cv: no finite fold score");
  res.lambda = grid[best];
  res.solution = ridge_fit(X, Y, res.lambda, opt);
  return res;
}

// ---------------------------------------------------------------------------
// Logistic regression

/// Inverse regularization strength; the objective is mean log-loss +
/// ||w||^2 / (2C), so C does not scale with the sample count.
inline std::vector<double> default_c_grid() { return {1e-2, 1e-1, 1e0, 1e1, 1e2, 1e3, 1e4}; }

struct LogisticOptions {
  std::size_t iters = 20000;
  std::vector<double> c_grid = default_c_grid();
  std::size_t folds = 5;
  std::uint64_t seed = 0;
  double cv_tolerance = 1e-6;     // gradient max-norm stop for the CV fits
  double final_tolerance = 1e-10;  // the refit stops early only once stationary
  bool record_loss = false;
};

struct LogisticModel {
  Standardizer standardizer;
  VectorXd w;  // standardized-feature weights
  double b = 0.0;
  double C = 1.0;
  std::size_t iterations = 0;
  std::vector<double> loss_trace;  // objective per iteration when recorded
  std::vector<double> cv_accuracy;  // mean held-fold accuracy per C

  VectorXd decision(const MatrixXd& X) const {
    if (X.cols() != w.size())
      throw DimensionMismatch("classifier expects " + std::to_string(w.size()) + " features, got " +
                              std::to_string(X.cols()));
    return (standardizer.apply(X) * w).array() + b;
  }
  VectorXd predict_proba(const MatrixXd& X) const {
    return decision(X).unaryExpr([](double z) {
      return z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
    });
  }
  /// Hit iff probability > 0.5; an exact 0.5 counts as no-hit.
  std::vector<int> predict(const MatrixXd& X) const {
    const VectorXd p = predict_proba(X);
    std::vector<int> out(static_cast<std::size_t>(p.size()));
    for (Index i = 0; i < p.size(); ++i) out[static_cast<std::size_t>(i)] = p(i) > 0.5 ? 1 : 0;
    return out;
  }
};

namespace detail {

inline double log1pexp(double z) { return z > 0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

/// mean log-loss + ||w||^2 / (2 C n)
inline double logistic_objective(const MatrixXd& Z, const VectorXd& y, const VectorXd& w, double b, double C) {
  const VectorXd z = (Z * w).array() + b;
  double loss = 0;
  for (Index i = 0; i < z.size(); ++i) loss += log1pexp(z(i)) - y(i) * z(i);
  const double n = static_cast<double>(Z.rows());
  return loss / n + w.squaredNorm() / (2.0 * C);
}

struct GdResult {
  VectorXd w;
  double b = 0.0;
  std::size_t iterations = 0;
  std::vector<double> trace;
};

/// Lipschitz constant of the objective's gradient in (w, b): a quarter of the
/// top eigenvalue of [Z 1]^T [Z 1] / n, plus 1/C. Power iteration, so the
/// bound is approached from below; padded by 1%.
inline double logistic_lipschitz(const MatrixXd& Z, double C) {
  const double n = static_cast<double>(Z.rows());
  VectorXd v = VectorXd::Ones(Z.cols() + 1);
  double lam = 0;
  for (int it = 0; it < 100; ++it) {
    const VectorXd zv = Z * v.head(Z.cols()) + VectorXd::Constant(Z.rows(), v(Z.cols()));
    VectorXd u(Z.cols() + 1);
    u.head(Z.cols()) = Z.transpose() * zv / n;
    u(Z.cols()) = zv.sum() / n;
    const double norm = u.norm();
    if (!(norm > 0)) break;
    lam = norm / v.norm();
    v = u / norm;
  }
  return 1.01 * 0.25 * lam + 1.0 / C;
}

/// Full-batch gradient descent with Armijo backtracking. The trial step grows
/// by 2x after each accepted step so the line search stays cheap. Once the
/// objective stops resolving the decrease (rounding), steps of 1/L continue on
/// the gradient alone until it falls below tol.
inline GdResult logistic_gd(const MatrixXd& Z, const VectorXd& y, double C, std::size_t iters, double tol, bool record) {
  const double n = static_cast<double>(Z.rows());
  GdResult r;
  r.w = VectorXd::Zero(Z.cols());
  const double base = std::clamp(y.mean(), 1e-12, 1 - 1e-12);
  r.b = std::log(base / (1 - base));
  double f = logistic_objective(Z, y, r.w, r.b, C);
  double step = 1.0, safe = -1.0;
  for (std::size_t it = 0; it < iters; ++it) {
    const VectorXd z = (Z * r.w).array() + r.b;
    const VectorXd resid = z.unaryExpr([](double v) {
      return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v));
    }) - y;
    const VectorXd gw = Z.transpose() * resid / n + r.w / C;
    const double gb = resid.mean();
    const double gnorm2 = gw.squaredNorm() + gb * gb;
    const double gmax = std::max(gw.size() ? gw.cwiseAbs().maxCoeff() : 0.0, std::abs(gb));
    if (gmax <= tol) break;
    double t = step;
    VectorXd w_new;
    double b_new = 0, f_new = 0;
    bool armijo = false;
    for (int bt = 0; bt < 60 && !armijo; ++bt) {
      w_new = r.w - t * gw;
      b_new = r.b - t * gb;
      f_new = logistic_objective(Z, y, w_new, b_new, C);
      armijo = f_new <= f - 0.5 * t * gnorm2 && f_new < f;
      if (!armijo) t *= 0.5;
    }
    if (!armijo) {
      if (safe < 0) safe = 1.0 / logistic_lipschitz(Z, C);
      t = safe;
      w_new = r.w - t * gw;
      b_new = r.b - t * gb;
      f_new = logistic_objective(Z, y, w_new, b_new, C);
    }
    if (w_new == r.w && b_new == r.b) break;
    r.w = std::move(w_new);
    r.b = b_new;
    f = f_new;
    step = armijo ? t * 2.0 : safe;
    ++r.iterations;
    if (record) r.trace.push_back(f);
  }
  return r;
}

}  // namespace detail

/// L2 logistic regression on standardized features. C is chosen by stratified
/// k-fold held-out accuracy (ties go to the smaller C, i.e. stronger
/// regularization), then the model is refit on all samples.
inline LogisticModel logistic_fit(const MatrixXd& X, const std::vector<int>& y, const LogisticOptions& opt = {}) {
  if (static_cast<std::size_t>(X.rows()) != y.size())
    throw DimensionMismatch("logistic: X has " + std::to_string(X.rows()) + " rows, y has " + std::to_string(y.size()));
  if (opt.c_grid.empty()) throw ConfigError("logistic: empty C grid");
  detail::require_finite(X, "logistic X");
  std::size_t pos = 0;
  for (int v : y) {
    if (v != 0 && v != 1) throw DataError("logistic labels must be 0 or 1");
    pos += static_cast<std::size_t>(v);
  }
  if (pos == 0 || pos == y.size()) throw DataError("logistic regression needs both classes present");

  VectorXd yv(static_cast<Index>(y.size()));
  for (std::size_t i = 0; i < y.size(); ++i) yv(static_cast<Index>(i)) = y[i];

  LogisticModel model;
  std::vector<double> grid = opt.c_grid;
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());
  std::size_t best = 0;
  if (grid.size() > 1) {
    std::vector<std::int64_t> labels(y.begin(), y.end());
    const auto plan = make_folds(labels, opt.folds, FoldKind::stratified, opt.seed);
    model.cv_accuracy.assign(grid.size(), 0.0);
    for (std::size_t f = 0; f < plan.k(); ++f) {
      const auto tr = plan.train(f);
      const auto& te = plan.test(f);
      const MatrixXd Xtr = take_rows(X, tr);
      VectorXd ytr(static_cast<Index>(tr.size()));
      for (std::size_t i = 0; i < tr.size(); ++i) ytr(static_cast<Index>(i)) = yv(static_cast<Index>(tr[i]));
      if (ytr.sum() == 0 || ytr.sum() == ytr.size()) continue;  // a fold without both classes scores nothing
      const auto st = Standardizer::fit(Xtr);
      const MatrixXd Ztr = st.apply(Xtr), Zte = st.apply(take_rows(X, te));
      for (std::size_t g = 0; g < grid.size(); ++g) {
        auto r = detail::logistic_gd(Ztr, ytr, grid[g], opt.iters, opt.cv_tolerance, false);
        const VectorXd z = (Zte * r.w).array() + r.b;
        double correct = 0;
        for (std::size_t i = 0; i < te.size(); ++i)
          correct += ((z(static_cast<Index>(i)) > 0 ? 1 : 0) == y[te[i]]);
        model.cv_accuracy[g] += correct / static_cast<double>(te.size()) / static_cast<double>(plan.k());
      }
    }
    for (std::size_t g = 1; g < grid.size(); ++g)
      if (model.cv_accuracy[g] > model.cv_accuracy[best]) best = g;
  }
  model.C = grid[best];
  model.standardizer = Standardizer::fit(X);
  auto r = detail::logistic_gd(model.standardizer.apply(X), yv, model.C, opt.iters, opt.final_tolerance,
                               opt.record_loss);
  model.w = std::move(r.w);
  model.b = r.b;
  model.iterations = r.iterations;
  model.loss_trace = std::move(r.trace);
  return model;
}

}  // namespace msim::regress
