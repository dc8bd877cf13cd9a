#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "msim/regress.hpp"

using namespace msim;
using namespace msim::regress;

namespace {

MatrixXd gaussian(Index rows, Index cols, std::uint64_t seed, double sd = 1.0) {
  Rng r(seed, {1});
  MatrixXd m(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) m(i, j) = r.normal(0.0, sd);
  return m;
}

// Plain gradient descent on ||Y - Z B - 1 c^T||^2 + lambda ||B||^2 with step 1/L.
std::pair<MatrixXd, VectorXd> ridge_by_gd(const MatrixXd& Z, const MatrixXd& Y, double lambda, int steps) {
  const double n = static_cast<double>(Z.rows());
  MatrixXd aug(Z.rows(), Z.cols() + 1);
  aug << Z, VectorXd::Ones(Z.rows());
  const double L = 2 * (Eigen::SelfAdjointEigenSolver<MatrixXd>(aug.transpose() * aug).eigenvalues().maxCoeff() + lambda);
  MatrixXd B = MatrixXd::Zero(Z.cols(), Y.cols());
  Eigen::RowVectorXd c = Eigen::RowVectorXd::Zero(Y.cols());
  for (int s = 0; s < steps; ++s) {
    MatrixXd R = (Z * B).rowwise() + c;
    R -= Y;
    B -= (2 * Z.transpose() * R + 2 * lambda * B) / L;
    c -= 2 * R.colwise().sum() / L;
  }
  (void)n;
  return {B.transpose(), c.transpose()};
}

double accuracy(const std::vector<int>& pred, const std::vector<int>& y) {
  double c = 0;
  for (std::size_t i = 0; i < y.size(); ++i) c += pred[i] == y[i];
  return c / static_cast<double>(y.size());
}

}  // namespace

TEST(Ridge, RecoversExactLinearMapWithoutPenalty) {
  MatrixXd X = gaussian(50, 6, 1);
  MatrixXd W0 = gaussian(3, 6, 2);
  VectorXd c0 = VectorXd::LinSpaced(3, -1, 2);
  MatrixXd Y = (X * W0.transpose()).rowwise() + c0.transpose();
  for (bool standardize : {true, false}) {
    auto sol = ridge_fit(X, Y, 0.0, {standardize});
    EXPECT_LT((sol.W - W0).cwiseAbs().maxCoeff(), 1e-8);
    EXPECT_LT((sol.intercept - c0).cwiseAbs().maxCoeff(), 1e-8);
  }
}

TEST(Ridge, HugePenaltyShrinksToMean) {
  MatrixXd X = gaussian(40, 5, 3);
  MatrixXd Y = X * gaussian(5, 2, 4) + gaussian(40, 2, 5, 0.1);
  Y.col(1).array() += 7.0;
  auto free = ridge_fit(X, Y, 0.0);
  auto shrunk = ridge_fit(X, Y, 1e12);
  EXPECT_LT(shrunk.W.norm(), 1e-6 * free.W.norm());
  EXPECT_LT((shrunk.intercept - Y.colwise().mean().transpose()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ridge, MatchesGradientDescentOnRawObjective) {
  MatrixXd X = gaussian(30, 4, 6);
  MatrixXd Y = gaussian(30, 2, 7);
  const double lambda = 3.0;
  auto sol = ridge_fit(X, Y, lambda, {false});
  auto [W, c] = ridge_by_gd(X, Y, lambda, 50000);
  EXPECT_LT((sol.W - W).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((sol.intercept - c).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ridge, MatchesGradientDescentOnStandardizedObjective) {
  MatrixXd X = gaussian(30, 4, 8);
  X.col(0) *= 25.0;
  X.col(2).array() += 3.0;
  MatrixXd Y = gaussian(30, 3, 9);
  const double lambda = 2.0;
  auto sol = ridge_fit(X, Y, lambda);
  // Oracle: standardize by hand, descend, map the weights back.
  Eigen::RowVectorXd mu = X.colwise().mean();
  Eigen::RowVectorXd sd = ((X.rowwise() - mu).array().square().colwise().mean()).sqrt();
  MatrixXd Z = (X.rowwise() - mu).array().rowwise() / sd.array();
  auto [B, c] = ridge_by_gd(Z, Y, lambda, 50000);
  MatrixXd W = B.array().rowwise() / sd.array();
  VectorXd b = c - W * mu.transpose();
  EXPECT_LT((sol.W - W).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((sol.intercept - b).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Ridge, TargetShiftMovesOnlyIntercept) {
  MatrixXd X = gaussian(25, 7, 10);
  MatrixXd Y = gaussian(25, 2, 11);
  Eigen::RowVectorXd shift(2);
  shift << 4.5, -1.25;
  auto a = ridge_fit(X, Y, 0.7);
  auto b = ridge_fit(X, Y.rowwise() + shift, 0.7);
  EXPECT_LT((a.W - b.W).cwiseAbs().maxCoeff(), 1e-10);
  EXPECT_LT((b.intercept - a.intercept - shift.transpose()).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(Ridge, ConstantFeatureAndBadInput) {
  MatrixXd X = gaussian(20, 3, 12);
  X.col(1).setConstant(2.0);
  MatrixXd Y = X.col(0) * 2.0;
  auto sol = ridge_fit(X, Y, 0.1);
  EXPECT_TRUE(sol.W.allFinite());
  EXPECT_EQ(sol.W(0, 1), 0.0);
  X(3, 2) = std::nan("");
  EXPECT_THROW(ridge_fit(X, Y, 0.1), NumericalError);
  EXPECT_THROW(ridge_fit(MatrixXd(0, 3), MatrixXd(0, 1), 0.1), EmptyDataset);
}

TEST(Folds, StratifiedTwoBalancedClasses) {
  std::vector<std::int64_t> labels{0, 1, 0, 1, 0, 1, 0, 1, 0, 1};
  auto plan = make_folds(labels, 5, FoldKind::stratified, 3);
  for (const auto& f : plan.folds) {
    ASSERT_EQ(f.size(), 2u);
    EXPECT_NE(labels[f[0]], labels[f[1]]);
  }
}

TEST(Folds, StratifiedFiveClassesSpreadsEachClass) {
  // Two samples per class and two samples per fold: no fold repeats a class.
  std::vector<std::int64_t> labels{0, 0, 1, 1, 2, 2, 3, 3, 4, 4};
  auto plan = make_folds(labels, 5, FoldKind::stratified, 8);
  for (const auto& f : plan.folds) {
    ASSERT_EQ(f.size(), 2u);
    EXPECT_NE(labels[f[0]], labels[f[1]]);
  }
}

TEST(Folds, StratifiedPartitionAndProportions) {
  Rng r(4, {});
  std::vector<std::int64_t> labels(137);
  for (auto& l : labels) l = static_cast<std::int64_t>(r.below(3));
  const std::size_t k = 5;
  auto plan = make_folds(labels, k, FoldKind::stratified, 21);
  std::vector<int> seen(labels.size(), 0);
  std::map<std::int64_t, double> total;
  for (auto l : labels) total[l] += 1;
  for (const auto& f : plan.folds) {
    std::map<std::int64_t, double> count;
    for (auto i : f) {
      ++seen[i];
      count[labels[i]] += 1;
    }
    for (auto [l, t] : total) EXPECT_LE(std::abs(count[l] - t / k), 1.0);
  }
  for (int s : seen) EXPECT_EQ(s, 1);
  auto again = make_folds(labels, k, FoldKind::stratified, 21);
  EXPECT_EQ(plan.folds, again.folds);
  auto other = make_folds(labels, k, FoldKind::stratified, 22);
  EXPECT_NE(plan.folds, other.folds);
}

TEST(Folds, GroupedNeverSplitsAGroup) {
  std::vector<std::int64_t> groups;
  for (int c = 0; c < 79; ++c)
    for (int t = 0; t < 3 + c % 4; ++t) groups.push_back(c);
  auto plan = make_folds(groups, 5, FoldKind::grouped, 2);
  std::map<std::int64_t, std::set<std::size_t>> where;
  std::size_t covered = 0;
  for (std::size_t f = 0; f < plan.k(); ++f) {
    covered += plan.test(f).size();
    for (auto i : plan.test(f)) where[groups[i]].insert(f);
    EXPECT_EQ(plan.train(f).size() + plan.test(f).size(), groups.size());
  }
  EXPECT_EQ(covered, groups.size());
  for (const auto& [g, folds] : where) EXPECT_EQ(folds.size(), 1u) << "group " << g;
  EXPECT_THROW(make_folds({1, 1, 2, 2}, 3, FoldKind::grouped, 0), ConfigError);
  EXPECT_THROW(make_folds({1, 2, 3}, 1, FoldKind::stratified, 0), ConfigError);
}

TEST(RidgeCv, SingletonGridAndDuplicates) {
  MatrixXd X = gaussian(40, 3, 13);
  MatrixXd Y = X * gaussian(3, 2, 14) + gaussian(40, 2, 15, 0.5);
  std::vector<std::int64_t> g(40);
  for (int i = 0; i < 40; ++i) g[i] = i / 4;
  auto plan = make_folds(g, 5, FoldKind::grouped, 1);
  EXPECT_EQ(ridge_cv(X, Y, {0.37}, plan).lambda, 0.37);
  auto a = ridge_cv(X, Y, default_lambda_grid(), plan);
  auto grid = default_lambda_grid();
  auto dup = grid;
  dup.insert(dup.end(), grid.begin(), grid.end());
  std::reverse(dup.begin(), dup.end());
  auto b = ridge_cv(X, Y, dup, plan);
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.solution.W, b.solution.W);
  EXPECT_THROW(ridge_cv(X, Y, {}, plan), ConfigError);
}

TEST(RidgeCv, NoiselessDataPicksSmallestLambda) {
  MatrixXd X = gaussian(60, 5, 16);
  MatrixXd Y = X * gaussian(5, 3, 17);
  std::vector<std::int64_t> g(60);
  for (int i = 0; i < 60; ++i) g[i] = i % 12;
  auto plan = make_folds(g, 5, FoldKind::grouped, 4);
  auto grid = default_lambda_grid();
  // Score every lambda directly from held-out folds.
  std::vector<double> direct(grid.size(), 0.0);
  for (std::size_t f = 0; f < plan.k(); ++f) {
    auto tr = plan.train(f);
    for (std::size_t j = 0; j < grid.size(); ++j) {
      auto s = ridge_fit(take_rows(X, tr), take_rows(Y, tr), grid[j]);
      MatrixXd err = s.predict(take_rows(X, plan.test(f))) - take_rows(Y, plan.test(f));
      direct[j] -= err.squaredNorm();
    }
  }
  EXPECT_EQ(std::max_element(direct.begin(), direct.end()) - direct.begin(), 0);
  auto cv = ridge_cv(X, Y, grid, plan);
  EXPECT_EQ(cv.lambda, grid.front());
  EXPECT_TRUE(cv.solution.W.isApprox(ridge_fit(X, Y, grid.front()).W, 1e-12));
}

TEST(RidgeCv, ExactTiesGoToLargerLambda) {
  MatrixXd X = gaussian(20, 2, 18);
  MatrixXd Y = MatrixXd::Constant(20, 1, 3.0);  // every lambda predicts the mean exactly
  std::vector<std::int64_t> g(20);
  for (int i = 0; i < 20; ++i) g[i] = i;
  auto plan = make_folds(g, 4, FoldKind::grouped, 0);
  EXPECT_EQ(ridge_cv(X, Y, {0.1, 1.0, 10.0}, plan).lambda, 10.0);
}

TEST(RidgeCv, TinyFoldRejected) {
  MatrixXd X = gaussian(5, 2, 19);
  MatrixXd Y = gaussian(5, 1, 20);
  auto plan = make_folds({0, 1, 2, 3, 4}, 5, FoldKind::grouped, 0);
  EXPECT_THROW(ridge_cv(X, Y, {1.0}, plan), ConfigError);
}

TEST(Logistic, SeparableBlobsFitPerfectly) {
  const Index n = 200;
  MatrixXd X = gaussian(n, 3, 21);
  std::vector<int> y(n);
  for (Index i = 0; i < n; ++i) {
    y[i] = i % 2;
    X(i, 0) += y[i] ? 2.5 : -2.5;  // centers 5 sd apart
  }
  LogisticOptions opt;
  opt.record_loss = true;
  auto m = logistic_fit(X, y, opt);
  EXPECT_EQ(accuracy(m.predict(X), y), 1.0);
  auto p = m.predict_proba(X);
  for (Index i = 0; i < n; ++i)
    if (y[i]) EXPECT_GT(p(i), 0.5);
  for (std::size_t t = 1; t < m.loss_trace.size(); ++t) ASSERT_LE(m.loss_trace[t], m.loss_trace[t - 1] * (1 + 1e-14));  // last steps sit at rounding level
}

TEST(Logistic, ShuffledLabelsAreAtChance) {
  const Index n = 2000;
  MatrixXd X = gaussian(n, 10, 22);
  Rng r(23, {});
  std::vector<int> y(n);
  for (auto& v : y) v = static_cast<int>(r.below(2));
  std::vector<std::int64_t> labels(y.begin(), y.end());
  auto plan = make_folds(labels, 5, FoldKind::stratified, 5);
  double acc = 0;
  for (std::size_t f = 0; f < plan.k(); ++f) {
    auto tr = plan.train(f);
    std::vector<int> ytr, yte;
    for (auto i : tr) ytr.push_back(y[i]);
    for (auto i : plan.test(f)) yte.push_back(y[i]);
    auto m = logistic_fit(take_rows(X, tr), ytr);
    acc += accuracy(m.predict(take_rows(X, plan.test(f))), yte) / 5.0;
  }
  EXPECT_NEAR(acc, 0.5, 0.05);
}

TEST(Logistic, ZeroFeaturesGiveBaseRate) {
  MatrixXd X = MatrixXd::Zero(50, 4);
  std::vector<int> y(50, 0);
  for (int i = 0; i < 15; ++i) y[i * 3] = 1;
  auto p = logistic_fit(X, y).predict_proba(X);
  for (Index i = 0; i < p.size(); ++i) EXPECT_NEAR(p(i), 0.3, 1e-9);
}

TEST(Logistic, NonSeparableLossMonotoneAndBudgetExact) {
  MatrixXd X = gaussian(120, 4, 24);
  Rng r(25, {});
  std::vector<int> y(120);
  for (Index i = 0; i < 120; ++i) y[i] = X(i, 0) + r.normal() > 0 ? 1 : 0;
  LogisticOptions opt;
  opt.record_loss = true;
  auto m = logistic_fit(X, y, opt);
  ASSERT_GT(m.loss_trace.size(), 1u);
  for (std::size_t t = 1; t < m.loss_trace.size(); ++t) ASSERT_LE(m.loss_trace[t], m.loss_trace[t - 1] * (1 + 1e-14));  // last steps sit at rounding level
  EXPECT_LE(m.iterations, opt.iters);
  opt.iters = 5;
  EXPECT_EQ(logistic_fit(X, y, opt).iterations, 5u);
}

TEST(Logistic, SingleClassRejected) {
  MatrixXd X = gaussian(10, 2, 26);
  EXPECT_THROW(logistic_fit(X, std::vector<int>(10, 1)), DataError);
  EXPECT_THROW(logistic_fit(X, std::vector<int>(9, 1)), DimensionMismatch);
}

TEST(Logistic, DuplicatedDataGivesSameDecision) {
  MatrixXd X = gaussian(80, 3, 27);
  Rng r(28, {});
  std::vector<int> y(80);
  for (Index i = 0; i < 80; ++i) y[i] = X(i, 1) + 0.8 * r.normal() > 0 ? 1 : 0;
  MatrixXd X2(160, 3);
  X2 << X, X;
  std::vector<int> y2 = y;
  y2.insert(y2.end(), y.begin(), y.end());
  LogisticOptions opt;
  opt.c_grid = {0.5};
  auto a = logistic_fit(X, y, opt);
  auto b = logistic_fit(X2, y2, opt);
  EXPECT_LT((a.decision(X) - b.decision(X)).cwiseAbs().maxCoeff(), 1e-8);
}

TEST(Logistic, RefitIsStationary) {
  // Gradient of mean log-loss + |w|^2 / (2C), evaluated independently.
  MatrixXd X = gaussian(150, 4, 29);
  Rng r(30, {});
  std::vector<int> y(150);
  for (Index i = 0; i < 150; ++i) y[i] = X(i, 0) - X(i, 2) + r.normal() > 0 ? 1 : 0;
  LogisticOptions opt;
  opt.c_grid = {2.0};
  auto m = logistic_fit(X, y, opt);
  const MatrixXd Z = m.standardizer.apply(X);
  Eigen::VectorXd gw = m.w / 2.0;
  double gb = 0;
  for (Index i = 0; i < 150; ++i) {
    const double p = 1.0 / (1.0 + std::exp(-(Z.row(i).dot(m.w) + m.b)));
    gw += (p - y[i]) * Z.row(i).transpose() / 150.0;
    gb += (p - y[i]) / 150.0;
  }
  EXPECT_LT(gw.cwiseAbs().maxCoeff(), 1e-9);
  EXPECT_LT(std::abs(gb), 1e-9);
}
