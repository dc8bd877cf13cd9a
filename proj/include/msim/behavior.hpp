#pragma once

// Object-contact prediction (OCP): readout features from observed context plus
// model rollout, a logistic readout, per-scenario accuracy and correlation to
// human hit proportions, and count-weighted aggregation across scenarios.

#include <Eigen/Dense>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "msim/dynamics.hpp"
#include "msim/error.hpp"
#include "msim/metrics.hpp"
#include "msim/regress.hpp"
#include "msim/tensorio.hpp"

namespace msim::behavior {

namespace fs = std::filesystem;
using Eigen::Index;
using Eigen::MatrixXd;
using Eigen::VectorXd;

/// One row per stimulus: total x d latents flattened time-major.
struct OcpFeatures {
  MatrixXd X;
  std::vector<std::string> stimuli;
  std::vector<std::string> scenario;
  std::vector<int> label;  // -1 when the stimulus is unlabeled
  std::size_t T = 0, total = 0, d = 0;

  std::size_t size() const { return stimuli.size(); }
};

/// Observed latents of the first T frames, then total - T rollout steps.
inline OcpFeatures build_features(const LatentDataset& latents, const dynamics::DynamicsModel& model,
                                  std::size_t T = 7, std::size_t total = 25,
                                  dynamics::RolloutMode mode = dynamics::RolloutMode::sliding) {
  if (T == 0) throw ConfigError("OCP features need T >= 1");
  if (total < T) throw ConfigError("OCP total timesteps (" + std::to_string(total) + ") below context T (" +
                                   std::to_string(T) + ")");
  if (latents.size() == 0) throw EmptyDataset("no stimuli to build OCP features from");
  const auto d = static_cast<Index>(latents.d ? latents.d : latents.latents.front().cols());
  if (static_cast<std::size_t>(d) != model.d)
    throw DimensionMismatch("latents have d=" + std::to_string(d) + ", model expects " + std::to_string(model.d));
  OcpFeatures f;
  f.T = T;
  f.total = total;
  f.d = static_cast<std::size_t>(d);
  f.X.resize(static_cast<Index>(latents.size()), static_cast<Index>(total) * d);
  for (std::size_t i = 0; i < latents.size(); ++i) {
    const MatrixXd& L = latents.latents[i];
    if (static_cast<std::size_t>(L.rows()) < T)
      throw InsufficientContext("stimulus " + latents.stimuli[i] + " has " + std::to_string(L.rows()) +
                                " frames, context needs " + std::to_string(T));
    const MatrixXd ctx = L.topRows(static_cast<Index>(T));
    // row-major flatten: [t0 d0, t0 d1, ..., t1 d0, ...]
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> seq(static_cast<Index>(total), d);
    seq.topRows(static_cast<Index>(T)) = ctx;
    if (total > T) seq.bottomRows(static_cast<Index>(total - T)) = dynamics::rollout(model, ctx, total - T, mode);
    f.X.row(static_cast<Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(seq.data(), seq.size());
    f.stimuli.push_back(latents.stimuli[i]);
    f.scenario.push_back(i < latents.scenario.size() ? latents.scenario[i] : std::string{});
    f.label.push_back(i < latents.label.size() && latents.label[i] ? *latents.label[i] : -1);
  }
  return f;
}

/// Logistic readout on the labeled stimuli (features standardized inside).
inline regress::LogisticModel train_readout(const OcpFeatures& f, const regress::LogisticOptions& opt = {}) {
  std::vector<int> y;
  for (std::size_t i = 0; i < f.size(); ++i) {
    if (f.label[i] < 0) throw DataError("training stimulus " + f.stimuli[i] + " has no label");
    y.push_back(f.label[i]);
  }
  return regress::logistic_fit(f.X, y, opt);
}

struct ScenarioScore {
  std::string scenario;
  std::size_t n = 0;
  double accuracy = metrics::kNaN;
  double pearson_to_human = metrics::kNaN;
  bool flagged = false;  // correlation undefined (fewer than 3 stimuli or zero variance)
};

/// Per-scenario scores, in the order of judgements.scenario_counts. A hit is
/// predicted when p > 0.5; p = 0.5 exactly counts as no-hit.
inline std::vector<ScenarioScore> evaluate_probabilities(std::span<const double> p_model, const HumanJudgements& hj) {
  if (p_model.size() != hj.size())
    throw DimensionMismatch("OCP evaluation: " + std::to_string(p_model.size()) + " model probabilities, " +
                            std::to_string(hj.size()) + " judged stimuli");
  std::map<std::string, std::vector<std::size_t>> members;
  for (std::size_t i = 0; i < hj.size(); ++i) members[hj.scenario[i]].push_back(i);
  std::vector<ScenarioScore> out;
  for (const auto& [name, count] : hj.scenario_counts) {
    const auto& idx = members[name];
    if (idx.size() != count)
      throw DataError("scenario " + name + ": count " + std::to_string(count) + " but " + std::to_string(idx.size()) +
                      " stimuli");
    ScenarioScore s;
    s.scenario = name;
    s.n = idx.size();
    std::vector<double> pm, ph;
    double correct = 0;
    for (auto i : idx) {
      correct += ((p_model[i] > 0.5 ? 1 : 0) == hj.label[i]);
      pm.push_back(p_model[i]);
      ph.push_back(hj.p_hit[i]);
    }
    s.accuracy = idx.empty() ? metrics::kNaN : correct / static_cast<double>(idx.size());
    if (idx.size() >= 3) s.pearson_to_human = metrics::pearson(pm, ph);
    s.flagged = std::isnan(s.pearson_to_human);
    out.push_back(s);
  }
  return out;
}

/// Matches test features to judged stimuli by id and scores the readout.
inline std::vector<ScenarioScore> evaluate(const regress::LogisticModel& readout, const OcpFeatures& test,
                                           const HumanJudgements& hj) {
  std::map<std::string, std::size_t> row;
  for (std::size_t i = 0; i < test.size(); ++i) row[test.stimuli[i]] = i;
  MatrixXd X(static_cast<Index>(hj.size()), test.X.cols());
  for (std::size_t i = 0; i < hj.size(); ++i) {
    auto it = row.find(hj.stimuli[i]);
    if (it == row.end()) throw AlignmentError("judged stimulus " + hj.stimuli[i] + " has no test latents");
    X.row(static_cast<Index>(i)) = test.X.row(static_cast<Index>(it->second));
  }
  const VectorXd p = readout.predict_proba(X);
  return evaluate_probabilities(std::span<const double>(p.data(), static_cast<std::size_t>(p.size())), hj);
}

struct Aggregate {
  metrics::WeightedStats accuracy;
  metrics::WeightedStats pearson;  // over scenarios with a defined correlation
  std::size_t n_flagged = 0;
};

/// Count-weighted mean and sem across scenarios.
inline Aggregate aggregate(const std::vector<ScenarioScore>& scores) {
  std::vector<double> acc, wa, r, wr;
  Aggregate a;
  for (const auto& s : scores) {
    acc.push_back(s.accuracy);
    wa.push_back(static_cast<double>(s.n));
    if (s.flagged) {
      ++a.n_flagged;
    } else {
      r.push_back(s.pearson_to_human);
      wr.push_back(static_cast<double>(s.n));
    }
  }
  a.accuracy = metrics::weighted_mean_sem(acc, wa);
  if (!r.empty()) a.pearson = metrics::weighted_mean_sem(r, wr);
  return a;
}

/// scenario,n,accuracy,pearson_to_human rows, then weighted_mean and
/// weighted_sem rows (n = total stimuli). Undefined values are written "nan".
inline void write_scores_csv(const std::vector<ScenarioScore>& scores, const Aggregate& agg, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  auto num = [](double v) { return format_double(v); };
  std::size_t total = 0;
  os << "scenario,n,accuracy,pearson_to_human\n";
  for (const auto& s : scores) {
    os << s.scenario << ',' << s.n << ',' << num(s.accuracy) << ',' << num(s.pearson_to_human) << '\n';
    total += s.n;
  }
  os << "weighted_mean," << total << ',' << num(agg.accuracy.weighted_mean) << ',' << num(agg.pearson.weighted_mean)
     << '\n';
  os << "weighted_sem," << total << ',' << num(agg.accuracy.weighted_sem) << ',' << num(agg.pearson.weighted_sem)
     << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace msim::behavior
