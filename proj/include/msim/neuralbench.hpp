#pragma once

// Mental-Pong neural benchmark: aligns binned recordings to video frames and
// scores sources (other animals, models, oracles) on held-out conditions
// during the occluded epoch.

#include <Eigen/Dense>

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "msim/array3.hpp"
#include "msim/dynamics.hpp"
#include "msim/error.hpp"
#include "msim/metrics.hpp"
#include "msim/mpong.hpp"
#include "msim/tensorio.hpp"

namespace msim::neuralbench {

using Eigen::Index;
using Eigen::MatrixXd;
using metrics::PredictivityResult;
using metrics::SplitPlan;
using metrics::TrialSet;

/// Frame-resolved responses: per condition [trials x n_frames x units].
struct AlignedResponses {
  std::vector<Array3> trials;
  std::vector<mpong::Condition> conditions;
  std::vector<Animal> animals;
  std::size_t n_clamped = 0;  // frames outside the span of bin centers

  std::size_t n_units() const { return trials.empty() ? 0 : trials.front().dim(2); }

  /// Occluded frames only, for units [begin, begin + count).
  TrialSet occluded(std::size_t begin, std::size_t count) const {
    if (begin + count > n_units()) throw DimensionMismatch("unit range exceeds population");
    TrialSet ts;
    for (std::size_t c = 0; c < trials.size(); ++c) {
      const auto& a = trials[c];
      const std::size_t f0 = conditions[c].occluded_begin(), nf = conditions[c].occluded_count();
      Array3 out(a.dim(0), nf, count);
      for (std::size_t k = 0; k < a.dim(0); ++k)
        for (std::size_t f = 0; f < nf; ++f)
          for (std::size_t u = 0; u < count; ++u) out(k, f, u) = a(k, f0 + f, begin + u);
      ts.conditions.push_back(std::move(out));
    }
    return ts;
  }
  TrialSet occluded() const { return occluded(0, n_units()); }

  /// One animal's units, as its own population.
  AlignedResponses animal(std::size_t i) const {
    std::size_t off = 0;
    for (std::size_t a = 0; a < i; ++a) off += animals.at(a).n_units;
    const std::size_t n = animals.at(i).n_units;
    AlignedResponses out;
    out.conditions = conditions;
    out.animals = {animals[i]};
    out.n_clamped = n_clamped;
    for (const auto& a : trials) {
      Array3 sub(a.dim(0), a.dim(1), n);
      for (std::size_t k = 0; k < a.dim(0); ++k)
        for (std::size_t f = 0; f < a.dim(1); ++f)
          for (std::size_t u = 0; u < n; ++u) sub(k, f, u) = a(k, f, off + u);
      out.trials.push_back(std::move(sub));
    }
    return out;
  }
};

/// Linear interpolation from bin centers (b + 0.5) * width to frame times
/// f / frame_rate, per trial and unit. Frames before the first or after the
/// last center take the edge bin's value and are counted in n_clamped.
inline AlignedResponses interpolate_bins(const NeuralDataset& neural, const mpong::ConditionSet& set) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < neural.condition_ids.size(); ++i) by_id[neural.condition_ids[i]] = i;
  const double w = neural.bin_width_ms, fr = set.spec.frame_rate;
  AlignedResponses out;
  out.animals = neural.animals;
  for (const auto& cond : set.conditions) {
    const auto id = std::to_string(cond.id);
    auto it = by_id.find(id);
    if (it == by_id.end()) throw AlignmentError("no neural responses for condition " + id);
    const Array3& bins = neural.responses[it->second];
    const std::size_t B = bins.dim(1);
    const double t_last = static_cast<double>(cond.n_frames - 1) / fr * 1000.0;
    if (B == 0 || static_cast<double>(B) * w < t_last)
      throw DataError("condition " + id + ": " + std::to_string(B) + " bins of " + std::to_string(w) +
                      " ms do not cover its " + std::to_string(t_last) + " ms");
    Array3 a(bins.dim(0), cond.n_frames, bins.dim(2));
    for (std::size_t f = 0; f < cond.n_frames; ++f) {
      const double pos = static_cast<double>(f) / fr * 1000.0 / w - 0.5;  // in units of bin index
      std::size_t lo, hi;
      double frac;
      if (pos <= 0.0) {
        lo = hi = 0;
        frac = 0.0;
        out.n_clamped += pos < 0.0;
      } else if (pos >= static_cast<double>(B - 1)) {
        lo = hi = B - 1;
        frac = 0.0;
        out.n_clamped += pos > static_cast<double>(B - 1);
      } else {
        lo = static_cast<std::size_t>(std::floor(pos));
        hi = lo + 1;
        frac = pos - static_cast<double>(lo);
      }
      for (std::size_t k = 0; k < bins.dim(0); ++k)
        for (std::size_t u = 0; u < bins.dim(2); ++u)
          a(k, f, u) = frac == 0.0 ? bins(k, lo, u) : (1.0 - frac) * bins(k, lo, u) + frac * bins(k, hi, u);
    }
    out.trials.push_back(std::move(a));
    out.conditions.push_back(cond);
  }
  return out;
}

namespace detail {

inline PredictivityResult label(PredictivityResult r, const std::string& animal) {
  r.animal.assign(r.np.size(), animal);
  return r;
}

}  // namespace detail

/// Inter-animal consistency: b predicted from a, then a predicted from b.
inline PredictivityResult fit_internal_consistency(const AlignedResponses& a, const AlignedResponses& b,
                                                   const SplitPlan& plan, const metrics::NpOptions& opt = {}) {
  if (a.conditions.size() != b.conditions.size())
    throw AlignmentError("animals cover different numbers of conditions");
  for (std::size_t c = 0; c < a.conditions.size(); ++c)
    if (a.conditions[c].id != b.conditions[c].id || a.conditions[c].n_frames != b.conditions[c].n_frames)
      throw AlignmentError("animals disagree on condition " + std::to_string(a.conditions[c].id));
  const auto name_a = a.animals.size() == 1 ? a.animals[0].name : std::string("a");
  const auto name_b = b.animals.size() == 1 ? b.animals[0].name : std::string("b");
  const auto sa = a.occluded(), sb = b.occluded();
  return metrics::concat({detail::label(metrics::neural_predictivity(sa, sb, plan, opt), name_b),
                          detail::label(metrics::neural_predictivity(sb, sa, plan, opt), name_a)});
}

/// Ceiling from a recording holding exactly two animals.
inline PredictivityResult fit_internal_consistency(const AlignedResponses& both, const SplitPlan& plan,
                                                   const metrics::NpOptions& opt = {}) {
  if (both.animals.size() != 2)
    throw DataError("inter-animal consistency needs two animals, found " + std::to_string(both.animals.size()));
  return fit_internal_consistency(both.animal(0), both.animal(1), plan, opt);
}

/// Accepts per-condition features covering either every frame or only the
/// occluded frames; returns the occluded rows.
inline std::vector<MatrixXd> occluded_features(const std::vector<MatrixXd>& features,
                                               const std::vector<mpong::Condition>& conditions) {
  if (features.size() != conditions.size())
    throw AlignmentError("features cover " + std::to_string(features.size()) + " conditions, expected " +
                         std::to_string(conditions.size()));
  std::vector<MatrixXd> out;
  for (std::size_t c = 0; c < features.size(); ++c) {
    const auto& f = features[c];
    const auto& cond = conditions[c];
    const auto rows = static_cast<std::size_t>(f.rows());
    if (rows == cond.n_frames)
      out.push_back(f.middleRows(static_cast<Index>(cond.occluded_begin()), static_cast<Index>(cond.occluded_count())));
    else if (rows == cond.occluded_count())
      out.push_back(f);
    else
      throw AlignmentError("condition " + std::to_string(cond.id) + ": features have " + std::to_string(rows) +
                           " rows, expected " + std::to_string(cond.n_frames) + " or " +
                           std::to_string(cond.occluded_count()));
  }
  return out;
}

/// Model (or oracle) features to each animal's units, per animal.
inline PredictivityResult model_predictivity(const std::vector<MatrixXd>& features, const AlignedResponses& neural,
                                             const SplitPlan& plan, const metrics::NpOptions& opt = {}) {
  const auto source = metrics::deterministic_set(occluded_features(features, neural.conditions));
  std::vector<PredictivityResult> parts;
  std::size_t off = 0;
  for (const auto& a : neural.animals) {
    parts.push_back(detail::label(metrics::neural_predictivity(source, neural.occluded(off, a.n_units), plan, opt), a.name));
    off += a.n_units;
  }
  return metrics::concat(parts);
}

/// Ball state (x, y, vx, vy) on the occluded frames of every condition.
inline std::vector<MatrixXd> occluded_ball_state(const mpong::BoardSpec& spec,
                                                 const std::vector<mpong::Condition>& conditions) {
  std::vector<MatrixXd> out;
  for (const auto& c : conditions) {
    auto traj = mpong::simulate_trajectory(spec, c);
    MatrixXd m(static_cast<Index>(c.occluded_count()), 4);
    for (std::size_t f = 0; f < c.occluded_count(); ++f) {
      const auto k = c.occluded_begin() + f;
      m.row(static_cast<Index>(f)) << traj.position[k].x(), traj.position[k].y(), traj.velocity[k].x(),
          traj.velocity[k].y();
    }
    out.push_back(std::move(m));
  }
  return out;
}

struct BallDecode {
  PredictivityResult per_quantity;  // four units: x, y, vx, vy
  metrics::MedianSem joint, position, velocity;
};

/// One ridge map from the source to the 4-vector ball state; each quantity
/// scored with the predictivity formula (the ball state is noise-free).
inline BallDecode ball_decode(const TrialSet& occluded_source, const mpong::BoardSpec& spec,
                              const std::vector<mpong::Condition>& conditions, const SplitPlan& plan,
                              const metrics::NpOptions& opt = {}) {
  const auto target = metrics::deterministic_set(occluded_ball_state(spec, conditions));
  BallDecode bd;
  bd.per_quantity = metrics::neural_predictivity(occluded_source, target, plan, opt);
  bd.per_quantity.animal = {"x", "y", "vx", "vy"};
  const auto& np = bd.per_quantity.np;
  bd.joint = metrics::median_sem(np);
  bd.position = metrics::median_sem(std::vector<double>{np[0], np[1]});
  bd.velocity = metrics::median_sem(std::vector<double>{np[2], np[3]});
  return bd;
}

struct LayerSelection {
  std::size_t chosen = 0;
  std::vector<double> median_np;
  std::vector<PredictivityResult> results;
  bool tie = false;  // another candidate came within 1e-9 of the chosen one
};

/// Picks the candidate with the highest median held-out NP; within 1e-9 the
/// earlier candidate wins.
inline LayerSelection select_best_layer(const std::vector<std::vector<MatrixXd>>& candidates,
                                        const AlignedResponses& neural, const SplitPlan& plan,
                                        const metrics::NpOptions& opt = {}) {
  if (candidates.empty()) throw ConfigError("layer selection needs at least one candidate");
  LayerSelection sel;
  for (const auto& c : candidates) {
    sel.results.push_back(model_predictivity(c, neural, plan, opt));
    sel.median_np.push_back(metrics::median_sem(sel.results.back().np).median);
  }
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    const double best = sel.median_np[sel.chosen], v = sel.median_np[i];
    if (std::isnan(best) && !std::isnan(v)) {
      sel.chosen = i;
    } else if (v > best + 1e-9) {
      sel.chosen = i;
    }
  }
  for (std::size_t i = 0; i < candidates.size(); ++i)
    if (i != sel.chosen && std::abs(sel.median_np[i] - sel.median_np[sel.chosen]) <= 1e-9) sel.tie = true;
  return sel;
}

// ---------------------------------------------------------------------------
// Model features during occlusion

/// Encoder latents of the visible frames drive the dynamics model: context
/// rows at context_indices(V, T), then a rollout long enough to reach the last
/// frame. Predictions land on fractional frame times; occluded frames are
/// linearly interpolated between them (anchored on the last context latent).
/// Returns [occluded_count x d].
inline MatrixXd model_condition_latents(const dynamics::DynamicsModel& model, const MatrixXd& frame_latents,
                                        const mpong::Condition& cond, std::size_t T,
                                        dynamics::RolloutMode mode = dynamics::RolloutMode::sliding) {
  if (static_cast<std::size_t>(frame_latents.rows()) < cond.visible_count())
    throw InsufficientContext("condition " + std::to_string(cond.id) + ": latents cover " +
                              std::to_string(frame_latents.rows()) + " frames, visible epoch has " +
                              std::to_string(cond.visible_count()));
  const auto sched = mpong::rollout_schedule(cond, T);
  MatrixXd ctx(static_cast<Index>(T), frame_latents.cols());
  for (std::size_t k = 0; k < T; ++k) ctx.row(static_cast<Index>(k)) = frame_latents.row(static_cast<Index>(sched.context[k]));
  const MatrixXd pred = dynamics::rollout(model, ctx, sched.n_steps, mode);

  auto at_step = [&](std::size_t j) -> Eigen::RowVectorXd {
    return j == 0 ? Eigen::RowVectorXd(ctx.row(static_cast<Index>(T) - 1)) : Eigen::RowVectorXd(pred.row(static_cast<Index>(j) - 1));
  };
  MatrixXd out(static_cast<Index>(cond.occluded_count()), frame_latents.cols());
  for (std::size_t f = 0; f < cond.occluded_count(); ++f) {
    const double t = static_cast<double>(cond.occluded_begin() + f);
    const double u = (t - sched.step_time(0)) / sched.spacing;  // fractional step index
    auto j = static_cast<std::size_t>(std::floor(u));
    if (j >= sched.n_steps) j = sched.n_steps - 1;
    const double frac = u - static_cast<double>(j);
    out.row(static_cast<Index>(f)) = (1.0 - frac) * at_step(j) + frac * at_step(j + 1);
  }
  return out;
}

/// Runs model_condition_latents for every condition, matching encoder
/// stimuli to conditions by id.
inline std::vector<MatrixXd> model_features(const dynamics::DynamicsModel& model, const LatentDataset& encoder,
                                            const std::vector<mpong::Condition>& conditions, std::size_t T,
                                            dynamics::RolloutMode mode = dynamics::RolloutMode::sliding) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < encoder.stimuli.size(); ++i) by_id[encoder.stimuli[i]] = i;
  std::vector<MatrixXd> out;
  for (const auto& c : conditions) {
    auto it = by_id.find(std::to_string(c.id));
    if (it == by_id.end()) throw AlignmentError("no encoder latents for condition " + std::to_string(c.id));
    out.push_back(model_condition_latents(model, encoder.latents[it->second], c, T, mode));
  }
  return out;
}

/// Encoder latents read directly on the occluded frames (no dynamics).
inline std::vector<MatrixXd> encoder_features(const LatentDataset& encoder, const std::vector<mpong::Condition>& conditions) {
  std::map<std::string, std::size_t> by_id;
  for (std::size_t i = 0; i < encoder.stimuli.size(); ++i) by_id[encoder.stimuli[i]] = i;
  std::vector<MatrixXd> out;
  for (const auto& c : conditions) {
    auto it = by_id.find(std::to_string(c.id));
    if (it == by_id.end()) throw AlignmentError("no encoder latents for condition " + std::to_string(c.id));
    out.push_back(encoder.latents[it->second]);
  }
  return occluded_features(out, conditions);
}

/// Oracle ball-state features on every frame of each condition.
inline std::vector<MatrixXd> oracle_features(const mpong::BoardSpec& spec, const std::vector<mpong::Condition>& conditions,
                                             mpong::OracleKind kind) {
  std::vector<MatrixXd> out;
  for (const auto& c : conditions) out.push_back(mpong::oracle_latents(mpong::simulate_trajectory(spec, c), kind));
  return out;
}

}  // namespace msim::neuralbench
