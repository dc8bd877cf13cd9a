#pragma once

// Synthetic data with known ground truth: linear latent worlds for dynamics
// training, and simulated DMFC populations reading out Mental-Pong ball state.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "msim/array3.hpp"
#include "msim/error.hpp"
#include "msim/mpong.hpp"
#include "msim/rng.hpp"
#include "msim/tensorio.hpp"

namespace msim::synth {

struct LinearWorld {
  LatentDataset data;
  Eigen::MatrixXd A;  // h_{t+1} = A h_t + noise
};

/// Symmetric A = Q diag(lambda) Q^T with lambda_0 = spectral_radius and the
/// remaining eigenvalues uniform in [-0.9 rho, 0.9 rho]; h_0 ~ N(0, I).
inline LinearWorld make_linear_world(std::size_t d, double spectral_radius, std::size_t n_stimuli, std::size_t frames,
                                     double noise_sigma, std::uint64_t seed) {
  if (!(spectral_radius > 0 && spectral_radius < 1)) throw ConfigError("spectral radius must lie in (0, 1)");
  if (d == 0 || n_stimuli == 0 || frames < 2) throw ConfigError("linear world needs d >= 1, stimuli >= 1, frames >= 2");
  if (!(noise_sigma >= 0)) throw ConfigError("noise sigma must be >= 0");
  const auto D = static_cast<Eigen::Index>(d);
  Rng rng(seed, {0x4c696e41ULL});
  Eigen::MatrixXd G(D, D);
  for (Eigen::Index j = 0; j < D; ++j)
    for (Eigen::Index i = 0; i < D; ++i) G(i, j) = rng.normal();
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(G);
  Eigen::MatrixXd Q = qr.householderQ();
  Eigen::VectorXd lambda(D);
  lambda(0) = spectral_radius;
  for (Eigen::Index i = 1; i < D; ++i) lambda(i) = rng.uniform(-0.9, 0.9) * spectral_radius;

  LinearWorld w;
  w.A = Q * lambda.asDiagonal() * Q.transpose();
  w.A = 0.5 * (w.A + w.A.transpose());
  w.data.d = d;
  w.data.subsample = 1;
  for (std::size_t s = 0; s < n_stimuli; ++s) {
    Rng r(seed, {0x73746dULL, s});
    Eigen::MatrixXd L(static_cast<Eigen::Index>(frames), D);
    for (Eigen::Index i = 0; i < D; ++i) L(0, i) = r.normal();
    for (Eigen::Index t = 1; t < L.rows(); ++t) {
      L.row(t) = (w.A * L.row(t - 1).transpose()).transpose();
      if (noise_sigma > 0)
        for (Eigen::Index i = 0; i < D; ++i) L(t, i) += noise_sigma * r.normal();
    }
    w.data.stimuli.push_back("lw" + std::to_string(s));
    w.data.latents.push_back(std::move(L));
    w.data.scenario.emplace_back();
    w.data.label.emplace_back();
  }
  return w;
}

/// Variance of all latent entries pooled across stimuli and frames.
inline double pooled_variance(const LatentDataset& ds) {
  double sum = 0, sq = 0, n = 0;
  for (const auto& L : ds.latents) {
    sum += L.sum();
    sq += L.squaredNorm();
    n += static_cast<double>(L.size());
  }
  const double mean = sum / n;
  return sq / n - mean * mean;
}

// ---------------------------------------------------------------------------
// Synthetic DMFC populations

enum class ReadoutKind { position, velocity, position_velocity, random };

inline ReadoutKind parse_readout_kind(const std::string& s) {
  if (s == "pos" || s == "position") return ReadoutKind::position;
  if (s == "vel" || s == "velocity") return ReadoutKind::velocity;
  if (s == "pos+vel" || s == "position+velocity") return ReadoutKind::position_velocity;
  if (s == "random") return ReadoutKind::random;
  throw ConfigError("unknown readout kind '" + s + "' (expected pos, vel, pos+vel or random)");
}

inline const char* readout_name(ReadoutKind k) {
  switch (k) {
    case ReadoutKind::position: return "pos";
    case ReadoutKind::velocity: return "vel";
    case ReadoutKind::position_velocity: return "pos+vel";
    case ReadoutKind::random: return "random";
  }
  return "?";
}

struct SynthNeuralSpec {
  std::size_t n_units = 40;
  ReadoutKind kind = ReadoutKind::position_velocity;
  std::uint64_t readout_seed = 0;
  double sigma = 0.5;  // trial noise sd, in rate units
  std::size_t n_trials = 10;
  bool softplus = false;
  double bin_width_ms = 50.0;
  std::string animal = "A";

  void validate() const {
    if (n_units == 0) throw ConfigError("synthetic population needs n_units >= 1");
    if (!(sigma >= 0)) throw ConfigError("noise sigma must be >= 0");
    if (n_trials < 2) throw ConfigError("synthetic population needs n_trials >= 2");
    if (!(bin_width_ms > 0)) throw ConfigError("bin width must be > 0");
  }
};

/// Ball state (x, y, vx, vy) per frame, [frames x 4].
inline Eigen::MatrixXd ball_state(const mpong::BallTrajectory& traj) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(traj.size()), 4);
  for (std::size_t f = 0; f < traj.size(); ++f) {
    const auto i = static_cast<Eigen::Index>(f);
    m.row(i) << traj.position[f].x(), traj.position[f].y(), traj.velocity[f].x(), traj.velocity[f].y();
  }
  return m;
}

/// Smooth random 4-d latents per condition: independent of the ball, used
/// for the random readout.
inline Eigen::MatrixXd random_latents(std::size_t frames, std::uint64_t seed, std::size_t condition) {
  Rng r(seed, {0x726e64ULL, condition});
  Eigen::MatrixXd m(static_cast<Eigen::Index>(frames), 4);
  for (Eigen::Index j = 0; j < 4; ++j) {
    const double f1 = r.uniform(0.01, 0.06), f2 = r.uniform(0.03, 0.12);
    const double p1 = r.uniform(0, 6.283), p2 = r.uniform(0, 6.283), off = r.normal();
    for (Eigen::Index t = 0; t < m.rows(); ++t) m(t, j) = off + std::sin(f1 * t + p1) + 0.5 * std::sin(f2 * t + p2);
  }
  return m;
}

/// Number of bins covering frames 0..n_frames-1 at the given frame rate.
inline std::size_t bins_for(std::size_t n_frames, double frame_rate, double bin_width_ms) {
  const double t_last = static_cast<double>(n_frames - 1) / frame_rate * 1000.0;
  return static_cast<std::size_t>(std::floor(t_last / bin_width_ms)) + 1;
}

/// Units read out a z-scored latent (ball state, or random latents) through a
/// Gaussian matrix M; rates are averaged into bins and each trial adds
/// Gaussian noise. The readout is drawn from spec.readout_seed, the noise from
/// seed, so two seeds with one readout give two recordings of one population.
inline NeuralDataset make_synth_dmfc(const mpong::ConditionSet& set, const SynthNeuralSpec& spec, std::uint64_t seed) {
  spec.validate();
  if (set.conditions.empty()) throw ConfigError("no conditions to simulate");
  const double fr = set.spec.frame_rate;

  std::vector<Eigen::MatrixXd> latent;
  for (std::size_t c = 0; c < set.size(); ++c) {
    const auto& cond = set.conditions[c];
    if (spec.kind == ReadoutKind::random)
      latent.push_back(random_latents(cond.n_frames, spec.readout_seed, c));
    else
      latent.push_back(ball_state(mpong::simulate_trajectory(set.spec, cond)));
  }
  // z-score each latent dimension over every frame of every condition
  Eigen::RowVectorXd sum = Eigen::RowVectorXd::Zero(4), sq = Eigen::RowVectorXd::Zero(4);
  double n = 0;
  for (const auto& m : latent) {
    sum += m.colwise().sum();
    sq += m.array().square().matrix().colwise().sum();
    n += static_cast<double>(m.rows());
  }
  const Eigen::RowVectorXd mean = sum / n;
  Eigen::RowVectorXd sd = (sq / n - mean.cwiseProduct(mean)).cwiseMax(0.0).cwiseSqrt();
  for (Eigen::Index j = 0; j < 4; ++j)
    if (!(sd(j) > 1e-12)) sd(j) = 1.0;

  const auto U = static_cast<Eigen::Index>(spec.n_units);
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(U, 4);
  {
    Rng r(spec.readout_seed, {0x72656164ULL});
    const bool pos = spec.kind != ReadoutKind::velocity;
    const bool vel = spec.kind != ReadoutKind::position;
    const double active = (pos ? 2.0 : 0.0) + (vel ? 2.0 : 0.0);
    for (Eigen::Index u = 0; u < U; ++u)
      for (Eigen::Index j = 0; j < 4; ++j) {
        const double w = r.normal(0.0, 1.0 / std::sqrt(active));  // drawn for every slot so kinds share draws
        if ((j < 2 && pos) || (j >= 2 && vel)) M(u, j) = w;
      }
  }

  NeuralDataset ds;
  ds.bin_width_ms = spec.bin_width_ms;
  ds.animals.push_back({spec.animal, spec.n_units});
  for (std::size_t c = 0; c < set.size(); ++c) {
    const auto& cond = set.conditions[c];
    const Eigen::MatrixXd z = (latent[c].rowwise() - mean).array().rowwise() / sd.array();
    Eigen::MatrixXd rate = z * M.transpose();  // [frames x units]
    if (spec.softplus) rate = rate.unaryExpr([](double v) { return v > 30 ? v : std::log1p(std::exp(v)); });

    const std::size_t B = bins_for(cond.n_frames, fr, spec.bin_width_ms);
    Eigen::MatrixXd binned = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(B), U);
    Eigen::VectorXd count = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(B));
    for (std::size_t f = 0; f < cond.n_frames; ++f) {
      const double t = static_cast<double>(f) / fr * 1000.0;
      const auto b = static_cast<Eigen::Index>(std::min<std::size_t>(B - 1, static_cast<std::size_t>(t / spec.bin_width_ms)));
      binned.row(b) += rate.row(static_cast<Eigen::Index>(f));
      count(b) += 1;
    }
    for (Eigen::Index b = 0; b < binned.rows(); ++b) binned.row(b) /= count(b);

    Array3 trials(spec.n_trials, B, spec.n_units);
    for (std::size_t k = 0; k < spec.n_trials; ++k) {
      Rng r(seed, {0x747269ULL, c, k});
      auto slab = trials.slab(k);
      for (Eigen::Index u = 0; u < U; ++u)
        for (Eigen::Index b = 0; b < binned.rows(); ++b)
          slab(b, u) = binned(b, u) + (spec.sigma > 0 ? spec.sigma * r.normal() : 0.0);
    }
    ds.condition_ids.push_back(std::to_string(cond.id));
    ds.responses.push_back(std::move(trials));
    ds.missing_trials.push_back(0);
  }
  return ds;
}

/// Concatenates animals along the unit axis. Conditions must match by id;
/// shorter trial axes are padded with all-NaN (missing) trials.
inline NeuralDataset merge_animals(const std::vector<NeuralDataset>& parts) {
  if (parts.empty()) throw ConfigError("nothing to merge");
  NeuralDataset out;
  out.bin_width_ms = parts.front().bin_width_ms;
  out.condition_ids = parts.front().condition_ids;
  for (const auto& p : parts) {
    if (p.condition_ids != out.condition_ids) throw AlignmentError("animals disagree on condition ids");
    if (p.bin_width_ms != out.bin_width_ms) throw AlignmentError("animals disagree on bin width");
    out.animals.insert(out.animals.end(), p.animals.begin(), p.animals.end());
  }
  for (std::size_t c = 0; c < out.condition_ids.size(); ++c) {
    std::size_t trials = 0, bins = parts.front().responses[c].dim(1);
    for (const auto& p : parts) {
      trials = std::max(trials, p.responses[c].dim(0));
      if (p.responses[c].dim(1) != bins) throw AlignmentError("animals disagree on bin count for condition " + out.condition_ids[c]);
    }
    Array3 a(trials, bins, out.n_units());
    std::fill(a.data().begin(), a.data().end(), std::numeric_limits<double>::quiet_NaN());
    std::size_t off = 0;
    for (const auto& p : parts) {
      const auto& r = p.responses[c];
      for (std::size_t k = 0; k < r.dim(0); ++k)
        for (std::size_t b = 0; b < bins; ++b)
          for (std::size_t u = 0; u < r.dim(2); ++u) a(k, b, off + u) = r(k, b, u);
      off += r.dim(2);
    }
    std::size_t missing = 0;
    for (std::size_t k = 0; k < trials; ++k) missing += a.slab(k).array().isNaN().all();
    out.responses.push_back(std::move(a));
    out.missing_trials.push_back(missing);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Object-contact prediction

/// Stimulus counts per scenario of the human-tested OCP set.
inline std::vector<std::size_t> physion_test_counts() { return {150, 149, 150, 150, 150, 150, 94, 149}; }

struct OcpSynthSpec {
  std::vector<std::size_t> test_counts = physion_test_counts();
  std::size_t train_per_scenario = 200;
  std::size_t d = 8;
  std::size_t frames = 25;
  double spectral_radius = 0.9;
  double margin = 0.5;        // |h0[0]| >= margin, so the label is separable
  double human_slope = 2.0;   // p_hit = sigmoid(slope * h0[0]) + noise
  double human_noise = 0.1;
  bool shuffle_labels = false;  // labels independent of the latents

  void validate() const {
    if (test_counts.empty()) throw ConfigError("OCP synth needs at least one scenario");
    for (auto c : test_counts)
      if (c == 0) throw ConfigError("OCP synth scenarios need at least one test stimulus");
    if (train_per_scenario < 2) throw ConfigError("OCP synth needs >= 2 training stimuli per scenario");
    if (d == 0 || frames < 2) throw ConfigError("OCP synth needs d >= 1 and frames >= 2");
    if (!(margin >= 0) || !(human_noise >= 0)) throw ConfigError("OCP synth margin and noise must be >= 0");
  }
};

struct OcpSynth {
  LatentDataset train;
  LatentDataset test;
  HumanJudgements judgements;  // for the test stimuli
};

/// Latents follow one shared stable linear map; the hit label is the sign of
/// the first coordinate of h0, which is pushed at least margin away from 0.
/// Human proportions are a noisy sigmoid of that coordinate.
inline OcpSynth make_ocp(const OcpSynthSpec& spec, std::uint64_t seed) {
  spec.validate();
  const auto world = make_linear_world(spec.d, spec.spectral_radius, 1, 2, 0.0, seed);
  const auto D = static_cast<Eigen::Index>(spec.d);
  OcpSynth out;
  auto fill = [&](LatentDataset& ds, bool is_test, std::size_t scenario, std::size_t count) {
    for (std::size_t i = 0; i < count; ++i) {
      Rng r(seed, {0x6f6370ULL, is_test, scenario, i});
      const int hit = static_cast<int>(r.below(2));
      Eigen::MatrixXd L(static_cast<Eigen::Index>(spec.frames), D);
      for (Eigen::Index j = 0; j < D; ++j) L(0, j) = r.normal();
      L(0, 0) = (hit ? 1.0 : -1.0) * (spec.margin + std::abs(L(0, 0)));
      for (Eigen::Index t = 1; t < L.rows(); ++t) L.row(t) = (world.A * L.row(t - 1).transpose()).transpose();
      const int label = spec.shuffle_labels ? static_cast<int>(r.below(2)) : hit;
      const std::string name = (is_test ? "test_s" : "train_s") + std::to_string(scenario + 1) + "_" + std::to_string(i);
      const std::string sc = "scenario_" + std::to_string(scenario + 1);
      ds.stimuli.push_back(name);
      ds.latents.push_back(L);
      ds.scenario.push_back(sc);
      ds.label.emplace_back(label);
      if (is_test) {
        const double p = 1.0 / (1.0 + std::exp(-spec.human_slope * L(0, 0))) + spec.human_noise * r.normal();
        out.judgements.stimuli.push_back(name);
        out.judgements.p_hit.push_back(std::clamp(p, 0.0, 1.0));
        out.judgements.label.push_back(label);
        out.judgements.scenario.push_back(sc);
      }
    }
  };
  for (auto* ds : {&out.train, &out.test}) {
    ds->d = spec.d;
    ds->subsample = 1;
  }
  for (std::size_t s = 0; s < spec.test_counts.size(); ++s) {
    fill(out.train, false, s, spec.train_per_scenario);
    fill(out.test, true, s, spec.test_counts[s]);
    out.judgements.scenario_counts.emplace_back("scenario_" + std::to_string(s + 1), spec.test_counts[s]);
  }
  return out;
}

}  // namespace msim::synth
