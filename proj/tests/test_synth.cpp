#include <gtest/gtest.h>

#include <cmath>

#include "msim/metrics.hpp"
#include "msim/neuralbench.hpp"
#include "msim/synth.hpp"

using namespace msim;

namespace {

/// Largest |eigenvalue| by power iteration on A^T A (A is symmetric, so this
/// is rho(A)^2).
double power_iteration_radius(const Eigen::MatrixXd& A) {
  Eigen::VectorXd v = Eigen::VectorXd::Ones(A.rows());
  const Eigen::MatrixXd S = A.transpose() * A;
  double lambda = 0;
  for (int i = 0; i < 20000; ++i) {
    Eigen::VectorXd w = S * v;
    lambda = w.norm();
    v = w / lambda;
  }
  return std::sqrt(lambda);
}

}  // namespace

TEST(LinearWorld, NoiselessSequencesFollowA) {
  auto w = synth::make_linear_world(6, 0.9, 5, 30, 0.0, 2);
  ASSERT_EQ(w.data.latents.size(), 5u);
  for (const auto& L : w.data.latents)
    for (Eigen::Index t = 0; t + 1 < L.rows(); ++t) {
      const Eigen::VectorXd r = L.row(t + 1).transpose() - w.A * L.row(t).transpose();
      EXPECT_LT(r.cwiseAbs().maxCoeff(), 1e-12);
    }
}

TEST(LinearWorld, SpectralRadiusMatchesRequest) {
  for (double rho : {0.5, 0.9, 0.95}) {
    auto w = synth::make_linear_world(16, rho, 1, 2, 0.0, 11);
    EXPECT_NEAR(power_iteration_radius(w.A), rho, 1e-6);
  }
}

TEST(LinearWorld, DeterministicAndSeedSensitive) {
  auto a = synth::make_linear_world(4, 0.8, 3, 10, 0.1, 9);
  auto b = synth::make_linear_world(4, 0.8, 3, 10, 0.1, 9);
  auto c = synth::make_linear_world(4, 0.8, 3, 10, 0.1, 10);
  EXPECT_EQ(a.A, b.A);
  for (std::size_t s = 0; s < 3; ++s) EXPECT_EQ(a.data.latents[s], b.data.latents[s]);
  EXPECT_NE(a.A, c.A);
}

TEST(LinearWorld, NoiseEntersEachStep) {
  auto w = synth::make_linear_world(3, 0.8, 200, 6, 0.3, 4);
  double sq = 0, n = 0;
  for (const auto& L : w.data.latents)
    for (Eigen::Index t = 0; t + 1 < L.rows(); ++t) {
      sq += (L.row(t + 1).transpose() - w.A * L.row(t).transpose()).squaredNorm();
      n += 3;
    }
  EXPECT_NEAR(std::sqrt(sq / n), 0.3, 0.02);
}

TEST(LinearWorld, RejectsBadRadius) {
  EXPECT_THROW(synth::make_linear_world(3, 1.0, 1, 5, 0, 1), ConfigError);
  EXPECT_THROW(synth::make_linear_world(3, 0.0, 1, 5, 0, 1), ConfigError);
  EXPECT_THROW(synth::make_linear_world(3, 0.5, 1, 5, -1, 1), ConfigError);
}

TEST(SynthDmfc, ShapesBinsAndIds) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 6, 3);
  synth::SynthNeuralSpec sp;
  sp.n_units = 7;
  sp.n_trials = 3;
  auto nd = synth::make_synth_dmfc(set, sp, 1);
  ASSERT_EQ(nd.responses.size(), 6u);
  EXPECT_EQ(nd.n_units(), 7u);
  for (std::size_t c = 0; c < 6; ++c) {
    const auto& cond = set.conditions[c];
    EXPECT_EQ(nd.condition_ids[c], std::to_string(cond.id));
    EXPECT_EQ(nd.responses[c].dim(0), 3u);
    const std::size_t B = nd.responses[c].dim(1);
    EXPECT_EQ(B, synth::bins_for(cond.n_frames, set.spec.frame_rate, 50.0));
    EXPECT_GE(B * 50.0, (cond.n_frames - 1) * 1000.0 / set.spec.frame_rate);
  }
}

TEST(SynthDmfc, NoiseFreeBinsAverageTheReadout) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 3, 5);
  synth::SynthNeuralSpec sp;
  sp.sigma = 0;
  sp.n_units = 3;
  sp.n_trials = 2;
  auto nd = synth::make_synth_dmfc(set, sp, 1);
  for (const auto& r : nd.responses) EXPECT_EQ(r.slab(0), r.slab(1));
  // Two noise seeds, one readout: the noise-free signals coincide.
  auto other = synth::make_synth_dmfc(set, sp, 2);
  for (std::size_t c = 0; c < 3; ++c) EXPECT_EQ(nd.responses[c].data(), other.responses[c].data());
}

TEST(SynthDmfc, ReadoutKindsShareDraws) {
  // Position-only units are the position columns of the full readout, so
  // pos + vel rates decompose into the pos-only and vel-only rates.
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 4, 6);
  synth::SynthNeuralSpec sp;
  sp.sigma = 0;
  sp.n_units = 5;
  auto full = synth::make_synth_dmfc(set, sp, 1);
  sp.kind = synth::ReadoutKind::position;
  auto pos = synth::make_synth_dmfc(set, sp, 1);
  sp.kind = synth::ReadoutKind::velocity;
  auto vel = synth::make_synth_dmfc(set, sp, 1);
  // Scale factors: 1/sqrt(4) for pos+vel, 1/sqrt(2) for the single kinds.
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t i = 0; i < full.responses[c].data().size(); ++i)
      EXPECT_NEAR(full.responses[c].data()[i],
                  (pos.responses[c].data()[i] + vel.responses[c].data()[i]) / std::sqrt(2.0), 1e-12);
}

TEST(SynthDmfc, SoftplusKeepsRatesPositive) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 3, 7);
  synth::SynthNeuralSpec sp;
  sp.sigma = 0;
  sp.softplus = true;
  auto nd = synth::make_synth_dmfc(set, sp, 1);
  for (const auto& r : nd.responses)
    for (double v : r.data()) EXPECT_GT(v, 0.0);
}

TEST(SynthDmfc, ReliabilityFallsWithNoise) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 20, 8);
  double prev = 2.0;
  for (double sigma : {0.0, 0.25, 0.5, 1.0}) {
    synth::SynthNeuralSpec sp;
    sp.sigma = sigma;
    sp.n_units = 10;
    auto al = neuralbench::interpolate_bins(synth::make_synth_dmfc(set, sp, 3), set);
    auto ts = al.occluded();
    // Split-half reliability of the pooled occluded responses, per unit.
    double mean_r = 0;
    for (std::size_t u = 0; u < al.n_units(); ++u) {
      std::vector<double> a, b;
      Rng rng(4, {u});
      std::vector<std::size_t> idx(ts.conditions[0].dim(0));
      for (std::size_t k = 0; k < idx.size(); ++k) idx[k] = k;
      rng.shuffle(std::span<std::size_t>(idx));
      const std::size_t h = idx.size() / 2;
      for (const auto& c : ts.conditions)
        for (std::size_t f = 0; f < c.dim(1); ++f) {
          double s1 = 0, s2 = 0;
          for (std::size_t k = 0; k < h; ++k) s1 += c(idx[k], f, u);
          for (std::size_t k = h; k < idx.size(); ++k) s2 += c(idx[k], f, u);
          a.push_back(s1 / h);
          b.push_back(s2 / (idx.size() - h));
        }
      mean_r += metrics::spearman_brown(metrics::pearson(a, b)) / al.n_units();
    }
    if (sigma == 0.0) EXPECT_NEAR(mean_r, 1.0, 1e-12);
    EXPECT_LT(mean_r, prev) << "sigma " << sigma;
    prev = mean_r;
  }
}

TEST(SynthDmfc, PositionReadoutLeavesVelocityNearChance) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 79, 1);
  synth::SynthNeuralSpec sp;
  sp.kind = synth::ReadoutKind::position;
  sp.sigma = 0;
  sp.n_units = 30;
  auto al = neuralbench::interpolate_bins(synth::make_synth_dmfc(set, sp, 3), set);
  metrics::NpOptions o;
  o.n_repeats = 2;
  auto bd = neuralbench::ball_decode(al.occluded(), set.spec, al.conditions, metrics::make_split_plan(79, 5, 2), o);
  EXPECT_GE(bd.position.median, 0.95);
  EXPECT_LT(bd.velocity.median, 0.3) << bd.per_quantity.np[2] << " " << bd.per_quantity.np[3];
}

TEST(SynthDmfc, MergePadsMissingTrials) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 3, 9);
  synth::SynthNeuralSpec a, b;
  a.n_units = 2;
  a.n_trials = 4;
  a.animal = "P";
  b.n_units = 3;
  b.n_trials = 2;
  b.animal = "M";
  b.readout_seed = 1;
  auto m = synth::merge_animals({synth::make_synth_dmfc(set, a, 1), synth::make_synth_dmfc(set, b, 2)});
  ASSERT_EQ(m.animals.size(), 2u);
  EXPECT_EQ(m.n_units(), 5u);
  EXPECT_EQ(m.responses[0].dim(0), 4u);
  EXPECT_TRUE(std::isnan(m.responses[0](3, 0, 4)));
  EXPECT_FALSE(std::isnan(m.responses[0](3, 0, 1)));
  EXPECT_EQ(m.missing_trials[0], 0u);  // trial rows are only partly missing
}

TEST(SynthDmfc, Validation) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 2, 9);
  synth::SynthNeuralSpec sp;
  sp.n_trials = 1;
  EXPECT_THROW(synth::make_synth_dmfc(set, sp, 1), ConfigError);
  sp.n_trials = 2;
  sp.sigma = -1;
  EXPECT_THROW(synth::make_synth_dmfc(set, sp, 1), ConfigError);
  EXPECT_EQ(synth::parse_readout_kind("pos+vel"), synth::ReadoutKind::position_velocity);
  EXPECT_THROW(synth::parse_readout_kind("speed"), ConfigError);
}
