#include <gtest/gtest.h>

#include <cmath>

#include "msim/neuralbench.hpp"
#include "msim/synth.hpp"

using namespace msim;
using namespace msim::neuralbench;

namespace {

double median(const metrics::PredictivityResult& r) { return metrics::median_sem(r.np).median; }

struct Recording {
  mpong::ConditionSet set;
  AlignedResponses both;  // animals "P" and "M"
};

/// Two animals read out from the same latent with independent readouts and noise.
Recording record(synth::ReadoutKind kind, double sigma, std::size_t n_conditions = 79, bool same_readout = false) {
  Recording r;
  r.set = mpong::generate_conditions(mpong::BoardSpec{}, n_conditions, 1);
  synth::SynthNeuralSpec p;
  p.kind = kind;
  p.sigma = sigma;
  p.n_units = 30;
  p.readout_seed = 10;
  p.animal = "P";
  auto m = p;
  m.animal = "M";
  m.n_units = 20;
  m.readout_seed = same_readout ? 10 : 11;
  m.n_trials = 8;
  if (same_readout) m.n_units = p.n_units;
  auto merged = synth::merge_animals({synth::make_synth_dmfc(r.set, p, 100), synth::make_synth_dmfc(r.set, m, 200)});
  r.both = interpolate_bins(merged, r.set);
  return r;
}

metrics::NpOptions fast_np() {
  metrics::NpOptions o;
  o.n_repeats = 4;
  return o;
}

}  // namespace

TEST(Interpolate, ConstantRampAndLength) {
  mpong::ConditionSet set;
  mpong::Condition c;
  c.id = 7;
  c.n_frames = 100;
  c.visible_end = 40;
  set.conditions.push_back(c);
  NeuralDataset nd;
  nd.bin_width_ms = 50;
  nd.animals = {{"A", 2}};
  nd.condition_ids = {"7"};
  const std::size_t B = synth::bins_for(100, 60.0, 50.0);
  Array3 bins(3, B, 2);
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t b = 0; b < B; ++b) {
      bins(k, b, 0) = 4.25;
      bins(k, b, 1) = 2.0 + 0.01 * ((b + 0.5) * 50.0) - static_cast<double>(k);  // ramp in ms
    }
  nd.responses.push_back(bins);
  auto al = interpolate_bins(nd, set);
  ASSERT_EQ(al.trials[0].dim(1), 100u);
  std::size_t inside = 0;
  for (std::size_t k = 0; k < 3; ++k)
    for (std::size_t f = 0; f < 100; ++f) {
      EXPECT_EQ(al.trials[0](k, f, 0), 4.25);
      const double t = f * 1000.0 / 60.0;
      if (t >= 25.0 && t <= (B - 0.5) * 50.0) {
        EXPECT_NEAR(al.trials[0](k, f, 1), 2.0 + 0.01 * t - static_cast<double>(k), 1e-12);
        inside += k == 0;
      }
    }
  EXPECT_EQ(al.n_clamped, 100 - inside);
  EXPECT_GT(al.n_clamped, 0u);
}

TEST(Interpolate, MissingTrialsStayMissingAndCoverageChecked) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 3, 2);
  synth::SynthNeuralSpec sp;
  sp.n_units = 4;
  auto nd = synth::make_synth_dmfc(set, sp, 1);
  for (std::size_t b = 0; b < nd.responses[1].dim(1); ++b)
    for (std::size_t u = 0; u < 4; ++u) nd.responses[1](2, b, u) = metrics::kNaN;
  auto al = interpolate_bins(nd, set);
  EXPECT_TRUE(al.trials[1].slab(2).array().isNaN().all());
  EXPECT_FALSE(al.trials[1].slab(1).array().isNaN().any());

  auto short_nd = nd;
  short_nd.responses[0] = Array3(2, 2, 4);
  EXPECT_THROW(interpolate_bins(short_nd, set), DataError);
  short_nd.condition_ids[0] = "999";
  EXPECT_THROW(interpolate_bins(short_nd, set), AlignmentError);
}

TEST(Ceiling, NoiseFreeCopyIsOne) {
  auto rec = record(synth::ReadoutKind::position_velocity, 0.0, 40, true);
  auto plan = metrics::make_split_plan(40, 5, 3);
  auto res = fit_internal_consistency(rec.both, plan, fast_np());
  EXPECT_NEAR(median(res), 1.0, 1e-6);
  EXPECT_EQ(res.animal.front(), "M");
  EXPECT_EQ(res.animal.back(), "P");
}

TEST(Ceiling, BelowOneAndFallsWithNoise) {
  auto plan = metrics::make_split_plan(79, 5, 4);
  double prev = 2.0;
  for (double sigma : {0.1, 0.5, 1.0}) {
    auto rec = record(synth::ReadoutKind::position_velocity, sigma, 79, true);
    const double c = median(fit_internal_consistency(rec.both, plan, fast_np()));
    EXPECT_LT(c, 1.0) << "sigma " << sigma;
    EXPECT_LT(c, prev) << "sigma " << sigma;
    prev = c;
  }
}

TEST(Ceiling, IndependentAnimalsNearZero) {
  // Smooth random latents give single-pair medians with sd near 0.06, so the
  // null is checked on the mean over independent pairs.
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 79, 1);
  const int pairs = 6;
  double sum = 0;
  for (int s = 0; s < pairs; ++s) {
    synth::SynthNeuralSpec a;
    a.kind = synth::ReadoutKind::random;
    a.readout_seed = 100 + s;
    a.n_units = 30;
    a.animal = "P";
    auto b = a;
    b.readout_seed = 200 + s;
    b.n_units = 20;
    b.animal = "M";
    auto A = interpolate_bins(synth::make_synth_dmfc(set, a, 1), set);
    auto B = interpolate_bins(synth::make_synth_dmfc(set, b, 2), set);
    sum += median(fit_internal_consistency(A, B, metrics::make_split_plan(79, 5, s), fast_np()));
  }
  EXPECT_NEAR(sum / pairs, 0.0, 0.05);
}

TEST(ModelPredictivity, OracleOrderingAndCeiling) {
  auto rec = record(synth::ReadoutKind::position_velocity, 0.5);
  auto plan = metrics::make_split_plan(79, 5, 6);
  const auto& conds = rec.both.conditions;
  const auto& spec = rec.set.spec;
  const double ceiling = median(fit_internal_consistency(rec.both, plan, fast_np()));
  const double pv = median(model_predictivity(oracle_features(spec, conds, mpong::OracleKind::position_velocity), rec.both, plan, fast_np()));
  const double pos = median(model_predictivity(oracle_features(spec, conds, mpong::OracleKind::position), rec.both, plan, fast_np()));
  const double vel = median(model_predictivity(oracle_features(spec, conds, mpong::OracleKind::velocity), rec.both, plan, fast_np()));
  std::vector<MatrixXd> random;
  for (std::size_t c = 0; c < conds.size(); ++c) random.push_back(synth::random_latents(conds[c].n_frames, 99, c));
  const double ctrl = median(model_predictivity(random, rec.both, plan, fast_np()));
  EXPECT_GE(pv, vel + 0.05) << pv << " vs " << vel;
  EXPECT_GE(vel, ctrl + 0.05) << vel << " vs " << ctrl;
  // Shuffled-latent control: each condition gets the next condition's trajectory, cycled to its length.
  auto donors = oracle_features(spec, conds, mpong::OracleKind::position_velocity);
  std::vector<MatrixXd> shuffled;
  for (std::size_t c = 0; c < conds.size(); ++c) {
    const auto& d = donors[(c + 1) % conds.size()];
    MatrixXd m(static_cast<Index>(conds[c].n_frames), 4);
    for (Index f = 0; f < m.rows(); ++f) m.row(f) = d.row(f % d.rows());
    shuffled.push_back(m);
  }
  const double shuf = median(model_predictivity(shuffled, rec.both, plan, fast_np()));
  EXPECT_GE(pos, shuf + 0.05) << pos << " vs " << shuf;
  EXPECT_GE(pv, pos + 0.05) << pv << " vs " << pos;
  EXPECT_GE(pos, ctrl + 0.05) << pos << " vs " << ctrl;
  EXPECT_GE(pv, 0.9 * ceiling) << pv << " ceiling " << ceiling;
  EXPECT_LE(pv, ceiling + 0.05);
}

TEST(ModelPredictivity, ConstantLatentsPredictNothing) {
  auto rec = record(synth::ReadoutKind::position_velocity, 0.5, 79);
  auto plan = metrics::make_split_plan(79, 5, 7);
  std::vector<MatrixXd> constant;
  Rng r(3, {});
  for (const auto& c : rec.both.conditions) {
    Eigen::RowVectorXd v(3);
    for (auto& x : v) x = r.normal();
    constant.push_back(v.replicate(static_cast<Index>(c.n_frames), 1));
  }
  auto res = model_predictivity(constant, rec.both, plan, fast_np());
  EXPECT_LT(std::abs(median(res)), 0.2);
  EXPECT_THROW(model_predictivity(std::vector<MatrixXd>(79, MatrixXd::Zero(3, 2)), rec.both, plan), AlignmentError);
}

TEST(BallDecode, OracleSourceIsPerfect) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 40, 8);
  auto plan = metrics::make_split_plan(40, 5, 8);
  auto feats = occluded_features(oracle_features(set.spec, set.conditions, mpong::OracleKind::position_velocity), set.conditions);
  auto bd = ball_decode(metrics::deterministic_set(feats), set.spec, set.conditions, plan, fast_np());
  for (double v : bd.per_quantity.np) EXPECT_NEAR(v, 1.0, 1e-6);
  EXPECT_NEAR(bd.joint.median, 1.0, 1e-6);
}

TEST(BallDecode, PositionReadoutFavorsPosition) {
  auto rec = record(synth::ReadoutKind::position, 0.5);
  auto plan = metrics::make_split_plan(79, 5, 9);
  auto bd = ball_decode(rec.both.occluded(), rec.set.spec, rec.both.conditions, plan, fast_np());
  EXPECT_GE(bd.position.median, bd.velocity.median + 0.2)
      << "position " << bd.position.median << " velocity " << bd.velocity.median;
}

TEST(BallDecode, PositionReadoutNoiseFree) {
  auto rec = record(synth::ReadoutKind::position, 0.0, 79);
  auto plan = metrics::make_split_plan(79, 5, 10);
  auto bd = ball_decode(rec.both.occluded(), rec.set.spec, rec.both.conditions, plan, fast_np());
  EXPECT_GE(bd.position.median, 0.95);
}

TEST(BallDecode, ShuffledConditionsNearZero) {
  auto rec = record(synth::ReadoutKind::position_velocity, 0.5);
  auto plan = metrics::make_split_plan(79, 5, 11);
  // Pair every condition's responses with another condition's ball state.
  auto conds = rec.both.conditions;
  std::vector<mpong::Condition> shuffled;
  Rng r(12, {});
  std::vector<std::size_t> perm(conds.size());
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = i;
  r.shuffle(std::span<std::size_t>(perm));
  auto src = rec.both.occluded();
  metrics::TrialSet cut;
  for (std::size_t c = 0; c < conds.size(); ++c) {
    auto donor = conds[perm[c]];
    shuffled.push_back(donor);
    // Trim or repeat frames so the source matches the donor's occluded length.
    const auto& a = src.conditions[c];
    Array3 b(a.dim(0), donor.occluded_count(), a.dim(2));
    for (std::size_t k = 0; k < a.dim(0); ++k)
      for (std::size_t f = 0; f < b.dim(1); ++f)
        for (std::size_t u = 0; u < a.dim(2); ++u) b(k, f, u) = a(k, f % a.dim(1), u);
    cut.conditions.push_back(std::move(b));
  }
  auto bd = ball_decode(cut, rec.set.spec, shuffled, plan, fast_np());
  EXPECT_NEAR(bd.joint.median, 0.0, 0.05) << bd.per_quantity.np[0] << " " << bd.per_quantity.np[1] << " "
                                          << bd.per_quantity.np[2] << " " << bd.per_quantity.np[3];
}

TEST(LayerSelection, PicksOracleAndBreaksTiesByOrder) {
  auto rec = record(synth::ReadoutKind::position_velocity, 0.5, 40);
  auto plan = metrics::make_split_plan(40, 3, 13);
  const auto& conds = rec.both.conditions;
  auto oracle = oracle_features(rec.set.spec, conds, mpong::OracleKind::position_velocity);
  std::vector<MatrixXd> noise;
  Rng r(14, {});
  for (const auto& c : conds) {
    MatrixXd m(static_cast<Index>(c.n_frames), 4);
    for (Index i = 0; i < m.size(); ++i) m.data()[i] = r.normal();
    noise.push_back(m);
  }
  auto one = select_best_layer({noise}, rec.both, plan, fast_np());
  EXPECT_EQ(one.chosen, 0u);
  auto two = select_best_layer({noise, oracle}, rec.both, plan, fast_np());
  EXPECT_EQ(two.chosen, 1u);
  EXPECT_FALSE(two.tie);
  auto tied = select_best_layer({oracle, oracle}, rec.both, plan, fast_np());
  EXPECT_EQ(tied.chosen, 0u);
  EXPECT_TRUE(tied.tie);
}

TEST(Leakage, TestOnlyMarkerIsUnpredictable) {
  // Target: one reliable unit of iid values. Source column 0 equals that unit
  // on test conditions and is zero on training conditions; only a fit that
  // saw test frames could use it.
  const std::size_t C = 40, F = 15;
  auto plan = metrics::make_split_plan(C, 1, 15);
  std::vector<bool> is_test(C, false);
  for (auto c : plan.test[0]) is_test[c] = true;
  Rng r(16, {});
  metrics::TrialSet target;
  std::vector<MatrixXd> source;
  for (std::size_t c = 0; c < C; ++c) {
    Array3 t(2, F, 1);
    MatrixXd s(static_cast<Index>(F), 2);
    for (std::size_t f = 0; f < F; ++f) {
      const double v = r.normal();
      t(0, f, 0) = t(1, f, 0) = v;
      s(static_cast<Index>(f), 0) = is_test[c] ? v : 0.0;
      s(static_cast<Index>(f), 1) = r.normal();
    }
    target.conditions.push_back(std::move(t));
    source.push_back(s);
  }
  auto res = metrics::neural_predictivity(metrics::deterministic_set(source), target, plan, fast_np());
  EXPECT_LT(std::abs(res.np[0]), 0.15);
}

TEST(ModelFeatures, NoDynamicsHoldsLastContextLatent) {
  auto set = mpong::generate_conditions(mpong::BoardSpec{}, 4, 17);
  dynamics::DynamicsModel none;
  none.d = 4;
  for (const auto& c : set.conditions) {
    MatrixXd lat = mpong::oracle_latents(mpong::simulate_trajectory(set.spec, c), mpong::OracleKind::position_velocity);
    auto f = model_condition_latents(none, lat, c, 7);
    ASSERT_EQ(static_cast<std::size_t>(f.rows()), c.occluded_count());
    for (Index i = 0; i < f.rows(); ++i) EXPECT_TRUE(f.row(i).isApprox(lat.row(static_cast<Index>(c.visible_end)), 1e-14));
  }
}

TEST(ModelFeatures, PredictionsLandOnStepTimes) {
  // Condition with V - 1 divisible by T - 1: step j falls on an integer frame.
  mpong::Condition c;
  c.id = 1;
  c.visible_end = 36;  // V = 37, spacing 6
  c.n_frames = 80;
  dynamics::ModelOptions opt;
  opt.hidden = 5;
  auto m = dynamics::make_model(dynamics::Kind::ctrnn, 2, opt, 3);
  MatrixXd lat = MatrixXd::Random(80, 2);
  auto f = model_condition_latents(m, lat, c, 7);
  auto sched = mpong::rollout_schedule(c, 7);
  MatrixXd ctx(7, 2);
  for (int k = 0; k < 7; ++k) ctx.row(k) = lat.row(static_cast<Index>(sched.context[k]));
  auto pred = dynamics::rollout(m, ctx, sched.n_steps);
  for (std::size_t j = 1; j <= sched.n_steps; ++j) {
    const auto frame = static_cast<std::size_t>(sched.step_time(j));
    if (frame >= c.n_frames) break;
    EXPECT_TRUE(f.row(static_cast<Index>(frame - c.occluded_begin())).isApprox(pred.row(static_cast<Index>(j - 1)), 1e-12));
  }
}
