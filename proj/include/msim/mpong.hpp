#pragma once

// Mental-Pong: a ball launched from the left half of a board travels toward a
// paddle line on the right, bouncing specularly off the top, bottom and left
// walls, and disappears behind an occluder before reaching the paddle.
// All geometry is in degrees of visual angle; y grows upward.

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <string>
#include <vector>

#include "msim/array3.hpp"
#include "msim/error.hpp"
#include "msim/rng.hpp"

namespace msim::mpong {

struct Rect {
  double x0 = 0, y0 = 0, x1 = 0, y1 = 0;
  double width() const { return x1 - x0; }
  bool contains(double x, double y) const { return x >= x0 && x <= x1 && y >= y0 && y <= y1; }
};

struct BoardSpec {
  double width = 20.0;
  double height = 10.0;
  Rect occluder{13.0, 0.0, 20.0, 10.0};  // right 35% of the board
  double paddle_x = 19.5;
  double ball_radius = 0.35;
  double ball_speed = 7.25;  // deg/s; puts every default condition in [89, 217] frames
  double frame_rate = 60.0;

  // Start-state sampling for generate_conditions.
  double start_x_min = 2.0;
  double start_x_max = 8.0;
  double max_start_angle = std::numbers::pi / 4;
  std::size_t frame_cap = 5000;

  /// Draw the occluder in visible-epoch frames too (it is always drawn while occluded).
  bool occluder_always_visible = true;

  double dt() const { return 1.0 / frame_rate; }

  void validate() const {
    auto bad = [](const std::string& m) { return ConfigError("BoardSpec: " + m); };
    if (!(width > 0 && height > 0)) throw bad("board dimensions must be positive");
    if (!(ball_speed > 0)) throw bad("ball_speed must be > 0");
    if (!(frame_rate > 0)) throw bad("frame_rate must be > 0");
    if (!(ball_radius > 0 && 2 * ball_radius < height)) throw bad("ball_radius must fit the board");
    if (!(occluder.x0 >= 0 && occluder.x1 <= width && occluder.x0 < occluder.x1 && occluder.y0 >= 0 &&
          occluder.y1 <= height && occluder.y0 < occluder.y1))
      throw bad("occluder must lie inside the board");
    if (occluder.x1 != width) throw bad("occluder must be adjacent to the paddle side");
    if (!(occluder.width() > 2 * ball_radius)) throw bad("occluder must be wider than the ball");
    if (!(paddle_x > occluder.x0 && paddle_x <= width - ball_radius)) throw bad("paddle_x must lie behind the occluder");
    if (!(start_x_min >= ball_radius && start_x_min <= start_x_max && start_x_max < occluder.x0))
      throw bad("start x range must lie left of the occluder");
    if (!(max_start_angle >= 0 && max_start_angle < std::numbers::pi / 2)) throw bad("max_start_angle must be in [0, pi/2)");
  }
};

enum class Wall { top, bottom, left };

struct Bounce {
  double time = 0;
  Wall wall = Wall::top;
  Eigen::Vector2d v_in, v_out;
};

struct BallTrajectory {
  std::vector<Eigen::Vector2d> position;  // deg
  std::vector<Eigen::Vector2d> velocity;  // deg/s
  std::vector<Bounce> bounces;
  double dt = 0;
  std::size_t size() const { return position.size(); }
};

struct Condition {
  int id = 0;
  Eigen::Vector2d start_pos{0, 0};
  double start_angle = 0;
  std::size_t n_frames = 0;
  /// Index of the last frame whose ball center is left of the occluder.
  std::size_t visible_end = 0;

  std::size_t visible_count() const { return visible_end + 1; }
  std::size_t occluded_begin() const { return visible_end + 1; }
  std::size_t occluded_count() const { return n_frames - visible_end - 1; }
};

struct ConditionSet {
  BoardSpec spec;
  std::uint64_t seed = 0;
  std::vector<Condition> conditions;
  std::size_t size() const { return conditions.size(); }
};

namespace detail {

// Advances a ball by `span` seconds, reflecting off walls at the exact crossing times.
inline void advance(const BoardSpec& spec, double t0, double span, Eigen::Vector2d& p, Eigen::Vector2d& v,
                    std::vector<Bounce>& bounces) {
  const double r = spec.ball_radius;
  const double top = spec.height - r, bottom = r, left = r;
  double t = t0, remaining = span;
  for (int guard = 0; guard < 1000000; ++guard) {
    double tau = std::numeric_limits<double>::infinity();
    Wall wall = Wall::top;
    if (v.y() > 0 && (top - p.y()) / v.y() < tau) tau = (top - p.y()) / v.y(), wall = Wall::top;
    if (v.y() < 0 && (bottom - p.y()) / v.y() < tau) tau = (bottom - p.y()) / v.y(), wall = Wall::bottom;
    if (v.x() < 0 && (left - p.x()) / v.x() < tau) tau = (left - p.x()) / v.x(), wall = Wall::left;
    tau = std::max(tau, 0.0);
    if (tau >= remaining) {
      p += v * remaining;
      return;
    }
    p += v * tau;
    Bounce b{t + tau, wall, v, v};
    if (wall == Wall::left) {
      p.x() = left;
      b.v_out.x() = -v.x();
    } else {
      p.y() = wall == Wall::top ? top : bottom;
      b.v_out.y() = -v.y();
    }
    v = b.v_out;
    bounces.push_back(b);
    t += tau;
    remaining -= tau;
  }
  throw NumericalError("ball trajectory failed to advance (degenerate bounce sequence)");
}

}  // namespace detail

/// Frames at t_k = k / frame_rate for every k whose ball center has not passed paddle_x.
inline BallTrajectory simulate_trajectory(const BoardSpec& spec, const Eigen::Vector2d& start_pos, double start_angle) {
  const double r = spec.ball_radius;
  if (!(start_pos.x() >= r && start_pos.x() <= spec.width - r && start_pos.y() >= r && start_pos.y() <= spec.height - r))
    throw ConfigError("start position lies outside the playable board");
  if (spec.occluder.contains(start_pos.x(), start_pos.y())) throw ConfigError("start position lies inside the occluder");

  BallTrajectory traj;
  traj.dt = spec.dt();
  Eigen::Vector2d p = start_pos;
  Eigen::Vector2d v(spec.ball_speed * std::cos(start_angle), spec.ball_speed * std::sin(start_angle));
  traj.position.push_back(p);
  traj.velocity.push_back(v);
  for (std::size_t k = 1;; ++k) {
    if (k > spec.frame_cap)
      throw GenerationError("ball did not reach the paddle within " + std::to_string(spec.frame_cap) + " frames");
    Eigen::Vector2d q = p, w = v;
    std::vector<Bounce> b;
    detail::advance(spec, (k - 1) * traj.dt, traj.dt, q, w, b);
    if (q.x() > spec.paddle_x) break;
    p = q;
    v = w;
    traj.position.push_back(p);
    traj.velocity.push_back(v);
    traj.bounces.insert(traj.bounces.end(), b.begin(), b.end());
    if (p.x() == spec.paddle_x) break;
  }
  return traj;
}

inline BallTrajectory simulate_trajectory(const BoardSpec& spec, const Condition& c) {
  return simulate_trajectory(spec, c.start_pos, c.start_angle);
}

/// Last frame index before the ball center enters the occluder's x-extent.
inline std::size_t visible_end_of(const BoardSpec& spec, const BallTrajectory& traj) {
  std::size_t k = 0;
  while (k < traj.size() && traj.position[k].x() < spec.occluder.x0) ++k;
  if (k == 0) throw GenerationError("trajectory starts occluded");
  return k - 1;
}

/// Conditions drawn from Rng(seed, {condition index, attempt}); rejected draws
/// (no occluded frame, or no visible frame) are redrawn deterministically.
inline ConditionSet generate_conditions(const BoardSpec& spec, std::size_t n, std::uint64_t seed) {
  if (n < 1) throw ConfigError("generate_conditions: n must be >= 1");
  spec.validate();
  ConditionSet set{spec, seed, {}};
  const double r = spec.ball_radius;
  for (std::size_t i = 0; i < n; ++i) {
    bool done = false;
    for (std::uint64_t attempt = 0; attempt < 64 && !done; ++attempt) {
      Rng rng(seed, {0x636f6e64ULL, i, attempt});
      Condition c;
      c.id = static_cast<int>(i);
      c.start_pos = {rng.uniform(spec.start_x_min, spec.start_x_max), rng.uniform(r, spec.height - r)};
      c.start_angle = rng.uniform(-spec.max_start_angle, spec.max_start_angle);
      auto traj = simulate_trajectory(spec, c);
      if (traj.position.back().x() < spec.occluder.x0) continue;
      c.n_frames = traj.size();
      c.visible_end = visible_end_of(spec, traj);
      if (c.occluded_count() == 0) continue;
      set.conditions.push_back(c);
      done = true;
    }
    if (!done) throw GenerationError("no valid trajectory found for condition " + std::to_string(i));
  }
  return set;
}

// ---------------------------------------------------------------------------

/// Grayscale frames [frames x height_px x width_px], values in [0, 1].
inline Array3 render_frames(const BoardSpec& spec, const BallTrajectory& traj, std::size_t width_px,
                            std::size_t height_px) {
  if (width_px < 32 || height_px < 32) throw ConfigError("render resolution must be at least 32x32");
  constexpr double kBall = 1.0, kOccluder = 0.5;
  Array3 frames(traj.size(), height_px, width_px, 0.0);
  const double sx = spec.width / static_cast<double>(width_px);
  const double sy = spec.height / static_cast<double>(height_px);
  const double r2 = spec.ball_radius * spec.ball_radius;
  for (std::size_t f = 0; f < traj.size(); ++f) {
    const auto& p = traj.position[f];
    const bool occluded = p.x() >= spec.occluder.x0;
    const bool draw_occluder = occluded || spec.occluder_always_visible;
    for (std::size_t row = 0; row < height_px; ++row) {
      const double y = spec.height - (static_cast<double>(row) + 0.5) * sy;
      for (std::size_t col = 0; col < width_px; ++col) {
        const double x = (static_cast<double>(col) + 0.5) * sx;
        double value = 0.0;
        const double dx = x - p.x(), dy = y - p.y();
        if (dx * dx + dy * dy <= r2) value = kBall;
        if (draw_occluder && spec.occluder.contains(x, y)) value = kOccluder;
        frames(f, row, col) = value;
      }
    }
  }
  return frames;
}

/// T frame indices spread uniformly over a visible epoch of V frames:
/// i_k = round(k (V-1) / (T-1)), halves rounding up.
inline std::vector<std::size_t> context_indices(std::size_t visible_count, std::size_t T) {
  if (T < 2) throw ConfigError("context length T must be >= 2");
  if (visible_count < T)
    throw InsufficientContext("visible epoch has " + std::to_string(visible_count) + " frames, need T=" +
                              std::to_string(T));
  std::vector<std::size_t> idx(T);
  const std::size_t span = visible_count - 1, den = T - 1;
  for (std::size_t k = 0; k < T; ++k) idx[k] = (2 * k * span + den) / (2 * den);
  return idx;
}

inline std::vector<std::size_t> context_indices(const Condition& c, std::size_t T) {
  return context_indices(c.visible_count(), T);
}

/// Roll-out timing implied by the context spacing: step j (1-based) lands on
/// frame time (V-1) + j * spacing; enough steps are taken to reach the last frame.
struct RolloutSchedule {
  std::vector<std::size_t> context;
  double spacing = 1.0;
  std::size_t n_steps = 0;
  double step_time(std::size_t j) const { return static_cast<double>(context.back()) + static_cast<double>(j) * spacing; }
};

inline RolloutSchedule rollout_schedule(const Condition& c, std::size_t T) {
  RolloutSchedule s;
  s.context = context_indices(c, T);
  s.spacing = static_cast<double>(c.visible_count() - 1) / static_cast<double>(T - 1);
  const double remaining = static_cast<double>(c.n_frames - 1) - static_cast<double>(s.context.back());
  s.n_steps = std::max<std::size_t>(1, static_cast<std::size_t>(std::ceil(remaining / s.spacing - 1e-9)));
  return s;
}

enum class OracleKind { position, velocity, position_velocity };

inline OracleKind parse_oracle_kind(const std::string& s) {
  if (s == "pos" || s == "position") return OracleKind::position;
  if (s == "vel" || s == "velocity") return OracleKind::velocity;
  if (s == "pos+vel" || s == "position+velocity") return OracleKind::position_velocity;
  throw ConfigError("unknown oracle kind '" + s + "' (expected pos, vel or pos+vel)");
}

inline const char* oracle_name(OracleKind k) {
  switch (k) {
    case OracleKind::position: return "pos";
    case OracleKind::velocity: return "vel";
    case OracleKind::position_velocity: return "pos+vel";
  }
  return "?";
}

/// Ground-truth ball state per frame: (x, y), (vx, vy) or (x, y, vx, vy).
inline Eigen::MatrixXd oracle_latents(const BallTrajectory& traj, OracleKind kind) {
  const Eigen::Index n = static_cast<Eigen::Index>(traj.size());
  const Eigen::Index d = kind == OracleKind::position_velocity ? 4 : 2;
  Eigen::MatrixXd out(n, d);
  for (Eigen::Index f = 0; f < n; ++f) {
    const auto& p = traj.position[static_cast<std::size_t>(f)];
    const auto& v = traj.velocity[static_cast<std::size_t>(f)];
    switch (kind) {
      case OracleKind::position: out.row(f) << p.x(), p.y(); break;
      case OracleKind::velocity: out.row(f) << v.x(), v.y(); break;
      case OracleKind::position_velocity: out.row(f) << p.x(), p.y(), v.x(), v.y(); break;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline void to_json(nlohmann::json& j, const BoardSpec& s) {
  j = {{"width", s.width},
       {"height", s.height},
       {"occluder", {s.occluder.x0, s.occluder.y0, s.occluder.x1, s.occluder.y1}},
       {"paddle_x", s.paddle_x},
       {"ball_radius", s.ball_radius},
       {"ball_speed", s.ball_speed},
       {"frame_rate", s.frame_rate},
       {"start_x_min", s.start_x_min},
       {"start_x_max", s.start_x_max},
       {"max_start_angle", s.max_start_angle},
       {"frame_cap", s.frame_cap},
       {"occluder_always_visible", s.occluder_always_visible}};
}

/// Missing keys keep their defaults, so partial spec files are accepted.
inline void from_json(const nlohmann::json& j, BoardSpec& s) {
  s.width = j.value("width", s.width);
  s.height = j.value("height", s.height);
  if (j.contains("occluder")) {
    auto o = j["occluder"].get<std::vector<double>>();
    if (o.size() != 4) throw ConfigError("BoardSpec.occluder must be [x0, y0, x1, y1]");
    s.occluder = {o[0], o[1], o[2], o[3]};
  }
  s.paddle_x = j.value("paddle_x", s.paddle_x);
  s.ball_radius = j.value("ball_radius", s.ball_radius);
  s.ball_speed = j.value("ball_speed", s.ball_speed);
  s.frame_rate = j.value("frame_rate", s.frame_rate);
  s.start_x_min = j.value("start_x_min", s.start_x_min);
  s.start_x_max = j.value("start_x_max", s.start_x_max);
  s.max_start_angle = j.value("max_start_angle", s.max_start_angle);
  s.frame_cap = j.value("frame_cap", s.frame_cap);
  s.occluder_always_visible = j.value("occluder_always_visible", s.occluder_always_visible);
}

inline void to_json(nlohmann::json& j, const Condition& c) {
  j = {{"id", c.id},
       {"start_pos", {c.start_pos.x(), c.start_pos.y()}},
       {"start_angle", c.start_angle},
       {"n_frames", c.n_frames},
       {"visible_end", c.visible_end},
       {"occluded_begin", c.occluded_begin()}};
}

inline void from_json(const nlohmann::json& j, Condition& c) {
  c.id = j.at("id").get<int>();
  auto p = j.at("start_pos").get<std::vector<double>>();
  if (p.size() != 2) throw FormatError("condition start_pos must have two entries");
  c.start_pos = {p[0], p[1]};
  c.start_angle = j.at("start_angle").get<double>();
  c.n_frames = j.at("n_frames").get<std::size_t>();
  c.visible_end = j.at("visible_end").get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const ConditionSet& s) {
  j = {{"spec", s.spec}, {"seed", s.seed}, {"conditions", s.conditions}};
}

inline void from_json(const nlohmann::json& j, ConditionSet& s) {
  s.spec = j.at("spec").get<BoardSpec>();
  s.seed = j.value("seed", std::uint64_t{0});
  s.conditions = j.at("conditions").get<std::vector<Condition>>();
}

}  // namespace msim::mpong
