#pragma once

// Latent future-prediction dynamics: given T context latents h_1..h_T from a
// frozen encoder, predict h_{T+1}. Three kinds:
//
//   ctrnn  s' = s + (dt/tau) (-s + tanh(W s + U x + b)),   y = R s' + c
//   lstm   standard i/f/g/o cell,                          y = R h' + c
//   none   y = h_T for every future step
//
// Gradients are derived by hand (backpropagation through the T context steps)
// for both trainable kinds and checked against central finite differences.

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "msim/error.hpp"
#include "msim/rng.hpp"
#include "msim/tensorio.hpp"

namespace msim::dynamics {

enum class Kind { ctrnn, lstm, none };

inline const char* kind_name(Kind k) {
  switch (k) {
    case Kind::ctrnn: return "ctrnn";
    case Kind::lstm: return "lstm";
    case Kind::none: return "none";
  }
  return "?";
}

inline Kind parse_kind(const std::string& s) {
  if (s == "ctrnn") return Kind::ctrnn;
  if (s == "lstm") return Kind::lstm;
  if (s == "none") return Kind::none;
  throw ConfigError("unknown dynamics kind '" + s + "' (expected ctrnn, lstm or none)");
}

// Parameter slots. Biases are stored as single-column matrices.
namespace ctrnn_slot {
enum : std::size_t { recurrent, input, bias, readout, readout_bias, count };
}
namespace lstm_slot {
enum : std::size_t { input, recurrent, bias, readout, readout_bias, count };  // gate rows ordered i, f, g, o
}

inline std::vector<std::string> param_names(Kind k) {
  switch (k) {
    case Kind::ctrnn: return {"W", "U", "b", "R", "c"};
    case Kind::lstm: return {"Wx", "Wh", "b", "R", "c"};
    case Kind::none: return {};
  }
  return {};
}

using Params = std::vector<Eigen::MatrixXd>;

struct DynamicsModel {
  Kind kind = Kind::none;
  std::size_t d = 0;
  std::size_t hidden = 0;
  double tau = 1.0;
  double dt = 0.1;
  Params params;

  double alpha() const { return dt / tau; }
  std::size_t n_params() const {
    std::size_t n = 0;
    for (const auto& p : params) n += static_cast<std::size_t>(p.size());
    return n;
  }
};

struct ModelOptions {
  std::size_t hidden = 512;
  double tau = 1.0;
  double dt = 0.1;
  double recurrent_radius = 0.9;
};

namespace detail {

inline Eigen::MatrixXd uniform_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols, double bound) {
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index j = 0; j < cols; ++j)
    for (Eigen::Index i = 0; i < rows; ++i) m(i, j) = rng.uniform(-bound, bound);
  return m;
}

inline double spectral_radius(const Eigen::MatrixXd& m) {
  if (m.size() == 0) return 0.0;
  Eigen::EigenSolver<Eigen::MatrixXd> es(m, false);
  return es.eigenvalues().cwiseAbs().maxCoeff();
}

}  // namespace detail

/// Fresh model with uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; the
/// CTRNN recurrent matrix is rescaled to the requested spectral radius.
inline DynamicsModel make_model(Kind kind, std::size_t d, const ModelOptions& opt, std::uint64_t seed) {
  if (d == 0) throw ConfigError("latent dimension d must be >= 1");
  DynamicsModel m;
  m.kind = kind;
  m.d = d;
  if (kind == Kind::none) return m;
  if (opt.hidden == 0) throw ConfigError("hidden size must be >= 1");
  if (!(opt.dt > 0 && opt.tau >= opt.dt)) throw ConfigError("CTRNN requires tau >= dt > 0");
  m.hidden = opt.hidden;
  m.tau = opt.tau;
  m.dt = opt.dt;
  const auto H = static_cast<Eigen::Index>(opt.hidden), D = static_cast<Eigen::Index>(d);
  const double bh = 1.0 / std::sqrt(static_cast<double>(H)), bd = 1.0 / std::sqrt(static_cast<double>(D));
  auto stream = [&](std::uint64_t slot) { return Rng(seed, {0x696e6974ULL, slot}); };
  if (kind == Kind::ctrnn) {
    m.params.resize(ctrnn_slot::count);
    auto r0 = stream(0), r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4);
    Eigen::MatrixXd W = detail::uniform_matrix(r0, H, H, bh);
    double rho = detail::spectral_radius(W);
    if (rho > 0) W *= opt.recurrent_radius / rho;
    m.params[ctrnn_slot::recurrent] = std::move(W);
    m.params[ctrnn_slot::input] = detail::uniform_matrix(r1, H, D, bd);
    m.params[ctrnn_slot::bias] = detail::uniform_matrix(r2, H, 1, bh);
    m.params[ctrnn_slot::readout] = detail::uniform_matrix(r3, D, H, bh);
    m.params[ctrnn_slot::readout_bias] = detail::uniform_matrix(r4, D, 1, bh);
  } else {
    m.params.resize(lstm_slot::count);
    auto r0 = stream(0), r1 = stream(1), r2 = stream(2), r3 = stream(3), r4 = stream(4);
    m.params[lstm_slot::input] = detail::uniform_matrix(r0, 4 * H, D, bh);
    m.params[lstm_slot::recurrent] = detail::uniform_matrix(r1, 4 * H, H, bh);
    m.params[lstm_slot::bias] = detail::uniform_matrix(r2, 4 * H, 1, bh);
    m.params[lstm_slot::readout] = detail::uniform_matrix(r3, D, H, bh);
    m.params[lstm_slot::readout_bias] = detail::uniform_matrix(r4, D, 1, bh);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Single steps

struct CtrnnStep {
  Eigen::VectorXd state;
  Eigen::VectorXd prediction;
};

inline void check_dims(const DynamicsModel& m, Eigen::Index state, Eigen::Index x) {
  if (static_cast<std::size_t>(x) != m.d)
    throw DimensionMismatch("input has dimension " + std::to_string(x) + ", model expects d=" + std::to_string(m.d));
  if (static_cast<std::size_t>(state) != m.hidden)
    throw DimensionMismatch("state has dimension " + std::to_string(state) + ", model hidden=" + std::to_string(m.hidden));
}

inline CtrnnStep ctrnn_step(const DynamicsModel& m, const Eigen::VectorXd& state, const Eigen::VectorXd& x) {
  if (m.kind != Kind::ctrnn) throw ConfigError("ctrnn_step on a non-CTRNN model");
  check_dims(m, state.size(), x.size());
  const auto& p = m.params;
  Eigen::VectorXd z = (p[ctrnn_slot::recurrent] * state + p[ctrnn_slot::input] * x + p[ctrnn_slot::bias].col(0)).array().tanh().matrix();
  Eigen::VectorXd next = state + m.alpha() * (z - state);
  Eigen::VectorXd y = p[ctrnn_slot::readout] * next + p[ctrnn_slot::readout_bias].col(0);
  return {std::move(next), std::move(y)};
}

struct LstmState {
  Eigen::VectorXd h, c;
};

struct LstmStep {
  LstmState state;
  Eigen::VectorXd prediction;
};

inline Eigen::ArrayXXd sigmoid(const Eigen::ArrayXXd& z) { return 1.0 / (1.0 + (-z).exp()); }

inline LstmStep lstm_step(const DynamicsModel& m, const LstmState& s, const Eigen::VectorXd& x) {
  if (m.kind != Kind::lstm) throw ConfigError("lstm_step on a non-LSTM model");
  check_dims(m, s.h.size(), x.size());
  if (s.c.size() != s.h.size()) throw DimensionMismatch("LSTM cell and hidden state differ in size");
  const auto& p = m.params;
  const auto H = static_cast<Eigen::Index>(m.hidden);
  Eigen::VectorXd z = p[lstm_slot::input] * x + p[lstm_slot::recurrent] * s.h + p[lstm_slot::bias].col(0);
  Eigen::ArrayXd i = sigmoid(z.segment(0, H).array());
  Eigen::ArrayXd f = sigmoid(z.segment(H, H).array());
  Eigen::ArrayXd g = z.segment(2 * H, H).array().tanh();
  Eigen::ArrayXd o = sigmoid(z.segment(3 * H, H).array());
  Eigen::VectorXd c_next = (f * s.c.array() + i * g).matrix();
  Eigen::VectorXd h_next = (o * c_next.array().tanh()).matrix();
  Eigen::VectorXd y = p[lstm_slot::readout] * h_next + p[lstm_slot::readout_bias].col(0);
  return {{std::move(h_next), std::move(c_next)}, std::move(y)};
}

/// No-Dynamics prediction: the last context latent, unchanged.
inline const Eigen::VectorXd& none_step(std::span<const Eigen::VectorXd> context) {
  if (context.empty()) throw ConfigError("No-Dynamics needs at least one context latent");
  return context.back();
}

// ---------------------------------------------------------------------------
// Batched loss and gradient
//
// A batch holds T context matrices [d x B] (column j = sample j) and the
// targets [d x B]. Loss = mean over all d*B entries of squared error.

struct Batch {
  std::vector<Eigen::MatrixXd> context;
  Eigen::MatrixXd target;
  std::size_t size() const { return static_cast<std::size_t>(target.cols()); }
};

namespace detail {

inline Eigen::MatrixXd ctrnn_forward(const DynamicsModel& m, const std::vector<Eigen::MatrixXd>& xs,
                                     std::vector<Eigen::MatrixXd>* states, std::vector<Eigen::MatrixXd>* zs) {
  const auto& p = m.params;
  const double a = m.alpha();
  const Eigen::Index B = xs.front().cols();
  Eigen::MatrixXd s = Eigen::MatrixXd::Zero(static_cast<Eigen::Index>(m.hidden), B);
  if (states) states->assign(1, s);
  for (const auto& x : xs) {
    Eigen::MatrixXd pre = p[ctrnn_slot::recurrent] * s + p[ctrnn_slot::input] * x;
    pre.colwise() += p[ctrnn_slot::bias].col(0);
    Eigen::MatrixXd z = pre.array().tanh().matrix();
    s = (1.0 - a) * s + a * z;
    if (states) states->push_back(s);
    if (zs) zs->push_back(std::move(z));
  }
  Eigen::MatrixXd y = p[ctrnn_slot::readout] * s;
  y.colwise() += p[ctrnn_slot::readout_bias].col(0);
  return y;
}

struct LstmTape {
  std::vector<Eigen::MatrixXd> h, c;         // h[0], c[0] are the initial zeros
  std::vector<Eigen::ArrayXXd> i, f, g, o;   // gate activations per step
};

inline Eigen::MatrixXd lstm_forward(const DynamicsModel& m, const std::vector<Eigen::MatrixXd>& xs, LstmTape* tape) {
  const auto& p = m.params;
  const auto H = static_cast<Eigen::Index>(m.hidden);
  const Eigen::Index B = xs.front().cols();
  Eigen::MatrixXd h = Eigen::MatrixXd::Zero(H, B), c = Eigen::MatrixXd::Zero(H, B);
  if (tape) tape->h.assign(1, h), tape->c.assign(1, c);
  for (const auto& x : xs) {
    Eigen::MatrixXd z = p[lstm_slot::input] * x + p[lstm_slot::recurrent] * h;
    z.colwise() += p[lstm_slot::bias].col(0);
    Eigen::ArrayXXd i = sigmoid(z.middleRows(0, H).array());
    Eigen::ArrayXXd f = sigmoid(z.middleRows(H, H).array());
    Eigen::ArrayXXd g = z.middleRows(2 * H, H).array().tanh();
    Eigen::ArrayXXd o = sigmoid(z.middleRows(3 * H, H).array());
    c = (f * c.array() + i * g).matrix();
    h = (o * c.array().tanh()).matrix();
    if (tape) {
      tape->h.push_back(h);
      tape->c.push_back(c);
      tape->i.push_back(std::move(i));
      tape->f.push_back(std::move(f));
      tape->g.push_back(std::move(g));
      tape->o.push_back(std::move(o));
    }
  }
  Eigen::MatrixXd y = p[lstm_slot::readout] * h;
  y.colwise() += p[lstm_slot::readout_bias].col(0);
  return y;
}

inline void check_batch(const DynamicsModel& m, const Batch& batch) {
  if (batch.context.empty()) throw ConfigError("batch has no context steps");
  for (const auto& x : batch.context)
    if (static_cast<std::size_t>(x.rows()) != m.d || x.cols() != batch.target.cols())
      throw DimensionMismatch("context matrix is " + std::to_string(x.rows()) + "x" + std::to_string(x.cols()) +
                              ", expected " + std::to_string(m.d) + "x" + std::to_string(batch.target.cols()));
  if (static_cast<std::size_t>(batch.target.rows()) != m.d) throw DimensionMismatch("target rows differ from model d");
}

}  // namespace detail

/// One-step predictions [d x B] for every sample in the batch.
inline Eigen::MatrixXd predict(const DynamicsModel& m, const std::vector<Eigen::MatrixXd>& context) {
  switch (m.kind) {
    case Kind::ctrnn: return detail::ctrnn_forward(m, context, nullptr, nullptr);
    case Kind::lstm: return detail::lstm_forward(m, context, nullptr);
    case Kind::none: return context.back();
  }
  return {};
}

inline double batch_loss(const DynamicsModel& m, const Batch& batch) {
  detail::check_batch(m, batch);
  return (predict(m, batch.context) - batch.target).squaredNorm() / static_cast<double>(batch.target.size());
}

/// Loss and its exact gradient with respect to every parameter slot.
inline double loss_and_grad(const DynamicsModel& m, const Batch& batch, Params& grads) {
  detail::check_batch(m, batch);
  const double n = static_cast<double>(batch.target.size());
  grads.resize(m.params.size());
  for (std::size_t k = 0; k < m.params.size(); ++k) grads[k].setZero(m.params[k].rows(), m.params[k].cols());
  const auto& xs = batch.context;
  const std::size_t T = xs.size();

  if (m.kind == Kind::none) return (xs.back() - batch.target).squaredNorm() / n;

  if (m.kind == Kind::ctrnn) {
    std::vector<Eigen::MatrixXd> s, z;
    Eigen::MatrixXd y = detail::ctrnn_forward(m, xs, &s, &z);
    Eigen::MatrixXd dy = (2.0 / n) * (y - batch.target);
    const double loss = (y - batch.target).squaredNorm() / n;
    const auto& p = m.params;
    const double a = m.alpha();
    grads[ctrnn_slot::readout].noalias() = dy * s[T].transpose();
    grads[ctrnn_slot::readout_bias] = dy.rowwise().sum();
    Eigen::MatrixXd ds = p[ctrnn_slot::readout].transpose() * dy;
    for (std::size_t t = T; t-- > 0;) {
      // s[t+1] = (1-a) s[t] + a tanh(W s[t] + U x[t] + b)
      Eigen::MatrixXd da = (a * ds.array() * (1.0 - z[t].array().square())).matrix();
      grads[ctrnn_slot::recurrent].noalias() += da * s[t].transpose();
      grads[ctrnn_slot::input].noalias() += da * xs[t].transpose();
      grads[ctrnn_slot::bias] += da.rowwise().sum();
      ds = (1.0 - a) * ds + p[ctrnn_slot::recurrent].transpose() * da;
    }
    return loss;
  }

  detail::LstmTape tape;
  Eigen::MatrixXd y = detail::lstm_forward(m, xs, &tape);
  Eigen::MatrixXd dy = (2.0 / n) * (y - batch.target);
  const double loss = (y - batch.target).squaredNorm() / n;
  const auto& p = m.params;
  const auto H = static_cast<Eigen::Index>(m.hidden);
  grads[lstm_slot::readout].noalias() = dy * tape.h[T].transpose();
  grads[lstm_slot::readout_bias] = dy.rowwise().sum();
  Eigen::ArrayXXd dh = (p[lstm_slot::readout].transpose() * dy).array();
  Eigen::ArrayXXd dc = Eigen::ArrayXXd::Zero(H, dy.cols());
  Eigen::MatrixXd dz(4 * H, dy.cols());
  for (std::size_t t = T; t-- > 0;) {
    const auto& i = tape.i[t];
    const auto& f = tape.f[t];
    const auto& g = tape.g[t];
    const auto& o = tape.o[t];
    Eigen::ArrayXXd tc = tape.c[t + 1].array().tanh();
    dc += dh * o * (1.0 - tc.square());
    dz.middleRows(0, H) = (dc * g * i * (1.0 - i)).matrix();
    dz.middleRows(H, H) = (dc * tape.c[t].array() * f * (1.0 - f)).matrix();
    dz.middleRows(2 * H, H) = (dc * i * (1.0 - g.square())).matrix();
    dz.middleRows(3 * H, H) = (dh * tc * o * (1.0 - o)).matrix();
    grads[lstm_slot::input].noalias() += dz * xs[t].transpose();
    grads[lstm_slot::recurrent].noalias() += dz * tape.h[t].transpose();
    grads[lstm_slot::bias] += dz.rowwise().sum();
    dh = (p[lstm_slot::recurrent].transpose() * dz).array();
    dc = dc * f;
  }
  return loss;
}

/// Max relative error between analytic gradients and central differences
/// (f(p + eps) - f(p - eps)) / 2 eps, with denominator max(|a|, |n|, 1e-8).
inline double grad_check(const DynamicsModel& model, const Batch& batch, double eps = 1e-5) {
  Params analytic;
  loss_and_grad(model, batch, analytic);
  DynamicsModel probe = model;
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.params.size(); ++k) {
    auto& P = probe.params[k];
    for (Eigen::Index idx = 0; idx < P.size(); ++idx) {
      const double orig = P.data()[idx];
      P.data()[idx] = orig + eps;
      const double up = batch_loss(probe, batch);
      P.data()[idx] = orig - eps;
      const double down = batch_loss(probe, batch);
      P.data()[idx] = orig;
      const double numeric = (up - down) / (2 * eps);
      const double a = analytic[k].data()[idx];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamState {
  Params m, v;
  std::uint64_t t = 0;  // completed updates
};

/// One bias-corrected Adam step (Kingma & Ba) at step t = state.t + 1.
inline void adam_update(Params& params, const Params& grads, AdamState& st, const AdamConfig& cfg) {
  if (st.m.size() != params.size()) {
    st.m.clear();
    st.v.clear();
    for (const auto& p : params) {
      st.m.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
      st.v.push_back(Eigen::MatrixXd::Zero(p.rows(), p.cols()));
    }
  }
  ++st.t;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.t));
  for (std::size_t k = 0; k < params.size(); ++k) {
    st.m[k] = cfg.beta1 * st.m[k] + (1.0 - cfg.beta1) * grads[k];
    st.v[k] = cfg.beta2 * st.v[k] + (1.0 - cfg.beta2) * grads[k].cwiseAbs2();
    params[k].array() -= cfg.lr * (st.m[k].array() / c1) / ((st.v[k].array() / c2).sqrt() + cfg.eps);
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t T = 7;
  std::size_t batch_size = 32;
  double lr = 1e-4;
  std::size_t epochs = 100;
  std::uint64_t seed = 0;

  void validate() const {
    if (T < 2) throw ConfigError("context length T must be >= 2");
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (!(lr >= 0)) throw ConfigError("lr must be >= 0");
  }
};

/// (stimulus, first context frame) of every teacher-forced training window.
struct Window {
  std::size_t stimulus;
  std::size_t start;
};

inline std::vector<Window> make_windows(const LatentDataset& ds, std::size_t T) {
  std::vector<Window> w;
  for (std::size_t s = 0; s < ds.size(); ++s) {
    const auto frames = static_cast<std::size_t>(ds.latents[s].rows());
    if (frames < T + 1)
      throw DataError("stimulus '" + ds.stimuli[s] + "' has " + std::to_string(frames) + " frames, need T+1=" +
                      std::to_string(T + 1));
    for (std::size_t j = 0; j + T < frames; ++j) w.push_back({s, j});
  }
  return w;
}

inline Batch gather_batch(const LatentDataset& ds, std::span<const Window> windows, std::size_t T) {
  const auto B = static_cast<Eigen::Index>(windows.size()), D = static_cast<Eigen::Index>(ds.d);
  Batch batch;
  batch.context.assign(T, Eigen::MatrixXd(D, B));
  batch.target.resize(D, B);
  for (Eigen::Index j = 0; j < B; ++j) {
    const auto& w = windows[static_cast<std::size_t>(j)];
    const auto& L = ds.latents[w.stimulus];
    for (std::size_t t = 0; t < T; ++t) batch.context[t].col(j) = L.row(static_cast<Eigen::Index>(w.start + t)).transpose();
    batch.target.col(j) = L.row(static_cast<Eigen::Index>(w.start + T)).transpose();
  }
  return batch;
}

/// Everything needed to continue a run bit-exactly.
struct TrainState {
  DynamicsModel model;
  AdamState adam;
  std::size_t epochs_done = 0;
  std::vector<double> loss_curve;  // per-epoch mean MSE
};

/// Runs epochs [state.epochs_done, cfg.epochs). Window order in epoch e is a
/// shuffle drawn from Rng(seed, {e}), so a resumed run matches an uninterrupted one.
inline void train_epochs(TrainState& st, const LatentDataset& ds, const TrainConfig& cfg) {
  cfg.validate();
  if (st.model.kind == Kind::none) throw ConfigError("No-Dynamics has no parameters to train");
  if (ds.d != st.model.d)
    throw DimensionMismatch("dataset d=" + std::to_string(ds.d) + " but model d=" + std::to_string(st.model.d));
  const auto windows = make_windows(ds, cfg.T);
  if (windows.empty()) throw EmptyDataset("no training windows");
  std::vector<Window> order(windows);
  AdamConfig adam{cfg.lr};
  Params grads;
  for (std::size_t e = st.epochs_done; e < cfg.epochs; ++e) {
    order = windows;
    Rng rng(cfg.seed, {0x65706f6368ULL, e});
    rng.shuffle(std::span<Window>(order));
    double total = 0.0;
    for (std::size_t start = 0, bi = 0; start < order.size(); start += cfg.batch_size, ++bi) {
      const std::size_t len = std::min(cfg.batch_size, order.size() - start);
      Batch batch = gather_batch(ds, std::span<const Window>(order).subspan(start, len), cfg.T);
      const double loss = loss_and_grad(st.model, batch, grads);
      if (!std::isfinite(loss))
        throw NumericalError("non-finite training loss at epoch " + std::to_string(e) + ", batch " + std::to_string(bi));
      total += loss * static_cast<double>(len);
      adam_update(st.model.params, grads, st.adam, adam);
    }
    st.loss_curve.push_back(total / static_cast<double>(order.size()));
    st.epochs_done = e + 1;
  }
}

struct TrainResult {
  DynamicsModel model;
  std::vector<double> loss_curve;
};

inline TrainResult train(DynamicsModel model, const LatentDataset& ds, const TrainConfig& cfg) {
  TrainState st{std::move(model), {}, 0, {}};
  train_epochs(st, ds, cfg);
  return {std::move(st.model), std::move(st.loss_curve)};
}

/// Mean one-step MSE over every window of the dataset.
inline double one_step_mse(const DynamicsModel& m, const LatentDataset& ds, std::size_t T) {
  const auto windows = make_windows(ds, T);
  double total = 0.0;
  constexpr std::size_t chunk = 256;
  for (std::size_t s = 0; s < windows.size(); s += chunk) {
    const std::size_t len = std::min(chunk, windows.size() - s);
    Batch b = gather_batch(ds, std::span<const Window>(windows).subspan(s, len), T);
    total += (predict(m, b.context) - b.target).squaredNorm();
  }
  return total / (static_cast<double>(windows.size()) * static_cast<double>(ds.d));
}

// ---------------------------------------------------------------------------
// Closed-loop rollout

enum class RolloutMode {
  sliding,   // each step re-warms a fresh state on the latest context.rows() latents
  stateful,  // warm up once, then keep stepping the same state
};

/// Warms up on the context rows [T x d] and feeds each prediction back as the
/// next input. Returns [n_steps x d]; row 0 is the one-step prediction.
/// Sliding mode keeps every step inside the T-step horizon used in training.
inline Eigen::MatrixXd rollout(const DynamicsModel& m, const Eigen::MatrixXd& context, std::size_t n_steps,
                               RolloutMode mode = RolloutMode::sliding) {
  if (n_steps < 1) throw ConfigError("rollout needs n_steps >= 1");
  if (context.rows() < 1) throw ConfigError("rollout needs at least one context latent");
  if (static_cast<std::size_t>(context.cols()) != m.d)
    throw DimensionMismatch("context has d=" + std::to_string(context.cols()) + ", model d=" + std::to_string(m.d));
  const auto N = static_cast<Eigen::Index>(n_steps);
  const Eigen::Index T = context.rows();
  Eigen::MatrixXd out(N, context.cols());
  if (m.kind == Kind::none) {
    out.rowwise() = context.row(T - 1);
    return out;
  }
  const auto H = static_cast<Eigen::Index>(m.hidden);
  if (mode == RolloutMode::sliding) {
    // Row t of the running sequence: context for t < T, predictions after.
    Eigen::MatrixXd seq(T + N, context.cols());
    seq.topRows(T) = context;
    std::vector<Eigen::MatrixXd> xs(static_cast<std::size_t>(T));
    for (Eigen::Index k = 0; k < N; ++k) {
      for (Eigen::Index t = 0; t < T; ++t) xs[static_cast<std::size_t>(t)] = seq.row(k + t).transpose();
      seq.row(T + k) = predict(m, xs).transpose();
    }
    out = seq.bottomRows(N);
    return out;
  }
  Eigen::VectorXd y;
  if (m.kind == Kind::ctrnn) {
    Eigen::VectorXd s = Eigen::VectorXd::Zero(H);
    for (Eigen::Index k = 0; k < T + N - 1; ++k) {
      const Eigen::VectorXd x = k < T ? Eigen::VectorXd(context.row(k).transpose()) : y;
      auto r = ctrnn_step(m, s, x);
      s = std::move(r.state);
      y = std::move(r.prediction);
      if (k >= T - 1) out.row(k - T + 1) = y.transpose();
    }
    return out;
  }
  LstmState s{Eigen::VectorXd::Zero(H), Eigen::VectorXd::Zero(H)};
  for (Eigen::Index k = 0; k < T + N - 1; ++k) {
    const Eigen::VectorXd x = k < T ? Eigen::VectorXd(context.row(k).transpose()) : y;
    auto r = lstm_step(m, s, x);
    s = std::move(r.state);
    y = std::move(r.prediction);
    if (k >= T - 1) out.row(k - T + 1) = y.transpose();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Checkpoints: checkpoint.json plus one TensorFile per parameter (and Adam moment).

inline fs::path save_checkpoint(const TrainState& st, const TrainConfig& cfg, const fs::path& dir) {
  fs::create_directories(dir / "params");
  const auto names = param_names(st.model.kind);
  nlohmann::json params = nlohmann::json::array(), m1 = nlohmann::json::array(), m2 = nlohmann::json::array();
  for (std::size_t k = 0; k < st.model.params.size(); ++k) {
    auto rel = "params/" + names[k] + ".msb";
    write_tensor(matrix_tensor(st.model.params[k]), dir / rel);
    params.push_back({{"name", names[k]}, {"path", rel}});
    if (st.adam.m.size() == st.model.params.size()) {
      auto r1 = "params/adam_m_" + names[k] + ".msb", r2 = "params/adam_v_" + names[k] + ".msb";
      write_tensor(matrix_tensor(st.adam.m[k]), dir / r1);
      write_tensor(matrix_tensor(st.adam.v[k]), dir / r2);
      m1.push_back(r1);
      m2.push_back(r2);
    }
  }
  nlohmann::json j{{"kind", kind_name(st.model.kind)},
                   {"d", st.model.d},
                   {"hidden", st.model.hidden},
                   {"tau", st.model.tau},
                   {"dt", st.model.dt},
                   {"T", cfg.T},
                   {"batch_size", cfg.batch_size},
                   {"lr", cfg.lr},
                   {"epochs", cfg.epochs},
                   {"seed", cfg.seed},
                   {"epochs_done", st.epochs_done},
                   {"loss_curve", st.loss_curve},
                   {"params", params},
                   {"adam", {{"t", st.adam.t}, {"m", m1}, {"v", m2}}}};
  auto path = dir / "checkpoint.json";
  msim::detail::write_json(j, path);
  return path;
}

struct Checkpoint {
  TrainState state;
  TrainConfig config;
};

inline Checkpoint load_checkpoint(const fs::path& path_or_dir) {
  auto path = fs::is_directory(path_or_dir) ? path_or_dir / "checkpoint.json" : path_or_dir;
  auto j = msim::detail::read_json(path);
  auto base = path.parent_path();
  Checkpoint ck;
  try {
    auto& m = ck.state.model;
    m.kind = parse_kind(j.at("kind").get<std::string>());
    m.d = j.at("d").get<std::size_t>();
    m.hidden = j.value("hidden", std::size_t{0});
    m.tau = j.value("tau", 1.0);
    m.dt = j.value("dt", 0.1);
    ck.config.T = j.value("T", std::size_t{7});
    ck.config.batch_size = j.value("batch_size", std::size_t{32});
    ck.config.lr = j.value("lr", 1e-4);
    ck.config.epochs = j.value("epochs", std::size_t{100});
    ck.config.seed = j.value("seed", std::uint64_t{0});
    ck.state.epochs_done = j.value("epochs_done", std::size_t{0});
    ck.state.loss_curve = j.value("loss_curve", std::vector<double>{});
    for (const auto& p : j.at("params")) m.params.push_back(tensor_matrix(read_tensor(base / p.at("path").get<std::string>())));
    if (m.params.size() != param_names(m.kind).size())
      throw FormatError(path.string() + ": expected " + std::to_string(param_names(m.kind).size()) + " parameters");
    if (j.contains("adam")) {
      ck.state.adam.t = j["adam"].value("t", std::uint64_t{0});
      for (const auto& r : j["adam"].value("m", nlohmann::json::array()))
        ck.state.adam.m.push_back(tensor_matrix(read_tensor(base / r.get<std::string>())));
      for (const auto& r : j["adam"].value("v", nlohmann::json::array()))
        ck.state.adam.v.push_back(tensor_matrix(read_tensor(base / r.get<std::string>())));
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
  return ck;
}

inline void write_loss_csv(const std::vector<double>& curve, const fs::path& path) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "epoch,mean_mse\n" << std::setprecision(17);
  for (std::size_t e = 0; e < curve.size(); ++e) os << e + 1 << ',' << curve[e] << '\n';
}

}  // namespace msim::dynamics
