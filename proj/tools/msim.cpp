// msim: command-line front end for stimulus generation, dynamics training and
// the neural / behavioral benchmarks.

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include "msim/behavior.hpp"
#include "msim/dynamics.hpp"
#include "msim/error.hpp"
#include "msim/metrics.hpp"
#include "msim/mpong.hpp"
#include "msim/neuralbench.hpp"
#include "msim/synth.hpp"
#include "msim/tensorio.hpp"

namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace msim;

int g_verbosity = 1;

void info(const std::string& msg) {
  if (g_verbosity > 0) std::cerr << msg << '\n';
}

/// Config files are JSON objects keyed by the long option names of the
/// subcommand being run.
class JsonConfig : public CLI::Config {
 public:
  explicit JsonConfig(std::string section) : section_(std::move(section)) {}

  std::string to_config(const CLI::App*, bool, bool, std::string) const override { return "{}"; }

  std::vector<CLI::ConfigItem> from_config(std::istream& is) const override {
    json j;
    try {
      is >> j;
    } catch (const json::exception& e) {
      throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!j.is_object()) throw ConfigError("config must be a JSON object");
    std::vector<CLI::ConfigItem> items;
    flatten(j, section_.empty() ? std::vector<std::string>{} : std::vector<std::string>{section_}, items);
    return items;
  }

 private:
  std::string section_;

  static std::string scalar(const json& v) {
    if (v.is_string()) return v.get<std::string>();
    if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
    return v.dump();
  }

  static void flatten(const json& j, const std::vector<std::string>& parents, std::vector<CLI::ConfigItem>& out) {
    for (const auto& [k, v] : j.items()) {
      if (v.is_null()) continue;
      if (v.is_object()) {
        auto p = parents;
        p.push_back(k);
        flatten(v, p, out);
        continue;
      }
      CLI::ConfigItem item;
      item.parents = parents;
      item.name = k;
      if (v.is_array())
        for (const auto& e : v) item.inputs.push_back(scalar(e));
      else
        item.inputs.push_back(scalar(v));
      out.push_back(std::move(item));
    }
  }
};

/// Binds options to variables and remembers them, so the fully resolved
/// configuration can be written next to the outputs.
class Command {
 public:
  Command(CLI::App& parent, const std::string& name, const std::string& desc) : app_(parent.add_subcommand(name, desc)) {
    if (const char* env = std::getenv("MSIM_THREADS"); env && *env) {
      char* end = nullptr;
      const long v = std::strtol(env, &end, 10);
      threads_ = *end == '\0' && v > 0 ? static_cast<std::size_t>(v) : 0;
    }
    add("threads", threads_, "thread cap (default from MSIM_THREADS); pipelines here run single-threaded");
  }

  template <class T>
  CLI::Option* add(const std::string& name, T& var, const std::string& desc) {
    fields_.emplace_back(name, [&var] { return json(var); });
    return app_->add_option("--" + name, var, desc)->capture_default_str();
  }

  template <class T>
  CLI::Option* positional(const std::string& name, T& var, const std::string& desc) {
    fields_.emplace_back(name, [&var] { return json(var); });
    return app_->add_option(name, var, desc);
  }

  CLI::Option* flag(const std::string& name, bool& var, const std::string& desc) {
    fields_.emplace_back(name, [&var] { return json(var); });
    return app_->add_flag("--" + name, var, desc);
  }

  json resolved() const {
    json j = json::object();
    for (const auto& [k, f] : fields_) j[k] = f();
    return j;
  }

  /// Creates the output directory and records the resolved configuration.
  void begin(const fs::path& out) const {
    if (threads_ == 0) throw ConfigError("thread cap (--threads or MSIM_THREADS) must be a positive integer");
    fs::create_directories(out);
    msim::detail::write_json(resolved(), out / "resolved-config.json");
  }

  CLI::App* app() const { return app_; }

 private:
  CLI::App* app_;
  std::size_t threads_ = 1;
  std::vector<std::pair<std::string, std::function<json()>>> fields_;
};

json median_sem_json(const metrics::MedianSem& m) {
  return {{"median", m.median}, {"sem", m.sem}, {"n", m.n}, {"n_nan", m.n_nan}};
}

/// unit_id, animal, NP_mean, NP_split_1..K, flagged
void write_units_csv(const metrics::PredictivityResult& r, const fs::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot write " + path.string());
  const std::size_t K = r.per_split.empty() ? 0 : r.per_split.front().size();
  os << "unit_id,animal,NP_mean";
  for (std::size_t s = 0; s < K; ++s) os << ",NP_split_" << s + 1;
  os << ",flagged\n";
  for (std::size_t u = 0; u < r.np.size(); ++u) {
    os << (u < r.unit_id.size() ? r.unit_id[u] : u) << ',' << (u < r.animal.size() ? r.animal[u] : "") << ','
       << format_double(r.np[u]);
    for (std::size_t s = 0; s < K; ++s) os << ',' << format_double(r.per_split[u][s]);
    os << ',' << (r.flagged[u] ? 1 : 0) << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

json predictivity_json(const metrics::PredictivityResult& r, const std::string& csv_name) {
  const auto ms = metrics::median_sem(r.np);
  return {{"median_np", ms.median},  {"sem", ms.sem},           {"n_units", r.np.size()},
          {"n_flagged", r.n_flagged()}, {"n_excluded", r.n_excluded}, {"lambdas", r.lambdas},
          {"per_unit_csv_path", csv_name}};
}

json ball_json(const neuralbench::BallDecode& bd) {
  const auto& np = bd.per_quantity.np;
  return {{"joint", median_sem_json(bd.joint)},
          {"position", median_sem_json(bd.position)},
          {"velocity", median_sem_json(bd.velocity)},
          {"per_quantity", {{"x", np[0]}, {"y", np[1]}, {"vx", np[2]}, {"vy", np[3]}}}};
}

void write_ball_csv(const neuralbench::BallDecode& bd, const fs::path& path) {
  auto r = bd.per_quantity;
  r.unit_id = {0, 1, 2, 3};
  write_units_csv(r, path);
}

mpong::ConditionSet load_conditions(const fs::path& path) {
  try {
    return msim::detail::read_json(path).get<mpong::ConditionSet>();
  } catch (const json::exception& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

dynamics::RolloutMode parse_rollout(const std::string& s) {
  if (s == "sliding") return dynamics::RolloutMode::sliding;
  if (s == "stateful") return dynamics::RolloutMode::stateful;
  throw ConfigError("unknown rollout mode '" + s + "' (expected sliding or stateful)");
}

std::string checkpoint_name(const std::string& path) {
  fs::path p(path);
  if (p.filename() == "checkpoint.json") p = p.parent_path();
  auto name = p.lexically_normal().filename().string();
  if (name.empty()) name = p.lexically_normal().parent_path().filename().string();
  return name.empty() ? "model" : name;
}

/// Feature streams on every frame of each condition, for one named source.
struct Source {
  std::string name;
  std::vector<Eigen::MatrixXd> features;
};

std::vector<Source> model_sources(const mpong::ConditionSet& set, const std::vector<mpong::Condition>& conds,
                                  const std::vector<std::string>& checkpoints, const std::string& latents,
                                  bool encoder, const std::vector<std::string>& oracles, std::size_t T,
                                  dynamics::RolloutMode mode) {
  std::vector<Source> out;
  for (const auto& o : oracles) {
    const auto kind = mpong::parse_oracle_kind(o);
    out.push_back({std::string("oracle_") + mpong::oracle_name(kind), neuralbench::oracle_features(set.spec, conds, kind)});
  }
  if ((!checkpoints.empty() || encoder) && latents.empty())
    throw ConfigError("--latents (encoder latents per condition) is required with --checkpoint or --encoder");
  if (!latents.empty()) {
    const auto enc = load_latent_dataset(latents);
    if (encoder) out.push_back({"encoder", neuralbench::encoder_features(enc, conds)});
    for (const auto& c : checkpoints) {
      const auto ck = dynamics::load_checkpoint(c);
      info("rolling out " + c);
      out.push_back({checkpoint_name(c), neuralbench::model_features(ck.state.model, enc, conds, T, mode)});
    }
  }
  return out;
}

// ---------------------------------------------------------------------------

struct MpongGen {
  std::string out, board;
  std::size_t n = 79, width = 32, height = 32;
  std::uint64_t seed = 0;
  bool no_frames = false;

  explicit MpongGen(Command& c) {
    c.add("out", out, "output directory")->required();
    c.add("n", n, "number of conditions");
    c.add("seed", seed, "random seed");
    c.add("board", board, "BoardSpec JSON (defaults when empty)");
    c.add("width", width, "frame width in pixels");
    c.add("height", height, "frame height in pixels");
    c.flag("no-frames", no_frames, "skip rendering frames");
  }

  int run(const Command& c) const {
    c.begin(out);
    mpong::BoardSpec spec;
    if (!board.empty()) {
      try {
        spec = msim::detail::read_json(board).get<mpong::BoardSpec>();
      } catch (const json::exception& e) {
        throw ConfigError(board + ": " + e.what());
      }
    }
    const auto set = mpong::generate_conditions(spec, n, seed);
    msim::detail::write_json(json(set), fs::path(out) / "conditions.json");
    LatentDataset oracles;
    oracles.d = 4;
    std::size_t lo = SIZE_MAX, hi = 0;
    if (!no_frames) fs::create_directories(fs::path(out) / "frames");
    for (const auto& cond : set.conditions) {
      const auto traj = mpong::simulate_trajectory(set.spec, cond);
      const auto id = std::to_string(cond.id);
      oracles.stimuli.push_back(id);
      oracles.latents.push_back(mpong::oracle_latents(traj, mpong::OracleKind::position_velocity));
      oracles.scenario.emplace_back();
      oracles.label.emplace_back();
      lo = std::min(lo, cond.n_frames);
      hi = std::max(hi, cond.n_frames);
      if (!no_frames) {
        const auto frames = mpong::render_frames(set.spec, traj, width, height);
        std::vector<float> px(frames.data().begin(), frames.data().end());
        write_tensor(Tensor({frames.dim(0), frames.dim(1), frames.dim(2)}, std::move(px)),
                     fs::path(out) / "frames" / ("cond_" + id + ".msb"));
      }
    }
    save_latent_dataset(oracles, out, "oracles");
    msim::detail::write_json({{"n_conditions", set.size()}, {"min_frames", lo}, {"max_frames", hi}},
                             fs::path(out) / "summary.json");
    std::cout << set.size() << " conditions, frames min " << lo << " max " << hi << '\n';
    return 0;
  }
};

struct Synth {
  std::string kind, out, conditions;
  std::uint64_t seed = 0, readout_seed = 0;
  // linear-world
  std::size_t d = 16, stimuli = 256, frames = 25;
  double rho = 0.95, noise = 0.0;
  // dmfc
  std::size_t n = 79, units = 40, trials = 10, animals = 2;
  std::string readout = "pos+vel";
  double sigma = 0.5;
  bool softplus = false, shared_readout = false;
  // ocp
  std::size_t ocp_d = 8, train_per_scenario = 200;
  double margin = 0.5, human_noise = 0.1;
  bool shuffle_labels = false;

  explicit Synth(Command& c) {
    c.add("kind", kind, "linear-world | dmfc | ocp")->required()->check(CLI::IsMember({"linear-world", "dmfc", "ocp"}));
    c.add("out", out, "output directory")->required();
    c.add("seed", seed, "random seed");
    c.add("d", d, "linear-world: latent dimension");
    c.add("rho", rho, "linear-world: spectral radius");
    c.add("stimuli", stimuli, "linear-world: number of sequences");
    c.add("frames", frames, "linear-world / ocp: frames per sequence");
    c.add("noise", noise, "linear-world: process noise sd");
    c.add("conditions", conditions, "dmfc: conditions.json (generated from --n and --seed when empty)");
    c.add("n", n, "dmfc: number of conditions to generate");
    c.add("units", units, "dmfc: units per animal");
    c.add("trials", trials, "dmfc: trials per condition");
    c.add("animals", animals, "dmfc: number of animals");
    c.add("readout", readout, "dmfc: pos | vel | pos+vel | random");
    c.add("readout-seed", readout_seed, "dmfc: readout matrix seed");
    c.add("sigma", sigma, "dmfc: trial noise sd");
    c.flag("softplus", softplus, "dmfc: softplus on rates");
    c.flag("shared-readout", shared_readout, "dmfc: all animals use one readout matrix");
    c.add("ocp-d", ocp_d, "ocp: latent dimension");
    c.add("train-per-scenario", train_per_scenario, "ocp: training stimuli per scenario");
    c.add("margin", margin, "ocp: label margin on the deciding coordinate");
    c.add("human-noise", human_noise, "ocp: noise on human hit proportions");
    c.flag("shuffle-labels", shuffle_labels, "ocp: labels independent of latents");
  }

  int run(const Command& c) const {
    c.begin(out);
    const fs::path dir(out);
    if (kind == "linear-world") {
      const auto w = synth::make_linear_world(d, rho, stimuli, frames, noise, seed);
      save_latent_dataset(w.data, dir, "latents");
      write_tensor(matrix_tensor(w.A), dir / "A.msb");
      std::cout << "linear world: " << stimuli << " sequences of " << frames << " frames, d=" << d << '\n';
    } else if (kind == "dmfc") {
      mpong::ConditionSet set;
      if (conditions.empty()) {
        set = mpong::generate_conditions(mpong::BoardSpec{}, n, seed);
      } else {
        set = load_conditions(conditions);
      }
      msim::detail::write_json(json(set), dir / "conditions.json");
      if (animals == 0) throw ConfigError("dmfc needs at least one animal");
      std::vector<NeuralDataset> parts;
      for (std::size_t a = 0; a < animals; ++a) {
        synth::SynthNeuralSpec sp;
        sp.n_units = units;
        sp.kind = synth::parse_readout_kind(readout);
        sp.readout_seed = shared_readout ? readout_seed : readout_seed + a;
        sp.sigma = sigma;
        sp.n_trials = trials;
        sp.softplus = softplus;
        sp.animal = animals == 2 ? (a == 0 ? "P" : "M") : "A" + std::to_string(a + 1);
        parts.push_back(synth::make_synth_dmfc(set, sp, derive_key({seed, 0x616e696dULL, a})));
      }
      save_neural_dataset(synth::merge_animals(parts), dir, "neural");
      std::cout << "dmfc: " << animals << " animals x " << units << " units, " << set.size() << " conditions\n";
    } else {
      synth::OcpSynthSpec sp;
      sp.d = ocp_d;
      sp.frames = frames;
      sp.train_per_scenario = train_per_scenario;
      sp.margin = margin;
      sp.human_noise = human_noise;
      sp.shuffle_labels = shuffle_labels;
      const auto ocp = synth::make_ocp(sp, seed);
      save_latent_dataset(ocp.train, dir, "train");
      save_latent_dataset(ocp.test, dir, "test");
      save_judgements(ocp.judgements, dir / "judgements.json");
      std::cout << "ocp: " << ocp.train.size() << " training, " << ocp.test.size() << " test stimuli\n";
    }
    return 0;
  }
};

struct TrainDynamics {
  std::string latents, kind = "ctrnn", out, resume;
  dynamics::ModelOptions model;
  dynamics::TrainConfig cfg;

  explicit TrainDynamics(Command& c) {
    c.add("latents", latents, "latent manifest")->required();
    c.add("kind", kind, "ctrnn | lstm | none");
    c.add("out", out, "checkpoint directory")->required();
    c.add("resume", resume, "checkpoint directory to continue from");
    c.add("hidden", model.hidden, "hidden units");
    c.add("tau", model.tau, "CTRNN time constant");
    c.add("dt", model.dt, "CTRNN Euler step");
    c.add("T", cfg.T, "context length");
    c.add("batch-size", cfg.batch_size, "minibatch size");
    c.add("lr", cfg.lr, "Adam learning rate");
    c.add("epochs", cfg.epochs, "total epochs (including resumed ones)");
    c.add("seed", cfg.seed, "random seed (initialization and batch order)");
  }

  int run(const Command& c) const {
    const auto k = dynamics::parse_kind(kind);
    if (k == dynamics::Kind::none) throw ConfigError("the no-dynamics baseline has nothing to train");
    c.begin(out);
    const auto ds = load_latent_dataset(latents);
    dynamics::TrainState st;
    if (!resume.empty()) {
      auto ck = dynamics::load_checkpoint(resume);
      if (ck.state.model.kind != k)
        throw ConfigError("resume checkpoint holds a " + std::string(dynamics::kind_name(ck.state.model.kind)) +
                          " model, --kind is " + kind);
      st = std::move(ck.state);
      info("resuming at epoch " + std::to_string(st.epochs_done));
    } else {
      st.model = dynamics::make_model(k, ds.d, model, cfg.seed);
    }
    dynamics::train_epochs(st, ds, cfg);
    dynamics::save_checkpoint(st, cfg, out);
    dynamics::write_loss_csv(st.loss_curve, fs::path(out) / "loss.csv");
    std::cout << "trained " << kind << " for " << st.epochs_done << " epochs, final loss "
              << (st.loss_curve.empty() ? std::string("n/a") : format_double(st.loss_curve.back())) << '\n';
    return 0;
  }
};

struct NeuralArgs {
  std::string conditions, neural, out, latents, rollout = "sliding";
  std::vector<std::string> checkpoints, oracles;
  bool encoder = false;
  std::size_t T = 7, splits = 5, repeats = 10;
  std::uint64_t seed = 0;

  void add_common(Command& c) {
    c.add("conditions", conditions, "conditions.json")->required();
    c.add("out", out, "output directory")->required();
    c.add("latents", latents, "encoder latents per condition (manifest ids = condition ids)");
    c.add("checkpoint", checkpoints, "dynamics checkpoint (repeatable)");
    c.add("oracle", oracles, "oracle source pos | vel | pos+vel (repeatable)");
    c.flag("encoder", encoder, "score encoder latents on occluded frames directly");
    c.add("T", T, "context frames");
    c.add("rollout", rollout, "sliding | stateful")->check(CLI::IsMember({"sliding", "stateful"}));
    c.add("splits", splits, "train/test splits of conditions");
    c.add("repeats", repeats, "split-half draws per split");
    c.add("seed", seed, "seed for splits, folds and split halves");
  }

  metrics::NpOptions np() const {
    metrics::NpOptions o;
    o.n_repeats = repeats;
    o.seed = seed;
    return o;
  }
};

neuralbench::AlignedResponses load_aligned(const std::string& neural, const std::string& conditions,
                                           const mpong::ConditionSet& set) {
  const auto nd = load_neural_dataset(neural);
  if (nd.responses.size() != set.size())
    throw AlignmentError(conditions + " has " + std::to_string(set.size()) + " conditions but " + neural + " has " +
                         std::to_string(nd.responses.size()));
  auto al = neuralbench::interpolate_bins(nd, set);
  if (al.n_clamped > 0) info(std::to_string(al.n_clamped) + " frames fell outside bin centers and were clamped");
  return al;
}

struct EvalNeural {
  NeuralArgs a;

  explicit EvalNeural(Command& c) {
    a.add_common(c);
    c.add("neural", a.neural, "neural manifest")->required();
  }

  int run(const Command& c) const {
    c.begin(a.out);
    const fs::path dir(a.out);
    const auto set = load_conditions(a.conditions);
    const auto al = load_aligned(a.neural, a.conditions, set);
    const auto plan = metrics::make_split_plan(set.size(), a.splits, a.seed);
    const auto opt = a.np();
    json report;
    report["splits_seed"] = a.seed;
    report["n_splits"] = a.splits;
    report["n_repeats"] = a.repeats;
    report["n_conditions"] = set.size();
    report["n_units"] = al.n_units();
    report["n_clamped_frames"] = al.n_clamped;

    if (al.animals.size() >= 2) {
      info("inter-animal ceiling");
      std::vector<metrics::PredictivityResult> parts;
      for (std::size_t i = 0; i < al.animals.size(); ++i)
        for (std::size_t j = i + 1; j < al.animals.size(); ++j)
          parts.push_back(neuralbench::fit_internal_consistency(al.animal(i), al.animal(j), plan, opt));
      const auto ceiling = metrics::concat(parts);
      write_units_csv(ceiling, dir / "ceiling_units.csv");
      report["ceiling"] = predictivity_json(ceiling, "ceiling_units.csv");
    } else {
      report["ceiling"] = nullptr;
    }
    info("ball decoding from neural responses");
    const auto nbd = neuralbench::ball_decode(al.occluded(), set.spec, al.conditions, plan, opt);
    write_ball_csv(nbd, dir / "neural_ball_decode.csv");
    report["neural_ball_decode"] = ball_json(nbd);

    report["per_model"] = json::object();
    const auto sources = model_sources(set, al.conditions, a.checkpoints, a.latents, a.encoder, a.oracles, a.T,
                                       parse_rollout(a.rollout));
    for (const auto& s : sources) {
      info("scoring " + s.name);
      const auto sel = neuralbench::select_best_layer({s.features}, al, plan, opt);
      const auto& res = sel.results[sel.chosen];
      const auto csv = "model_" + s.name + "_units.csv";
      write_units_csv(res, dir / csv);
      json m = predictivity_json(res, csv);
      m["layer"] = sel.chosen;
      m["layer_median_np"] = sel.median_np;
      m["layer_tie"] = sel.tie;
      const auto feats = metrics::deterministic_set(neuralbench::occluded_features(s.features, al.conditions));
      const auto bd = neuralbench::ball_decode(feats, set.spec, al.conditions, plan, opt);
      write_ball_csv(bd, dir / ("model_" + s.name + "_ball_decode.csv"));
      m["ball_decode"] = ball_json(bd);
      report["per_model"][s.name] = m;
    }
    msim::detail::write_json(report, dir / "eval_report.json");
    if (!report["ceiling"].is_null()) std::cout << "ceiling median NP " << format_double(report["ceiling"]["median_np"].get<double>()) << '\n';
    for (const auto& s : sources) {
      const auto& v = report["per_model"][s.name]["median_np"];
      std::cout << s.name << " median NP " << (v.is_null() ? std::string("nan") : format_double(v.get<double>())) << '\n';
    }
    return 0;
  }
};

struct DecodeBall {
  NeuralArgs a;

  explicit DecodeBall(Command& c) {
    a.add_common(c);
    c.add("neural", a.neural, "neural manifest (decode from responses)");
  }

  int run(const Command& c) const {
    c.begin(a.out);
    const fs::path dir(a.out);
    const auto set = load_conditions(a.conditions);
    const auto plan = metrics::make_split_plan(set.size(), a.splits, a.seed);
    const auto opt = a.np();
    json report;
    report["splits_seed"] = a.seed;
    report["sources"] = json::object();
    if (!a.neural.empty()) {
      const auto al = load_aligned(a.neural, a.conditions, set);
      const auto bd = neuralbench::ball_decode(al.occluded(), set.spec, al.conditions, plan, opt);
      write_ball_csv(bd, dir / "neural_ball_decode.csv");
      report["sources"]["neural"] = ball_json(bd);
    }
    const auto sources = model_sources(set, set.conditions, a.checkpoints, a.latents, a.encoder, a.oracles, a.T,
                                       parse_rollout(a.rollout));
    if (a.neural.empty() && sources.empty())
      throw ConfigError("decode-ball needs a source: --neural, --oracle, --encoder or --checkpoint");
    for (const auto& s : sources) {
      const auto feats = metrics::deterministic_set(neuralbench::occluded_features(s.features, set.conditions));
      const auto bd = neuralbench::ball_decode(feats, set.spec, set.conditions, plan, opt);
      write_ball_csv(bd, dir / (s.name + "_ball_decode.csv"));
      report["sources"][s.name] = ball_json(bd);
    }
    msim::detail::write_json(report, dir / "ball_decode.json");
    for (const auto& [name, v] : report["sources"].items())
      std::cout << name << " joint ball predictivity " << v["joint"]["median"].dump() << '\n';
    return 0;
  }
};

struct EvalOcp {
  std::string out, checkpoint, kind, latents, train_latents, test_latents, judgements, rollout = "sliding";
  std::size_t T = 7, total = 25, iters = 20000, folds = 5;
  std::uint64_t seed = 0;

  explicit EvalOcp(Command& c) {
    c.add("out", out, "output directory")->required();
    c.add("checkpoint", checkpoint, "dynamics checkpoint");
    c.add("kind", kind, "'none' for the no-dynamics baseline (instead of --checkpoint)");
    c.add("latents", latents, "one manifest: judged stimuli are the test set, the rest train the readout");
    c.add("train-latents", train_latents, "readout training manifest");
    c.add("test-latents", test_latents, "test manifest (judged stimuli)");
    c.add("judgements", judgements, "human judgement manifest")->required();
    c.add("T", T, "observed context frames");
    c.add("total", total, "observed + simulated timesteps");
    c.add("rollout", rollout, "sliding | stateful")->check(CLI::IsMember({"sliding", "stateful"}));
    c.add("iters", iters, "logistic regression iterations");
    c.add("folds", folds, "readout cross-validation folds");
    c.add("seed", seed, "seed for readout folds");
  }

  int run(const Command& c) const {
    if (checkpoint.empty() == (kind != "none"))
      throw ConfigError("give exactly one of --checkpoint or --kind none");
    if (latents.empty() == (train_latents.empty() || test_latents.empty()))
      throw ConfigError("give either --latents or both --train-latents and --test-latents");
    c.begin(out);
    const auto hj = load_judgements(judgements);
    LatentDataset train, test;
    if (!latents.empty()) {
      const auto all = load_latent_dataset(latents);
      std::map<std::string, bool> judged;
      for (const auto& s : hj.stimuli) judged[s] = true;
      for (auto* ds : {&train, &test}) {
        ds->d = all.d;
        ds->subsample = all.subsample;
      }
      for (std::size_t i = 0; i < all.size(); ++i) {
        auto& ds = judged.count(all.stimuli[i]) ? test : train;
        ds.stimuli.push_back(all.stimuli[i]);
        ds.latents.push_back(all.latents[i]);
        ds.scenario.push_back(all.scenario[i]);
        ds.label.push_back(all.label[i]);
      }
      if (train.size() == 0) throw DataError(latents + ": every stimulus is judged, none left to train the readout");
    } else {
      train = load_latent_dataset(train_latents);
      test = load_latent_dataset(test_latents);
    }
    dynamics::DynamicsModel model;
    std::string name = "none";
    if (!checkpoint.empty()) {
      model = dynamics::load_checkpoint(checkpoint).state.model;
      name = checkpoint_name(checkpoint);
    } else {
      model = dynamics::make_model(dynamics::Kind::none, train.d, {}, 0);
    }
    const auto mode = parse_rollout(rollout);
    info("building features");
    const auto ftrain = behavior::build_features(train, model, T, total, mode);
    const auto ftest = behavior::build_features(test, model, T, total, mode);
    regress::LogisticOptions lo;
    lo.iters = iters;
    lo.folds = folds;
    lo.seed = seed;
    info("training readout on " + std::to_string(ftrain.size()) + " stimuli");
    const auto readout = behavior::train_readout(ftrain, lo);
    const auto scores = behavior::evaluate(readout, ftest, hj);
    const auto agg = behavior::aggregate(scores);
    behavior::write_scores_csv(scores, agg, fs::path(out) / "ocp_scores.csv");
    json per = json::array();
    for (const auto& s : scores)
      per.push_back({{"scenario", s.scenario},
                     {"n", s.n},
                     {"accuracy", s.accuracy},
                     {"pearson_to_human", s.pearson_to_human},
                     {"flagged", s.flagged}});
    json report{{"model", name},
                {"n_train", ftrain.size()},
                {"n_test", ftest.size()},
                {"feature_dim", ftrain.X.cols()},
                {"C", readout.C},
                {"cv_accuracy", readout.cv_accuracy},
                {"iterations", readout.iterations},
                {"per_scenario", per},
                {"aggregate",
                 {{"accuracy", {{"mean", agg.accuracy.weighted_mean}, {"sem", agg.accuracy.weighted_sem}}},
                  {"pearson_to_human", {{"mean", agg.pearson.weighted_mean}, {"sem", agg.pearson.weighted_sem}}},
                  {"n_flagged", agg.n_flagged}}},
                {"scores_csv_path", "ocp_scores.csv"}};
    msim::detail::write_json(report, fs::path(out) / "ocp_report.json");
    std::cout << name << " OCP accuracy " << format_double(agg.accuracy.weighted_mean) << " +/- "
              << format_double(agg.accuracy.weighted_sem) << ", correlation to humans "
              << format_double(agg.pearson.weighted_mean) << '\n';
    return 0;
  }
};

struct Report {
  std::vector<std::string> runs;
  std::string out;

  explicit Report(Command& c) {
    c.positional("runs", runs, "run directories")->required();
    c.add("out", out, "CSV path (stdout when empty)");
  }

  int run(const Command&) const {
    const auto& all = runs;
    if (all.empty()) throw ConfigError("report needs at least one run directory");
    struct Row {
      std::string run, command, model;
      std::map<std::string, double> v;
    };
    std::vector<Row> rows;
    auto num = [](const json& j) { return j.is_number() ? j.get<double>() : metrics::kNaN; };
    for (const auto& r : all) {
      const fs::path dir(r);
      const auto id = dir.lexically_normal().filename().string().empty()
                          ? dir.lexically_normal().parent_path().filename().string()
                          : dir.lexically_normal().filename().string();
      bool found = false;
      if (fs::exists(dir / "eval_report.json")) {
        found = true;
        const auto j = msim::detail::read_json(dir / "eval_report.json");
        const double ceiling = j["ceiling"].is_null() ? metrics::kNaN : num(j["ceiling"]["median_np"]);
        if (j["per_model"].empty()) rows.push_back({id, "eval-neural", "", {{"ceiling", ceiling}}});
        for (const auto& [name, m] : j["per_model"].items())
          rows.push_back({id, "eval-neural", name,
                          {{"ceiling", ceiling},
                           {"median_np", num(m["median_np"])},
                           {"np_sem", num(m["sem"])},
                           {"ball_joint", num(m["ball_decode"]["joint"]["median"])}}});
      }
      if (fs::exists(dir / "ocp_report.json")) {
        found = true;
        const auto j = msim::detail::read_json(dir / "ocp_report.json");
        const auto& agg = j["aggregate"];
        rows.push_back({id, "eval-ocp", j.value("model", std::string{}),
                        {{"ocp_accuracy", num(agg["accuracy"]["mean"])},
                         {"ocp_accuracy_sem", num(agg["accuracy"]["sem"])},
                         {"ocp_pearson", num(agg["pearson_to_human"]["mean"])},
                         {"ocp_pearson_sem", num(agg["pearson_to_human"]["sem"])}}});
      }
      if (!found) throw DataError(r + ": no eval_report.json or ocp_report.json");
    }
    std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) {
      return std::tie(x.run, x.command, x.model) < std::tie(y.run, y.command, y.model);
    });
    const std::vector<std::string> cols{"ceiling",      "median_np",        "np_sem",      "ball_joint",
                                        "ocp_accuracy", "ocp_accuracy_sem", "ocp_pearson", "ocp_pearson_sem"};
    std::ostringstream os;
    os << "run,command,model";
    for (const auto& c : cols) os << ',' << c;
    os << '\n';
    for (const auto& row : rows) {
      os << row.run << ',' << row.command << ',' << row.model;
      for (const auto& c : cols) {
        os << ',';
        if (auto it = row.v.find(c); it != row.v.end()) os << format_double(it->second);
      }
      os << '\n';
    }
    if (out.empty()) {
      std::cout << os.str();
    } else {
      std::ofstream f(out, std::ios::binary);
      if (!f) throw IoError("cannot write " + out);
      f << os.str();
    }
    return 0;
  }
};

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::config: return 2;
    case ErrorKind::data: return 3;
    case ErrorKind::numerical: return 4;
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Mental-simulation model evaluation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "suppress progress messages");
  app.fallthrough();
  app.allow_config_extras(CLI::config_extras_mode::error);
  app.set_config("--config", "", "JSON object of option values for the subcommand (command-line flags win)");

  Command c_gen(app, "mpong-gen", "generate Mental-Pong conditions, frames and oracle latents");
  Command c_synth(app, "synth", "generate synthetic datasets");
  Command c_train(app, "train-dynamics", "train a latent dynamics model");
  Command c_neural(app, "eval-neural", "score sources against neural responses");
  Command c_ocp(app, "eval-ocp", "object-contact prediction readout and human comparison");
  Command c_ball(app, "decode-ball", "decode ball state from a source");
  Command c_report(app, "report", "combine run reports into one table");
  MpongGen gen(c_gen);
  Synth syn(c_synth);
  TrainDynamics train(c_train);
  EvalNeural neural(c_neural);
  EvalOcp ocp(c_ocp);
  DecodeBall ball(c_ball);
  Report report(c_report);

  std::string section;
  for (int i = 1; i < argc && section.empty(); ++i)
    for (const auto* sub : app.get_subcommands({}))
      if (sub->get_name() == argv[i]) section = argv[i];
  app.config_formatter(std::make_shared<JsonConfig>(section));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  }
  g_verbosity = quiet ? 0 : 1;

  try {
    if (c_gen.app()->parsed()) return gen.run(c_gen);
    if (c_synth.app()->parsed()) return syn.run(c_synth);
    if (c_train.app()->parsed()) return train.run(c_train);
    if (c_neural.app()->parsed()) return neural.run(c_neural);
    if (c_ocp.app()->parsed()) return ocp.run(c_ocp);
    if (c_ball.app()->parsed()) return ball.run(c_ball);
    if (c_report.app()->parsed()) return report.run(c_report);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return exit_code(e.kind());
  } catch (const json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const fs::filesystem_error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "internal error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
