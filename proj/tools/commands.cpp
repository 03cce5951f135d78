#include "commands.hpp"

#include <chrono>
#include <cmath>
#include <optional>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "jointdyn/datapipe.hpp"
#include "jointdyn/evalharness.hpp"
#include "jointdyn/gradcheck.hpp"
#include "jointdyn/io.hpp"
#include "jointdyn/netmodel.hpp"
#include "jointdyn/toyenv.hpp"
#include "jointdyn/training.hpp"

namespace jointdyn::cli {
namespace {

namespace fs = std::filesystem;

class MissingFile : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string hex64(std::uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::vector<std::uint64_t> parse_seed_list(const std::string& key, const std::string& text) {
  std::vector<std::uint64_t> out;
  for (double d : io::parse_double_list(key, text)) {
    if (d < 0 || d != std::floor(d)) throw ConfigError(key + ": seeds must be non-negative integers");
    out.push_back(static_cast<std::uint64_t>(d));
  }
  return out;
}

std::string join(const std::vector<double>& v) {
  std::string s;
  for (double x : v) s += (s.empty() ? "" : ",") + io::exact_double(x);
  return s;
}

std::string join_seeds(const std::vector<std::uint64_t>& v) {
  std::string s;
  for (auto x : v) s += (s.empty() ? "" : ",") + std::to_string(x);
  return s;
}

// Everything a command needs besides its flags. Loaded from a key = value
// file; flags override single keys afterwards.
struct RunConfig {
  training::TrainConfig train;
  std::string network = "desk";
  netmodel::ModelVariant variant = netmodel::ModelVariant::joint;
  toyenv::EnvConfig env;
  double epsilon = 0.2;
  std::size_t steps = 20000;  // agent decisions; emulator frames are 4x
  double test_fraction = 0.2;
  evalharness::RolloutEvalConfig eval;
  evalharness::TestLossConfig test_loss;
  std::vector<std::uint64_t> compare_seeds{1, 2, 3};
  std::vector<double> lambda_values{0.1, 1, 10, 100};

  void apply(const std::string& key, const std::string& v) {
    auto size = [&] {
      const long long n = io::parse_int(key, v);
      if (n < 0) throw ConfigError(key + " must be non-negative");
      return static_cast<std::size_t>(n);
    };
    if (key == "network") {
      if (v != "desk" && v != "test16" && v != "paper") throw ConfigError("network must be desk, test16 or paper");
      network = v;
    } else if (key == "variant") {
      variant = netmodel::parse_variant(v);
    } else if (key == "game") {
      env.game = toyenv::parse_game(v);
    } else if (key == "spawn_probability") {
      env.spawn_probability = io::parse_double(key, v);
    } else if (key == "resolution") {
      env.resolution = size();
    } else if (key == "episode_length") {
      env.episode_length = size();
    } else if (key == "cars_per_lane") {
      env.cars_per_lane = size();
    } else if (key == "max_objects") {
      env.max_objects = size();
    } else if (key == "epsilon") {
      epsilon = io::parse_double(key, v);
    } else if (key == "steps") {
      steps = size();
    } else if (key == "test_fraction") {
      test_fraction = io::parse_double(key, v);
    } else if (key == "eval_trajectories") {
      eval.num_eval_trajectories = size();
    } else if (key == "max_lookahead") {
      eval.max_lookahead = size();
    } else if (key == "paired_baseline") {
      if (v != "true" && v != "false") throw ConfigError("paired_baseline must be true or false");
      eval.paired_baseline = v == "true";
    } else if (key == "test_lookahead_K") {
      test_loss.lookahead_K = size();
    } else if (key == "test_minibatch_I") {
      test_loss.minibatch_I = size();
    } else if (key == "test_batches") {
      test_loss.num_batches = size();
    } else if (key == "compare_seeds") {
      compare_seeds = parse_seed_list(key, v);
    } else if (key == "lambda_values") {
      lambda_values = io::parse_double_list(key, v);
    } else if (!train.apply(key, v)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }

  void sync_seeds() {
    eval.seed = train.seed;
    test_loss.seed = train.seed;
    test_loss.lambda_reward = train.lambda_reward;
    test_loss.taylor_threshold = train.taylor_threshold;
  }

  void validate() const {
    train.validate();
    env.validate();
    eval.validate();
    if (epsilon < 0 || epsilon > 1) throw ConfigError("epsilon must lie in [0,1]");
    if (test_fraction <= 0 || test_fraction >= 1) throw ConfigError("test_fraction must lie in (0,1)");
    if (compare_seeds.empty()) throw ConfigError("compare_seeds is empty");
    if (lambda_values.empty()) throw ConfigError("lambda_values is empty");
    for (double l : lambda_values)
      if (!(l > 0)) throw ConfigError("lambda values must be positive");
  }

  netmodel::NetworkConfig network_config(std::size_t num_actions) const {
    if (network == "test16") return netmodel::NetworkConfig::test16(num_actions);
    if (network == "paper") return netmodel::NetworkConfig::paper(num_actions);
    return netmodel::NetworkConfig::desk(num_actions);
  }

  std::vector<std::pair<std::string, std::string>> to_key_values() const {
    auto kv = train.to_key_values();
    const std::vector<std::pair<std::string, std::string>> own{
        {"network", network},
        {"variant", netmodel::variant_name(variant)},
        {"game", toyenv::game_name(env.game)},
        {"spawn_probability", io::exact_double(env.spawn_probability)},
        {"resolution", std::to_string(env.resolution)},
        {"episode_length", std::to_string(env.episode_length)},
        {"cars_per_lane", std::to_string(env.cars_per_lane)},
        {"max_objects", std::to_string(env.max_objects)},
        {"epsilon", io::exact_double(epsilon)},
        {"steps", std::to_string(steps)},
        {"test_fraction", io::exact_double(test_fraction)},
        {"eval_trajectories", std::to_string(eval.num_eval_trajectories)},
        {"max_lookahead", std::to_string(eval.max_lookahead)},
        {"paired_baseline", eval.paired_baseline ? "true" : "false"},
        {"test_lookahead_K", std::to_string(test_loss.lookahead_K)},
        {"test_minibatch_I", std::to_string(test_loss.minibatch_I)},
        {"test_batches", std::to_string(test_loss.num_batches)},
        {"compare_seeds", join_seeds(compare_seeds)},
        {"lambda_values", join(lambda_values)},
    };
    kv.insert(kv.end(), own.begin(), own.end());
    return kv;
  }
};

struct Flags {
  std::string config, data, out, game, variant, values, checkpoint;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
};

std::string read_text(const fs::path& p) {
  if (!fs::exists(p)) throw MissingFile("no such file: " + p.string());
  std::ifstream in(p);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunConfig load_config(const Flags& f) {
  RunConfig c;
  if (!f.config.empty()) {
    for (const auto& [k, v] : io::parse_key_values(read_text(f.config))) c.apply(k, v);
  }
  if (!f.game.empty()) c.apply("game", f.game);
  if (!f.variant.empty()) c.apply("variant", f.variant);
  if (f.seed) c.train.seed = *f.seed;
  if (f.steps) c.steps = *f.steps;
  if (!f.values.empty()) c.apply("lambda_values", f.values);
  c.sync_seeds();
  c.validate();
  return c;
}

std::size_t thread_cap() {
  const char* env = std::getenv("JOINTDYN_THREADS");
  if (env == nullptr || *env == '\0') return 1;
  const long long n = io::parse_int("JOINTDYN_THREADS", env);
  if (n < 1) throw ConfigError("JOINTDYN_THREADS must be a positive integer");
  return static_cast<std::size_t>(n);
}

fs::path require_file(const fs::path& p) {
  if (!fs::exists(p)) throw MissingFile("no such file: " + p.string());
  return p;
}

// --data may name a dataset file or a directory holding train.ajvr/test.ajvr.
fs::path data_file(const std::string& data, const std::string& split) {
  const fs::path p(data);
  if (fs::is_directory(p)) return require_file(p / (split + ".ajvr"));
  return require_file(p);
}

std::string file_digest(const fs::path& p) { return hex64(io::fnv1a64(io::read_file(p))); }

// Reproducibility record: the full config, seeds, input digests and format
// versions. The timestamp lives only here so other outputs stay byte-stable.
struct Record {
  std::vector<std::pair<std::string, std::string>> entries;

  void add(const std::string& k, const std::string& v) { entries.emplace_back(k, v); }

  void write(const fs::path& dir, const std::string& command, const RunConfig& cfg, int argc, char** argv) const {
    std::vector<std::pair<std::string, std::string>> kv;
    std::string args;
    for (int i = 1; i < argc; ++i) args += (i > 1 ? " " : "") + std::string(argv[i]);
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&now));
    kv.emplace_back("command", command);
    kv.emplace_back("argv", args);
    kv.emplace_back("timestamp", stamp);
    kv.emplace_back("threads_requested", std::to_string(thread_cap()));
    kv.emplace_back("threads_used", "1");
    kv.emplace_back("dataset_format", "AJVR1 manifest v1");
    kv.emplace_back("checkpoint_format", "JDYN1 v1");
    kv.emplace_back("loss_log_format", "csv v1");
    kv.insert(kv.end(), entries.begin(), entries.end());
    for (const auto& [k, v] : cfg.to_key_values()) kv.emplace_back("config." + k, v);
    fs::create_directories(dir);
    io::write_text(dir / "run_record.txt", io::format_key_values(kv));
  }
};

void check_frames(const netmodel::NetworkConfig& net, const datapipe::Dataset& d) {
  if (net.frame_height != d.manifest.frame_height || net.frame_width != d.manifest.frame_width) {
    throw ConfigError("network expects " + std::to_string(net.frame_height) + "x" + std::to_string(net.frame_width) +
                      " frames but the data has " + std::to_string(d.manifest.frame_height) + "x" +
                      std::to_string(d.manifest.frame_width));
  }
}

training::TrainLoopOptions progress(const fs::path& ckpt_dir, const std::string& tag) {
  training::TrainLoopOptions o;
  o.checkpoint_dir = ckpt_dir;
  o.on_iteration = [tag](const training::LossLogRow& r) {
    if ((r.iteration + 1) % 500 == 0) {
      std::cerr << tag << "iter " << r.iteration + 1 << " total " << r.total << " frame " << r.frame << " reward "
                << r.reward << " K " << r.K << "\n";
    }
    return true;
  };
  return o;
}

// --- commands ---------------------------------------------------------------

int gen_data(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const toyenv::ScriptedAgent agent{toyenv::Policy::epsilon_greedy_path, cfg.epsilon};
  agent.validate();
  const auto data = toyenv::make_game_data(cfg.env, agent, cfg.steps * 4, cfg.train.seed, cfg.test_fraction);
  const fs::path out(f.out);
  fs::create_directories(out);
  datapipe::write_dataset(out / "train.ajvr", data.train);
  datapipe::write_dataset(out / "test.ajvr", data.test);
  Record rec;
  rec.add("data_seed", std::to_string(cfg.train.seed));
  rec.add("train_steps", std::to_string(data.train.total_steps()));
  rec.add("test_steps", std::to_string(data.test.total_steps()));
  rec.add("train_digest", file_digest(out / "train.ajvr"));
  rec.add("test_digest", file_digest(out / "test.ajvr"));
  rec.write(out, "gen-data", cfg, argc, argv);
  std::cout << "wrote " << data.train.trajectories.size() << " train and " << data.test.trajectories.size()
            << " test trajectories to " << out.string() << "\n";
  return kOk;
}

int train(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const auto train_path = data_file(f.data, "train");
  if (!f.checkpoint.empty()) require_file(f.checkpoint);
  const auto data = datapipe::read_dataset(train_path);
  const fs::path out(f.out);
  fs::create_directories(out);

  training::TrainResult result;
  if (!f.checkpoint.empty()) {
    auto model = netmodel::load_checkpoint(f.checkpoint);
    check_frames(model.config, data);
    result = training::train_loop(data, std::move(model), cfg.train, progress(out, ""));
  } else {
    const auto net = cfg.network_config(data.manifest.num_actions);
    check_frames(net, data);
    result = training::train_loop(data, net, cfg.variant, cfg.train, progress(out, ""));
  }
  io::write_text(out / "loss_log.csv", training::loss_log_csv(result.log));
  Record rec;
  rec.add("train_seed", std::to_string(cfg.train.seed));
  rec.add("data", train_path.string());
  rec.add("data_digest", file_digest(train_path));
  if (!f.checkpoint.empty()) rec.add("resumed_from", f.checkpoint);
  rec.add("parameters", std::to_string(netmodel::count_parameters(result.model)));
  for (std::size_t i = 0; i < result.checkpoints.size(); ++i) {
    rec.add("checkpoint" + std::to_string(i), result.checkpoints[i].filename().string());
  }
  rec.write(out, "train", cfg, argc, argv);
  std::cout << "trained " << result.log.size() << " iterations; checkpoints in " << out.string() << "\n";
  return kOk;
}

double tail_mean(const std::vector<training::LossLogRow>& log, double training::LossLogRow::*field) {
  const std::size_t n = std::min<std::size_t>(100, log.size());
  double s = 0;
  for (std::size_t i = log.size() - n; i < log.size(); ++i) s += log[i].*field;
  return n ? s / static_cast<double>(n) : 0.0;
}

int sweep_lambda(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const auto train_path = data_file(f.data, "train");
  const auto data = datapipe::read_dataset(train_path);
  std::optional<datapipe::Dataset> test;
  if (fs::is_directory(f.data) && fs::exists(fs::path(f.data) / "test.ajvr")) {
    test = datapipe::read_dataset(fs::path(f.data) / "test.ajvr");
  }
  const auto net = cfg.network_config(data.manifest.num_actions);
  check_frames(net, data);
  const fs::path out(f.out);
  std::ostringstream summary;
  summary << "lambda,final_total,final_frame,final_reward,test_frame_mean,test_reward_mean\n";
  for (double lambda : cfg.lambda_values) {
    auto tc = cfg.train;
    tc.lambda_reward = lambda;
    std::ostringstream name;
    name << "lambda_" << lambda;
    const auto dir = out / name.str();
    fs::create_directories(dir);
    const auto r = training::train_loop(data, net, cfg.variant, tc, progress(dir, name.str() + " "));
    io::write_text(dir / "loss_log.csv", training::loss_log_csv(r.log));
    summary << lambda << "," << tail_mean(r.log, &training::LossLogRow::total) << ","
            << tail_mean(r.log, &training::LossLogRow::frame) << ","
            << tail_mean(r.log, &training::LossLogRow::reward);
    if (test) {
      auto tl = cfg.test_loss;
      tl.lambda_reward = lambda;
      const auto curve = evalharness::test_loss_curve(r.model, *test, tl);
      double fm = 0, rm = 0;
      for (const auto& s : curve.frame_stats) fm += s.mean / static_cast<double>(curve.frame_stats.size());
      for (const auto& s : curve.reward_stats) rm += s.mean / static_cast<double>(curve.reward_stats.size());
      summary << "," << fm << "," << rm;
    } else {
      summary << ",,";
    }
    summary << "\n";
  }
  io::write_text(out / "sweep_summary.csv", summary.str());
  Record rec;
  rec.add("train_seed", std::to_string(cfg.train.seed));
  rec.add("data_digest", file_digest(train_path));
  rec.write(out, "sweep-lambda", cfg, argc, argv);
  std::cout << "wrote " << cfg.lambda_values.size() << " loss logs to " << out.string() << "\n";
  return kOk;
}

struct Loaded {
  netmodel::JointModelParams model;
  datapipe::Dataset test;
  fs::path test_path;
};

Loaded load_model_and_test(const Flags& f) {
  const auto test_path = data_file(f.data, "test");
  require_file(f.checkpoint);
  Loaded l{netmodel::load_checkpoint(f.checkpoint), datapipe::read_dataset(test_path), test_path};
  check_frames(l.model.config, l.test);
  return l;
}

fs::path report_dir(const fs::path& out, const std::string& game, const netmodel::JointModelParams& m) {
  return out / "report" / game / netmodel::variant_name(m.variant) / ("seed" + std::to_string(m.seed));
}

int eval(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const auto l = load_model_and_test(f);
  const std::string game = f.game.empty() ? l.test.manifest.game : f.game;
  const std::size_t h = l.model.config.history;
  const auto dist = evalharness::eval_cumulative_reward(evalharness::ModelRewardPredictor(l.model), l.test, cfg.eval, h);
  const auto base = evalharness::marginal_baseline(l.test, cfg.eval, h);
  const auto dir = report_dir(f.out, game, l.model);
  evalharness::write_band_report(dir, dist, base);
  std::ostringstream zs;
  zs << "step,zero_fraction,baseline_zero_fraction\n";
  for (std::size_t k = 0; k <= cfg.eval.max_lookahead; ++k) {
    zs << k << "," << dist.zero_error_fraction(k) << "," << base.zero_error_fraction(k) << "\n";
  }
  io::write_text(dir / "zero_fraction.csv", zs.str());
  Record rec;
  rec.add("eval_seed", std::to_string(cfg.eval.seed));
  rec.add("checkpoint", f.checkpoint);
  rec.add("checkpoint_digest", file_digest(f.checkpoint));
  rec.add("data_digest", file_digest(l.test_path));
  rec.write(dir, "eval", cfg, argc, argv);
  const std::size_t k = std::min<std::size_t>(10, cfg.eval.max_lookahead);
  std::cout << "zero-error fraction at step " << k << ": model " << dist.zero_error_fraction(k) << ", baseline "
            << base.zero_error_fraction(k) << "; report in " << dir.string() << "\n";
  return kOk;
}

int test_loss(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const auto l = load_model_and_test(f);
  const auto curve = evalharness::test_loss_curve(l.model, l.test, cfg.test_loss);
  std::ostringstream os;
  os << "step,compound_mean,compound_median,compound_p5,compound_p95,frame_mean,reward_mean\n";
  for (std::size_t k = 0; k < curve.compound_stats.size(); ++k) {
    const auto& c = curve.compound_stats[k];
    os << k + 1 << "," << c.mean << "," << c.median << "," << c.p5 << "," << c.p95 << ","
       << curve.frame_stats[k].mean << "," << curve.reward_stats[k].mean << "\n";
  }
  const fs::path out(f.out);
  fs::create_directories(out);
  io::write_text(out / "test_loss.csv", os.str());
  Record rec;
  rec.add("sample_seed", std::to_string(cfg.test_loss.seed));
  rec.add("checkpoint_digest", file_digest(f.checkpoint));
  rec.add("data_digest", file_digest(l.test_path));
  rec.write(out, "test-loss", cfg, argc, argv);
  std::cout << "wrote " << (out / "test_loss.csv").string() << "\n";
  return kOk;
}

void write_pgm(const fs::path& p, std::size_t h, std::size_t w, const std::vector<std::uint8_t>& px) {
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  std::vector<std::uint8_t> bytes(header.begin(), header.end());
  bytes.insert(bytes.end(), px.begin(), px.end());
  io::write_file(p, bytes);
}

int rollout_viz(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const auto l = load_model_and_test(f);
  const std::string game = f.game.empty() ? l.test.manifest.game : f.game;
  const std::size_t h = l.model.config.history, L = cfg.eval.max_lookahead;
  const auto sample = evalharness::draw_eval_samples(l.test, h, L, 1, cfg.eval.seed).front();
  const auto& traj = l.test.trajectories[sample.trajectory];
  std::vector<tensorgrad::Tensor> history, actions;
  for (std::size_t j = sample.t0 + 1 - h; j <= sample.t0; ++j) history.push_back(traj.frame(j));
  for (std::size_t k = 0; k < L; ++k) actions.push_back(traj.action_onehot(sample.t0 + k));
  const auto steps = netmodel::rollout(nullptr, l.model, history, actions, {netmodel::Mode::eval, false});
  const auto dir = report_dir(f.out, game, l.model);
  fs::create_directories(dir);
  const auto& mean = l.test.manifest.mean_image;
  const std::size_t H = traj.height, W = traj.width;
  for (std::size_t k = 1; k <= L; ++k) {
    const auto truth = traj.frame(sample.t0 + k);
    const auto& pred = steps[k - 1].frame;
    evalharness::write_error_map_pgm(dir / ("errormap_" + std::to_string(k) + ".pgm"),
                                     dir / ("errorsign_" + std::to_string(k) + ".pgm"),
                                     evalharness::error_map(truth, pred));
    // Ground truth left, prediction right.
    const auto t8 = datapipe::denormalize_frames(truth.values(), mean);
    const auto p8 = datapipe::denormalize_frames(pred.values(), mean);
    std::vector<std::uint8_t> pair(H * 2 * W);
    for (std::size_t r = 0; r < H; ++r) {
      for (std::size_t c = 0; c < W; ++c) {
        pair[r * 2 * W + c] = t8[r * W + c];
        pair[r * 2 * W + W + c] = p8[r * W + c];
      }
    }
    write_pgm(dir / ("frames_" + std::to_string(k) + ".pgm"), H, 2 * W, pair);
  }
  Record rec;
  rec.add("eval_seed", std::to_string(cfg.eval.seed));
  rec.add("trajectory", std::to_string(sample.trajectory));
  rec.add("t0", std::to_string(sample.t0));
  rec.add("checkpoint_digest", file_digest(f.checkpoint));
  rec.write(dir / "rollout", "rollout-viz", cfg, argc, argv);
  std::cout << "wrote " << L << " error maps to " << dir.string() << "\n";
  return kOk;
}

int gradcheck(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  bool ok = true;
  for (const auto& c : tensorgrad::check_all_ops(cfg.train.seed + 1)) {
    const bool pass = c.result.max_relative_error < 1e-4;
    ok &= pass;
    std::cout << (pass ? "ok   " : "FAIL ") << c.op << " max_rel_err " << c.result.max_relative_error << "\n";
  }
  toyenv::EnvConfig env;
  env.resolution = 16;
  env.episode_length = 400;
  const auto data = toyenv::make_game_data(env, {toyenv::Policy::epsilon_greedy_path, 0.2}, 2000, cfg.train.seed);
  auto model = netmodel::init_weights(netmodel::NetworkConfig::test16(3), cfg.train.seed + 21);
  Rng rng(cfg.train.seed);
  const std::vector<datapipe::Segment> batch{datapipe::sample_segment(data.train, 4, 1, 2, rng)};
  const auto r = tensorgrad::finite_difference_check(
      [&](tensorgrad::Tape* tape, std::vector<tensorgrad::Tensor>&) {
        return training::compound_loss(tape, model, batch, {}).total;
      },
      model.parameters());
  const bool pass = r.max_relative_error < 1e-3;
  ok &= pass;
  std::cout << (pass ? "ok   " : "FAIL ") << "compound_loss K=2 max_rel_err " << r.max_relative_error << " over "
            << r.entries_checked << " parameters\n";
  if (!f.out.empty()) {
    Record rec;
    rec.add("result", ok ? "pass" : "fail");
    rec.write(f.out, "gradcheck", cfg, argc, argv);
  }
  return ok ? kOk : kFailed;
}

int compare(const Flags& f, int argc, char** argv) {
  const auto cfg = load_config(f);
  const auto train_path = data_file(f.data, "train");
  const auto test_path = data_file(f.data, "test");
  const auto train = datapipe::read_dataset(train_path);
  const auto test = datapipe::read_dataset(test_path);
  const auto net = cfg.network_config(train.manifest.num_actions);
  check_frames(net, train);
  evalharness::CompareOptions opts;
  opts.seeds = cfg.compare_seeds;
  opts.game = f.game.empty() ? train.manifest.game : f.game;
  opts.report_dir = fs::path(f.out) / "report";
  const auto report = evalharness::compare_variants(net, train, test, cfg.train, cfg.eval, opts);
  const std::size_t k = std::min<std::size_t>(10, cfg.eval.max_lookahead);
  io::write_text(fs::path(f.out) / "summary.csv", report.summary_csv(k));
  Record rec;
  rec.add("train_digest", file_digest(train_path));
  rec.add("test_digest", file_digest(test_path));
  rec.write(f.out, "compare-variants", cfg, argc, argv);
  for (auto v : opts.variants) {
    std::cout << netmodel::variant_name(v) << ": mean zero-error fraction at step " << k << " "
              << report.mean_zero_error_fraction(v, k) << "\n";
  }
  return kOk;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"jointdyn: joint frame and reward prediction on toy pixel games"};
  app.require_subcommand(1);
  Flags f;

  auto add_config = [&](CLI::App* c) { c->add_option("--config", f.config, "key = value config file"); };
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", f.seed, "seed for data, training and evaluation"); };
  auto add_data = [&](CLI::App* c) { c->add_option("--data", f.data, "dataset file or directory")->required(); };
  auto add_out = [&](CLI::App* c, bool required = true) {
    auto* o = c->add_option("--out", f.out, "output directory");
    if (required) o->required();
  };
  auto add_ckpt = [&](CLI::App* c, bool required) {
    auto* o = c->add_option("--checkpoint", f.checkpoint, "model checkpoint (.jdyn)");
    if (required) o->required();
  };
  auto add_game = [&](CLI::App* c) { c->add_option("--game", f.game, "crossing | hunter"); };

  auto* gen = app.add_subcommand("gen-data", "generate train/test trajectories from a toy game");
  add_config(gen), add_seed(gen), add_out(gen), add_game(gen);
  gen->add_option("--steps", f.steps, "agent decisions to record (4 emulator frames each)");

  auto* tr = app.add_subcommand("train", "train a model");
  add_config(tr), add_seed(tr), add_data(tr), add_out(tr), add_ckpt(tr, false);
  tr->add_option("--variant", f.variant, "joint | decoupled-obj | decoupled-arch");

  auto* sw = app.add_subcommand("sweep-lambda", "train once per reward weight");
  add_config(sw), add_seed(sw), add_data(sw), add_out(sw);
  sw->add_option("--values", f.values, "comma-separated reward weights");
  sw->add_option("--variant", f.variant, "joint | decoupled-obj | decoupled-arch");

  auto* ev = app.add_subcommand("eval", "cumulative reward error against the marginal baseline");
  add_config(ev), add_seed(ev), add_data(ev), add_out(ev), add_ckpt(ev, true), add_game(ev);

  auto* tl = app.add_subcommand("test-loss", "per-step test loss curve");
  add_config(tl), add_seed(tl), add_data(tl), add_out(tl), add_ckpt(tl, true);

  auto* rv = app.add_subcommand("rollout-viz", "error maps along one evaluated rollout");
  add_config(rv), add_seed(rv), add_data(rv), add_out(rv), add_ckpt(rv, true), add_game(rv);

  auto* gc = app.add_subcommand("gradcheck", "finite-difference check of every op and the unrolled loss");
  add_config(gc), add_seed(gc), add_out(gc, false);

  auto* cv = app.add_subcommand("compare-variants", "train and evaluate every model variant over several seeds");
  add_config(cv), add_data(cv), add_out(cv), add_game(cv);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsage;
  }

  try {
    thread_cap();
    if (gen->parsed()) return gen_data(f, argc, argv);
    if (tr->parsed()) return train(f, argc, argv);
    if (sw->parsed()) return sweep_lambda(f, argc, argv);
    if (ev->parsed()) return eval(f, argc, argv);
    if (tl->parsed()) return test_loss(f, argc, argv);
    if (rv->parsed()) return rollout_viz(f, argc, argv);
    if (gc->parsed()) return gradcheck(f, argc, argv);
    if (cv->parsed()) return compare(f, argc, argv);
  } catch (const MissingFile& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kMissingFile;
  } catch (const FormatError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadData;
  } catch (const datapipe::DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kBadData;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: invalid configuration: " << e.what() << "\n";
    return kBadConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kFailed;
  }
  return kUsage;
}

}  // namespace jointdyn::cli
