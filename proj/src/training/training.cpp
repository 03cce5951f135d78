#include "jointdyn/training.hpp"

#include <cmath>
#include <sstream>

#include "jointdyn/ops.hpp"
#include "jointdyn/random.hpp"

namespace jointdyn::training {

namespace tg = tensorgrad;

CurriculumSchedule CurriculumSchedule::paper() {
  return {{{0, 1, 32, 1e-4}, {500'000, 3, 8, 1e-5}, {1'000'000, 5, 8, 1e-5}}};
}

CurriculumSchedule CurriculumSchedule::desk() { return {{{0, 1, 16, 1e-4}, {4'000, 3, 8, 1e-5}, {8'000, 5, 8, 1e-5}}}; }

CurriculumSchedule CurriculumSchedule::constant(std::size_t K, std::size_t I, double lr) { return {{{0, K, I, lr}}}; }

void CurriculumSchedule::validate() const {
  if (phases.empty()) throw ConfigError("curriculum: needs at least one phase");
  if (phases.front().start_iteration != 0) throw ConfigError("curriculum: first phase must start at iteration 0");
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const auto& p = phases[i];
    if (i > 0 && p.start_iteration <= phases[i - 1].start_iteration) {
      throw ConfigError("curriculum: start iterations must strictly increase");
    }
    if (p.lookahead_K < 1 || p.minibatch_I < 1 || !(p.learning_rate > 0.0)) {
      throw ConfigError("curriculum: K, I and learning rate must be positive");
    }
  }
}

std::string CurriculumSchedule::to_text() const {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < phases.size(); ++i) {
    const auto& p = phases[i];
    if (i) os << ',';
    os << p.start_iteration << ':' << p.lookahead_K << ':' << p.minibatch_I << ':' << p.learning_rate;
  }
  return os.str();
}

CurriculumSchedule CurriculumSchedule::from_text(const std::string& text) {
  CurriculumSchedule s;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    std::istringstream is(item);
    std::string start, k, i, lr;
    if (!std::getline(is, start, ':') || !std::getline(is, k, ':') || !std::getline(is, i, ':') ||
        !std::getline(is, lr)) {
      throw ConfigError("curriculum: expected start:K:I:lr, got '" + item + "'");
    }
    CurriculumPhase p;
    p.start_iteration = static_cast<std::uint64_t>(io::parse_int("curriculum", start));
    p.lookahead_K = static_cast<std::size_t>(io::parse_int("curriculum", k));
    p.minibatch_I = static_cast<std::size_t>(io::parse_int("curriculum", i));
    p.learning_rate = io::parse_double("curriculum", lr);
    s.phases.push_back(p);
  }
  s.validate();
  return s;
}

const CurriculumPhase& curriculum_lookup(const CurriculumSchedule& schedule, std::uint64_t iteration) {
  schedule.validate();
  const CurriculumPhase* current = &schedule.phases.front();
  for (const auto& p : schedule.phases) {
    if (p.start_iteration <= iteration) current = &p;
  }
  return *current;
}

void TrainConfig::validate() const {
  if (!(lambda_reward >= 0.0)) throw ConfigError("lambda_reward must be >= 0");
  if (unroll_T < 1) throw ConfigError("unroll_T must be >= 1");
  if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0)) {
    throw ConfigError("adam betas must lie in [0,1)");
  }
  if (!(adam_epsilon > 0.0)) throw ConfigError("adam_epsilon must be > 0");
  if (!(grad_clip_threshold > 0.0)) throw ConfigError("grad_clip_threshold must be > 0");
  if (!(taylor_threshold > 0.0 && taylor_threshold < 1.0)) throw ConfigError("taylor_threshold must lie in (0,1)");
  if (total_iterations < 1) throw ConfigError("total_iterations must be >= 1");
  curriculum.validate();
}

namespace {

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("key '" + key + "': expected true/false, got '" + v + "'");
}

std::size_t parse_size(const std::string& key, const std::string& v) {
  const long long n = io::parse_int(key, v);
  if (n < 0) throw ConfigError("key '" + key + "' must be non-negative");
  return static_cast<std::size_t>(n);
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

bool TrainConfig::apply(const std::string& key, const std::string& v) {
  if (key == "lambda_reward") {
    lambda_reward = io::parse_double(key, v);
    if (!(lambda_reward >= 0.0)) throw ConfigError("lambda_reward must be >= 0");
  } else if (key == "unroll_T") {
    unroll_T = parse_size(key, v);
  } else if (key == "lookahead_K" || key == "minibatch_I" || key == "learning_rate") {
    // Shorthand for a single-phase curriculum; edits every phase.
    for (auto& p : curriculum.phases) {
      if (key == "lookahead_K") p.lookahead_K = parse_size(key, v);
      if (key == "minibatch_I") p.minibatch_I = parse_size(key, v);
      if (key == "learning_rate") p.learning_rate = io::parse_double(key, v);
    }
  } else if (key == "adam_beta1") {
    adam_beta1 = io::parse_double(key, v);
  } else if (key == "adam_beta2") {
    adam_beta2 = io::parse_double(key, v);
  } else if (key == "adam_epsilon") {
    adam_epsilon = io::parse_double(key, v);
  } else if (key == "grad_clip_threshold") {
    grad_clip_threshold = io::parse_double(key, v);
  } else if (key == "taylor_threshold") {
    taylor_threshold = io::parse_double(key, v);
  } else if (key == "curriculum") {
    curriculum = CurriculumSchedule::from_text(v);
  } else if (key == "total_iterations") {
    total_iterations = static_cast<std::uint64_t>(parse_size(key, v));
  } else if (key == "seed") {
    seed = static_cast<std::uint64_t>(parse_size(key, v));
  } else if (key == "clip_feedback_in_training") {
    clip_feedback_in_training = parse_bool(key, v);
  } else {
    return false;
  }
  return true;
}

std::vector<std::pair<std::string, std::string>> TrainConfig::to_key_values() const {
  return {
      {"lambda_reward", fmt(lambda_reward)},
      {"unroll_T", std::to_string(unroll_T)},
      {"adam_beta1", fmt(adam_beta1)},
      {"adam_beta2", fmt(adam_beta2)},
      {"adam_epsilon", fmt(adam_epsilon)},
      {"grad_clip_threshold", std::isinf(grad_clip_threshold) ? "inf" : fmt(grad_clip_threshold)},
      {"taylor_threshold", fmt(taylor_threshold)},
      {"curriculum", curriculum.to_text()},
      {"total_iterations", std::to_string(total_iterations)},
      {"seed", std::to_string(seed)},
      {"clip_feedback_in_training", clip_feedback_in_training ? "true" : "false"},
  };
}

TrainConfig TrainConfig::from_key_values(const io::KeyValues& kv) {
  TrainConfig c;
  // The curriculum goes first so the single-phase shorthands refine it.
  if (const auto it = kv.find("curriculum"); it != kv.end()) c.apply(it->first, it->second);
  for (const auto& [k, v] : kv) {
    if (k == "curriculum") continue;
    if (!c.apply(k, v)) throw ConfigError("unknown config key '" + k + "'");
  }
  c.validate();
  return c;
}

double cross_entropy_stable(const Tensor& reward_onehot, const Tensor& probs, double taylor_threshold) {
  return tg::cross_entropy_stable(nullptr, reward_onehot, probs, taylor_threshold).item();
}

LossGraph compound_loss(tg::Tape* tape, const JointModelParams& model, const std::vector<Segment>& batch,
                        const LossOptions& options) {
  if (batch.empty()) throw datapipe::DataError("compound_loss: empty minibatch");
  const std::size_t T = batch.front().unroll_T;
  const std::size_t K = batch.front().lookahead_K;
  const std::size_t I = batch.size();
  const std::size_t h = model.config.history;
  for (const auto& s : batch) {
    if (s.unroll_T != T || s.lookahead_K != K) throw datapipe::DataError("compound_loss: segments disagree on T or K");
    if (s.history != h) {
      throw datapipe::DataError("compound_loss: segment history " + std::to_string(s.history) +
                                " does not match the model's " + std::to_string(h));
    }
    if (s.frames.size() < h + T + K - 1) throw datapipe::DataError("compound_loss: segment too short");
  }

  const double norm = 1.0 / (2.0 * static_cast<double>(I * T * K));
  LossGraph out;
  auto& b = out.breakdown;
  b.frame_per_step.assign(K, 0.0);
  b.reward_per_step.assign(K, 0.0);
  std::vector<Tensor> terms;
  std::vector<double> coeffs;
  terms.reserve(2 * I * T * K);
  coeffs.reserve(2 * I * T * K);

  for (const auto& seg : batch) {
    for (std::size_t t = 0; t < T; ++t) {
      std::vector<Tensor> actions;
      for (std::size_t k = 1; k <= K; ++k) actions.push_back(seg.action(t, k));
      const auto steps = netmodel::rollout(tape, model, seg.history_at(t), actions, options.rollout);
      for (std::size_t k = 1; k <= K; ++k) {
        const auto& step = steps[k - 1];
        Tensor fe = tg::squared_error(tape, step.frame, seg.target_frame(t, k));
        Tensor ce = tg::cross_entropy_stable(tape, seg.target_reward(t, k), step.reward_probs, options.taylor_threshold);
        b.frame_per_step[k - 1] += fe.item();
        b.reward_per_step[k - 1] += ce.item();
        terms.push_back(std::move(fe));
        coeffs.push_back(norm);
        terms.push_back(std::move(ce));
        coeffs.push_back(norm * options.lambda_reward);
      }
    }
  }
  double frame_sum = 0.0, reward_sum = 0.0;
  for (std::size_t k = 0; k < K; ++k) {
    frame_sum += b.frame_per_step[k];
    reward_sum += b.reward_per_step[k];
    b.frame_per_step[k] /= static_cast<double>(I * T);
    b.reward_per_step[k] /= static_cast<double>(I * T);
  }
  b.frame_loss = norm * frame_sum;
  b.reward_loss = norm * reward_sum;
  out.total = tg::weighted_sum(tape, terms, coeffs);
  b.total = out.total.item();
  return out;
}

void enable_gradients(JointModelParams& model) {
  for (auto& p : model.parameters()) {
    if (!p.requires_grad()) p.set_requires_grad();
  }
}

std::vector<std::vector<double>> loss_gradients(JointModelParams& model, const std::vector<Segment>& batch,
                                                const LossOptions& options) {
  enable_gradients(model);
  auto params = model.parameters();
  tg::zero_grads(params);
  tg::Tape tape;
  auto graph = compound_loss(&tape, model, batch, options);
  tape.backward(graph.total);
  std::vector<std::vector<double>> out;
  for (const auto& p : params) out.emplace_back(p.grad().begin(), p.grad().end());
  tg::zero_grads(params);
  return out;
}

LossBreakdown train_step(JointModelParams& model, const std::vector<Segment>& batch, const StepSettings& settings,
                         tg::AdamState& adam) {
  enable_gradients(model);
  auto params = model.parameters();
  tg::zero_grads(params);
  tg::Tape tape;
  auto graph = compound_loss(&tape, model, batch, settings.loss);
  if (!std::isfinite(graph.breakdown.total)) {
    throw NumericError("non-finite loss at iteration " + std::to_string(settings.iteration));
  }
  tape.backward(graph.total);
  tape.clear();
  try {
    tg::clip_gradients_global_norm(params, settings.grad_clip_threshold);
    adam_step(params, adam, settings.learning_rate);
  } catch (const NumericError& e) {
    throw NumericError(std::string(e.what()) + " (iteration " + std::to_string(settings.iteration) + ")");
  }
  tg::zero_grads(params);
  return graph.breakdown;
}

std::string loss_log_csv(const std::vector<LossLogRow>& rows) {
  std::ostringstream os;
  os.precision(17);
  os << "iteration,total,frame,reward,K,I,lr\n";
  for (const auto& r : rows) {
    os << r.iteration << ',' << r.total << ',' << r.frame << ',' << r.reward << ',' << r.K << ',' << r.I << ','
       << r.lr << '\n';
  }
  return os.str();
}

TrainResult train_loop(const datapipe::Dataset& dataset, const netmodel::NetworkConfig& net,
                       netmodel::ModelVariant variant, const TrainConfig& config, const TrainLoopOptions& options) {
  return train_loop(dataset, netmodel::init_weights(net, config.seed, variant), config, options);
}

TrainResult train_loop(const datapipe::Dataset& dataset, JointModelParams model, const TrainConfig& config,
                       const TrainLoopOptions& options) {
  config.validate();
  if (dataset.trajectories.empty()) throw datapipe::DataError("train_loop: empty dataset");
  if (dataset.manifest.frame_height != model.config.frame_height ||
      dataset.manifest.frame_width != model.config.frame_width ||
      dataset.manifest.num_actions != model.config.num_actions) {
    throw datapipe::DataError("train_loop: dataset frame size or action count does not match the network");
  }
  std::size_t max_K = 0;
  for (const auto& p : config.curriculum.phases) max_K = std::max(max_K, p.lookahead_K);
  const std::size_t need = datapipe::required_length(model.config.history, config.unroll_T, max_K);
  bool long_enough = false;
  for (const auto& t : dataset.trajectories) long_enough = long_enough || t.length() >= need;
  if (!long_enough) {
    throw datapipe::DataError("train_loop: no trajectory reaches the required segment length " + std::to_string(need));
  }

  enable_gradients(model);
  auto adam = tg::make_adam_state(model.parameters(), config.adam_beta1, config.adam_beta2, config.adam_epsilon);
  Rng sampler(Rng(config.seed).derive(0x5a3));

  TrainResult result;
  result.log.reserve(config.total_iterations);
  auto checkpoint = [&](const std::string& name) {
    if (options.checkpoint_dir.empty()) return;
    const auto path = options.checkpoint_dir / name;
    netmodel::save_checkpoint(path, model);
    result.checkpoints.push_back(path);
  };

  const CurriculumPhase* previous = nullptr;
  for (std::uint64_t it = 0; it < config.total_iterations; ++it) {
    const CurriculumPhase& phase = curriculum_lookup(config.curriculum, it);
    if (previous && previous != &phase) checkpoint("ckpt_iter" + std::to_string(it) + ".jdyn");
    previous = &phase;

    std::vector<Segment> batch;
    batch.reserve(phase.minibatch_I);
    for (std::size_t i = 0; i < phase.minibatch_I; ++i) {
      batch.push_back(
          datapipe::sample_segment(dataset, model.config.history, config.unroll_T, phase.lookahead_K, sampler));
    }
    StepSettings s;
    s.learning_rate = phase.learning_rate;
    s.grad_clip_threshold = config.grad_clip_threshold;
    s.loss.lambda_reward = config.lambda_reward;
    s.loss.taylor_threshold = config.taylor_threshold;
    s.loss.rollout = {netmodel::Mode::train, config.clip_feedback_in_training};
    s.iteration = it;
    const LossBreakdown b = train_step(model, batch, s, adam);
    LossLogRow row{it, b.total, b.frame_loss, b.reward_loss, phase.lookahead_K, phase.minibatch_I, phase.learning_rate};
    result.log.push_back(row);
    if (options.on_iteration && !options.on_iteration(row)) break;
  }
  checkpoint("final.jdyn");
  result.model = std::move(model);
  return result;
}

}  // namespace jointdyn::training
