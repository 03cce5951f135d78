#include "jointdyn/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

#include "jointdyn/io.hpp"
#include "jointdyn/random.hpp"

namespace jointdyn::evalharness {

namespace tg = tensorgrad;

void RolloutEvalConfig::validate() const {
  if (num_eval_trajectories < 1 || max_lookahead < 1) {
    throw std::invalid_argument("eval config: trajectory count and look-ahead must be positive");
  }
}

double CumRewardErrorDist::zero_error_fraction(std::size_t k) const {
  const auto& e = errors.at(k);
  if (e.empty()) return 0.0;
  return static_cast<double>(std::count(e.begin(), e.end(), 0)) / static_cast<double>(e.size());
}

std::vector<int> ModelRewardPredictor::predict_rewards(const Trajectory& trajectory, const EvalSample& sample,
                                                       std::size_t steps) const {
  const std::size_t h = model_.config.history;
  std::vector<tg::Tensor> history;
  for (std::size_t j = sample.t0 + 1 - h; j <= sample.t0; ++j) history.push_back(trajectory.frame(j));
  std::vector<tg::Tensor> actions;
  for (std::size_t k = 0; k < steps; ++k) actions.push_back(trajectory.action_onehot(sample.t0 + k));
  const auto out = netmodel::rollout(nullptr, model_, std::move(history), actions, {netmodel::Mode::eval, false});
  std::vector<int> rewards;
  rewards.reserve(out.size());
  for (const auto& s : out) rewards.push_back(netmodel::predicted_reward_value(s.reward_probs));
  return rewards;
}

std::vector<EvalSample> draw_eval_samples(const Dataset& test, std::size_t history, std::size_t max_lookahead,
                                          std::size_t count, std::uint64_t seed) {
  const std::size_t need = history + max_lookahead;
  std::uint64_t total = 0;
  for (const auto& t : test.trajectories) {
    if (t.length() >= need) total += t.length() - need + 1;
  }
  if (total == 0) {
    throw datapipe::DataError("evaluation needs trajectories of length >= " + std::to_string(need));
  }
  Rng rng(seed);
  std::vector<EvalSample> out;
  out.reserve(count);
  for (std::size_t j = 0; j < count; ++j) {
    std::uint64_t pick = rng.index(total);
    for (std::size_t i = 0; i < test.trajectories.size(); ++i) {
      const auto& t = test.trajectories[i];
      if (t.length() < need) continue;
      const std::uint64_t n = t.length() - need + 1;
      if (pick < n) {
        out.push_back({i, static_cast<std::size_t>(pick) + history - 1});
        break;
      }
      pick -= n;
    }
  }
  return out;
}

std::vector<int> true_cumulative(const Trajectory& trajectory, std::size_t t0, std::size_t steps) {
  std::vector<int> c(steps + 1, 0);
  for (std::size_t k = 1; k <= steps; ++k) c[k] = c[k - 1] + trajectory.reward_value(t0 + k - 1);
  return c;
}

CumRewardErrorDist eval_cumulative_reward(const RewardPredictor& predictor, const Dataset& test,
                                          const RolloutEvalConfig& config, std::size_t history) {
  config.validate();
  const auto samples =
      draw_eval_samples(test, history, config.max_lookahead, config.num_eval_trajectories, config.seed);
  CumRewardErrorDist dist;
  dist.errors.assign(config.max_lookahead + 1, std::vector<int>(samples.size(), 0));
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto& traj = test.trajectories[samples[j].trajectory];
    const auto truth = true_cumulative(traj, samples[j].t0, config.max_lookahead);
    const auto pred = predictor.predict_rewards(traj, samples[j], config.max_lookahead);
    if (pred.size() != config.max_lookahead) throw std::logic_error("predictor returned the wrong number of steps");
    int acc = 0;
    for (std::size_t k = 1; k <= config.max_lookahead; ++k) {
      acc += pred[k - 1];
      dist.errors[k][j] = truth[k] - acc;
    }
  }
  return dist;
}

namespace {

int draw_reward(const std::array<double, 3>& marginal, Rng& rng) {
  const double u = rng.uniform01();
  if (u < marginal[0]) return -1;
  if (u < marginal[0] + marginal[1]) return 0;
  // Guards against marginals that sum to slightly under 1.
  if (marginal[2] == 0.0) return marginal[1] > 0.0 ? 0 : -1;
  return 1;
}

}  // namespace

std::vector<std::vector<int>> sample_marginal_cumulative(const std::array<double, 3>& marginal, std::size_t steps,
                                                         std::size_t samples, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::vector<int>> out(steps + 1, std::vector<int>(samples, 0));
  for (std::size_t j = 0; j < samples; ++j) {
    int acc = 0;
    for (std::size_t k = 1; k <= steps; ++k) {
      acc += draw_reward(marginal, rng);
      out[k][j] = acc;
    }
  }
  return out;
}

CumRewardErrorDist marginal_baseline(const Dataset& test, const RolloutEvalConfig& config, std::size_t history) {
  config.validate();
  const std::uint64_t sample_seed = config.paired_baseline ? config.seed : Rng(config.seed).derive(7);
  const auto samples =
      draw_eval_samples(test, history, config.max_lookahead, config.num_eval_trajectories, sample_seed);
  const auto predicted = sample_marginal_cumulative(test.manifest.reward_marginal, config.max_lookahead,
                                                    samples.size(), Rng(config.seed).derive(11));
  CumRewardErrorDist dist;
  dist.errors.assign(config.max_lookahead + 1, std::vector<int>(samples.size(), 0));
  for (std::size_t j = 0; j < samples.size(); ++j) {
    const auto truth =
        true_cumulative(test.trajectories[samples[j].trajectory], samples[j].t0, config.max_lookahead);
    for (std::size_t k = 1; k <= config.max_lookahead; ++k) dist.errors[k][j] = truth[k] - predicted[k][j];
  }
  return dist;
}

double percentile(std::vector<double> samples, double q) {
  if (samples.empty()) throw std::invalid_argument("percentile of an empty sample");
  if (!(q >= 0.0 && q <= 1.0)) throw std::invalid_argument("percentile: q must lie in [0,1]");
  std::sort(samples.begin(), samples.end());
  const double pos = q * static_cast<double>(samples.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, samples.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return samples[lo] + frac * (samples[hi] - samples[lo]);
}

PercentileBand percentiles(const CumRewardErrorDist& dist) {
  PercentileBand band;
  for (const auto& e : dist.errors) {
    if (e.empty()) throw std::invalid_argument("percentiles: empty error sample");
    std::vector<double> v(e.begin(), e.end());
    band.p5.push_back(percentile(v, 0.05));
    band.median.push_back(percentile(v, 0.5));
    band.p95.push_back(percentile(v, 0.95));
  }
  return band;
}

StepStats summarize(const std::vector<double>& values) {
  if (values.empty()) throw std::invalid_argument("summarize: empty sample");
  StepStats s;
  s.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  s.median = percentile(values, 0.5);
  s.p5 = percentile(values, 0.05);
  s.p95 = percentile(values, 0.95);
  s.min = *std::min_element(values.begin(), values.end());
  s.max = *std::max_element(values.begin(), values.end());
  return s;
}

TestLossCurve test_loss_curve(const netmodel::JointModelParams& model, const Dataset& test,
                              const TestLossConfig& config) {
  if (config.lookahead_K < 1 || config.minibatch_I < 1 || config.num_batches < 1 || config.unroll_T < 1) {
    throw std::invalid_argument("test_loss_curve: K, I, T and batch count must be positive");
  }
  Rng rng(config.seed);
  training::LossOptions opts;
  opts.lambda_reward = config.lambda_reward;
  opts.taylor_threshold = config.taylor_threshold;
  opts.rollout = {netmodel::Mode::eval, false};
  TestLossCurve curve;
  for (std::size_t b = 0; b < config.num_batches; ++b) {
    std::vector<datapipe::Segment> batch;
    for (std::size_t i = 0; i < config.minibatch_I; ++i) {
      batch.push_back(
          datapipe::sample_segment(test, model.config.history, config.unroll_T, config.lookahead_K, rng));
    }
    const auto loss = training::compound_loss(nullptr, model, batch, opts).breakdown;
    std::vector<double> compound(config.lookahead_K);
    for (std::size_t k = 0; k < config.lookahead_K; ++k) {
      compound[k] = loss.frame_per_step[k] + config.lambda_reward * loss.reward_per_step[k];
    }
    curve.compound.push_back(std::move(compound));
    curve.frame.push_back(loss.frame_per_step);
    curve.reward.push_back(loss.reward_per_step);
  }
  auto stats = [&](const std::vector<std::vector<double>>& rows) {
    std::vector<StepStats> out;
    for (std::size_t k = 0; k < config.lookahead_K; ++k) {
      std::vector<double> col;
      for (const auto& r : rows) col.push_back(r[k]);
      out.push_back(summarize(col));
    }
    return out;
  };
  curve.compound_stats = stats(curve.compound);
  curve.frame_stats = stats(curve.frame);
  curve.reward_stats = stats(curve.reward);
  return curve;
}

ErrorMap error_map(const tg::Tensor& truth, const tg::Tensor& predicted) {
  if (truth.shape() != predicted.shape()) {
    throw DimensionError("error_map: shapes " + tg::shape_string(truth.shape()) + " and " +
                         tg::shape_string(predicted.shape()) + " differ");
  }
  ErrorMap m;
  m.height = truth.rank() >= 2 ? truth.dim(truth.rank() - 2) : 1;
  m.width = truth.dim(truth.rank() - 1);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    const double d = predicted[i] - truth[i];
    m.squared.push_back(d * d);
    m.sign.push_back(d > 0 ? 1 : (d < 0 ? -1 : 0));
  }
  return m;
}

void write_error_map_pgm(const std::filesystem::path& magnitude_path, const std::filesystem::path& sign_path,
                         const ErrorMap& map) {
  auto write = [&](const std::filesystem::path& p, auto pixel) {
    std::string header = "P5\n" + std::to_string(map.width) + " " + std::to_string(map.height) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    for (std::size_t i = 0; i < map.squared.size(); ++i) bytes.push_back(pixel(i));
    io::write_file(p, bytes);
  };
  write(magnitude_path, [&](std::size_t i) {
    return static_cast<std::uint8_t>(std::lround(255.0 * std::min(map.squared[i], 4.0) / 4.0));
  });
  write(sign_path, [&](std::size_t i) { return static_cast<std::uint8_t>(map.sign[i] < 0 ? 0 : (map.sign[i] > 0 ? 255 : 128)); });
}

std::string band_svg(const PercentileBand& model, const PercentileBand& baseline, const std::string& title) {
  const double w = 480, h = 240, pad = 30;
  double lo = 0, hi = 0;
  for (const auto* b : {&model, &baseline}) {
    for (double v : b->p5) lo = std::min(lo, v);
    for (double v : b->p95) hi = std::max(hi, v);
  }
  if (hi - lo < 1) hi = lo + 1;
  const std::size_t n = model.median.size();
  auto px = [&](std::size_t k) { return pad + (w - 2 * pad) * static_cast<double>(k) / static_cast<double>(std::max<std::size_t>(n - 1, 1)); };
  auto py = [&](double v) { return h - pad - (h - 2 * pad) * (v - lo) / (hi - lo); };
  std::ostringstream os;
  os.precision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\">\n";
  os << "<text x=\"" << pad << "\" y=\"16\" font-size=\"12\">" << title << "</text>\n";
  auto band = [&](const PercentileBand& b, const char* colour) {
    os << "<polygon fill=\"" << colour << "\" fill-opacity=\"0.25\" points=\"";
    for (std::size_t k = 0; k < n; ++k) os << px(k) << ',' << py(b.p95[k]) << ' ';
    for (std::size_t k = n; k-- > 0;) os << px(k) << ',' << py(b.p5[k]) << ' ';
    os << "\"/>\n<polyline fill=\"none\" stroke=\"" << colour << "\" points=\"";
    for (std::size_t k = 0; k < n; ++k) os << px(k) << ',' << py(b.median[k]) << ' ';
    os << "\"/>\n";
  };
  band(baseline, "red");
  band(model, "blue");
  os << "<line x1=\"" << pad << "\" x2=\"" << w - pad << "\" y1=\"" << py(0) << "\" y2=\"" << py(0)
     << "\" stroke=\"black\" stroke-dasharray=\"4\"/>\n</svg>\n";
  return os.str();
}

void write_band_report(const std::filesystem::path& dir, const CumRewardErrorDist& model,
                       const CumRewardErrorDist& baseline) {
  std::filesystem::create_directories(dir);
  const auto mb = percentiles(model);
  const auto bb = percentiles(baseline);
  std::ostringstream band;
  band << "step,median,p5,p95,zero_fraction,baseline_median,baseline_p5,baseline_p95,baseline_zero_fraction\n";
  for (std::size_t k = 0; k < model.errors.size(); ++k) {
    band << k << ',' << mb.median[k] << ',' << mb.p5[k] << ',' << mb.p95[k] << ',' << model.zero_error_fraction(k)
         << ',' << bb.median[k] << ',' << bb.p5[k] << ',' << bb.p95[k] << ',' << baseline.zero_error_fraction(k)
         << '\n';
  }
  io::write_text(dir / "band.csv", band.str());
  for (std::size_t k = 5; k < model.errors.size(); k += 5) {
    std::map<int, std::pair<int, int>> counts;
    for (int e : model.errors[k]) ++counts[e].first;
    for (int e : baseline.errors[k]) ++counts[e].second;
    std::ostringstream hist;
    hist << "error,model_count,baseline_count\n";
    for (const auto& [e, c] : counts) hist << e << ',' << c.first << ',' << c.second << '\n';
    io::write_text(dir / ("hist_step" + std::to_string(k) + ".csv"), hist.str());
  }
  io::write_text(dir / "band.svg", band_svg(mb, bb, "cumulative reward error (model blue, baseline red)"));
}

double ComparisonReport::mean_zero_error_fraction(netmodel::ModelVariant variant, std::size_t k) const {
  double acc = 0.0;
  std::size_t n = 0;
  for (const auto& r : runs) {
    if (r.variant != variant) continue;
    acc += r.dist.zero_error_fraction(k);
    ++n;
  }
  return n ? acc / static_cast<double>(n) : 0.0;
}

std::string ComparisonReport::summary_csv(std::size_t k) const {
  std::vector<std::uint64_t> seeds;
  for (const auto& r : runs) {
    if (std::find(seeds.begin(), seeds.end(), r.seed) == seeds.end()) seeds.push_back(r.seed);
  }
  std::ostringstream os;
  os << "game,variant,parameters";
  for (auto s : seeds) os << ",zero_fraction_step" << k << "_seed" << s;
  os << ",median_step" << k << "\n";
  std::vector<std::pair<std::string, netmodel::ModelVariant>> keys;
  for (const auto& r : runs) {
    std::pair<std::string, netmodel::ModelVariant> key{r.game, r.variant};
    if (std::find(keys.begin(), keys.end(), key) == keys.end()) keys.push_back(key);
  }
  for (const auto& [game, variant] : keys) {
    std::size_t params = 0;
    std::vector<double> medians;
    std::map<std::uint64_t, double> frac;
    for (const auto& r : runs) {
      if (r.game != game || r.variant != variant) continue;
      params = r.parameter_count;
      frac[r.seed] = r.dist.zero_error_fraction(k);
      medians.push_back(r.band.median.at(k));
    }
    os << game << ',' << netmodel::variant_name(variant) << ',' << params;
    for (auto s : seeds) os << ',' << (frac.count(s) ? frac[s] : std::nan(""));
    os << ',' << (medians.empty() ? std::nan("") : percentile(medians, 0.5)) << '\n';
  }
  return os.str();
}

ComparisonReport compare_variants(const netmodel::NetworkConfig& net, const Dataset& train, const Dataset& test,
                                  const training::TrainConfig& train_config, const RolloutEvalConfig& eval_config,
                                  const CompareOptions& options) {
  ComparisonReport report;
  report.baseline = marginal_baseline(test, eval_config, net.history);
  for (auto variant : options.variants) {
    for (auto seed : options.seeds) {
      training::TrainConfig cfg = train_config;
      cfg.seed = seed;
      auto trained = training::train_loop(train, net, variant, cfg);
      VariantRun run;
      run.game = options.game;
      run.variant = variant;
      run.seed = seed;
      run.parameter_count = netmodel::count_parameters(trained.model);
      run.dist = eval_cumulative_reward(ModelRewardPredictor(trained.model), test, eval_config, net.history);
      run.band = percentiles(run.dist);
      if (!options.report_dir.empty()) {
        const auto dir = options.report_dir / options.game / netmodel::variant_name(variant) /
                         ("seed" + std::to_string(seed));
        write_band_report(dir, run.dist, report.baseline);
        io::write_text(dir / "loss_log.csv", training::loss_log_csv(trained.log));
      }
      report.runs.push_back(std::move(run));
    }
  }
  return report;
}

}  // namespace jointdyn::evalharness
