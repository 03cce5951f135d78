#include "jointdyn/datapipe.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "jointdyn/io.hpp"

namespace jointdyn::datapipe {

void RawEpisode::validate() const {
  if (actions.size() != frames.size() || rewards.size() != frames.size()) {
    throw DataError("raw episode streams differ in length");
  }
  for (const auto& f : frames) {
    if (f.size() != height * width) throw DataError("raw episode frame has wrong size");
  }
  for (auto a : actions) {
    if (a >= num_actions) throw DataError("raw episode action index out of range");
  }
}

std::span<const double> Trajectory::frame_values(std::size_t n) const {
  return std::span<const double>(frames).subspan(n * frame_size(), frame_size());
}

Tensor Trajectory::frame(std::size_t n) const {
  const auto v = frame_values(n);
  return Tensor({1, height, width}, std::vector<double>(v.begin(), v.end()));
}

Tensor Trajectory::action_onehot(std::size_t n) const {
  Tensor t({num_actions}, 0.0);
  t[actions.at(n)] = 1.0;
  return t;
}

Tensor Trajectory::reward_onehot(std::size_t n) const {
  Tensor t({3}, 0.0);
  t[reward_classes.at(n)] = 1.0;
  return t;
}

std::size_t Dataset::total_steps() const {
  std::size_t n = 0;
  for (const auto& t : trajectories) n += t.length();
  return n;
}

std::vector<double> normalize_frames(std::span<const std::uint8_t> raw, std::span<const double> mean_image) {
  if (mean_image.empty() || raw.size() % mean_image.size() != 0) {
    throw DimensionError("normalize_frames: frame data is not a whole number of mean-image frames");
  }
  std::vector<double> out(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out[i] = static_cast<double>(raw[i]) / 255.0 - mean_image[i % mean_image.size()];
  }
  return out;
}

std::vector<std::uint8_t> denormalize_frames(std::span<const double> normalized, std::span<const double> mean_image) {
  if (mean_image.empty() || normalized.size() % mean_image.size() != 0) {
    throw DimensionError("denormalize_frames: frame data is not a whole number of mean-image frames");
  }
  std::vector<std::uint8_t> out(normalized.size());
  for (std::size_t i = 0; i < normalized.size(); ++i) {
    const double v = std::round((normalized[i] + mean_image[i % mean_image.size()]) * 255.0);
    out[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

std::uint8_t clip_reward(long long raw_sum) {
  if (raw_sum < 0) return 0;
  if (raw_sum == 0) return 1;
  return 2;
}

DecimatedEpisode skip_and_accumulate(const RawEpisode& raw, std::size_t skip) {
  if (skip < 1) throw std::invalid_argument("skip_and_accumulate: skip must be >= 1");
  raw.validate();
  DecimatedEpisode out;
  out.height = raw.height;
  out.width = raw.width;
  out.num_actions = raw.num_actions;
  for (std::size_t start = 0; start + skip <= raw.length(); start += skip) {
    out.frames.push_back(raw.frames[start]);
    out.actions.push_back(raw.actions[start]);
    long long sum = 0;
    for (std::size_t j = start; j < start + skip; ++j) sum += raw.rewards[j];
    out.reward_sums.push_back(static_cast<int>(sum));
    out.reward_classes.push_back(clip_reward(sum));
  }
  return out;
}

std::vector<Tensor> encode_onehots(std::span<const std::size_t> indices, std::size_t width) {
  std::vector<Tensor> out;
  out.reserve(indices.size());
  for (std::size_t idx : indices) {
    if (idx >= width) {
      throw std::out_of_range("encode_onehots: index " + std::to_string(idx) + " >= width " + std::to_string(width));
    }
    Tensor t({width}, 0.0);
    t[idx] = 1.0;
    out.push_back(std::move(t));
  }
  return out;
}

std::size_t decode_onehot(const Tensor& onehot) {
  std::size_t hot = onehot.size();
  for (std::size_t i = 0; i < onehot.size(); ++i) {
    if (onehot[i] == 1.0 && hot == onehot.size()) {
      hot = i;
    } else if (onehot[i] != 0.0) {
      throw std::invalid_argument("decode_onehot: not a one-hot vector");
    }
  }
  if (hot == onehot.size()) throw std::invalid_argument("decode_onehot: no hot entry");
  return hot;
}

std::vector<std::uint8_t> downsample_area(std::span<const std::uint8_t> src, std::size_t src_h, std::size_t src_w,
                                          std::size_t dst_h, std::size_t dst_w) {
  if (src.size() != src_h * src_w || dst_h == 0 || dst_w == 0 || dst_h > src_h || dst_w > src_w) {
    throw DimensionError("downsample_area: invalid dimensions");
  }
  // Separable box filter: each output cell covers [i*s, (i+1)*s) in source units.
  auto weights = [](std::size_t src_n, std::size_t dst_n) {
    std::vector<std::vector<std::pair<std::size_t, double>>> w(dst_n);
    const double scale = static_cast<double>(src_n) / static_cast<double>(dst_n);
    for (std::size_t i = 0; i < dst_n; ++i) {
      const double lo = static_cast<double>(i) * scale, hi = lo + scale;
      for (auto s = static_cast<std::size_t>(lo); s < src_n && static_cast<double>(s) < hi; ++s) {
        const double overlap = std::min(hi, static_cast<double>(s + 1)) - std::max(lo, static_cast<double>(s));
        if (overlap > 0) w[i].emplace_back(s, overlap / scale);
      }
    }
    return w;
  };
  const auto wy = weights(src_h, dst_h);
  const auto wx = weights(src_w, dst_w);
  std::vector<std::uint8_t> out(dst_h * dst_w);
  for (std::size_t y = 0; y < dst_h; ++y) {
    for (std::size_t x = 0; x < dst_w; ++x) {
      double acc = 0.0;
      for (auto [sy, fy] : wy[y]) {
        for (auto [sx, fx] : wx[x]) acc += fy * fx * src[sy * src_w + sx];
      }
      out[y * dst_w + x] = static_cast<std::uint8_t>(std::clamp(std::round(acc), 0.0, 255.0));
    }
  }
  return out;
}

std::vector<double> compute_mean_image(const std::vector<DecimatedEpisode>& episodes) {
  if (episodes.empty()) throw DataError("compute_mean_image: no episodes");
  const std::size_t n = episodes.front().height * episodes.front().width;
  std::vector<double> sum(n, 0.0);
  std::size_t count = 0;
  for (const auto& e : episodes) {
    for (const auto& f : e.frames) {
      if (f.size() != n) throw DimensionError("compute_mean_image: frame size mismatch");
      for (std::size_t i = 0; i < n; ++i) sum[i] += f[i];
      ++count;
    }
  }
  if (count == 0) throw DataError("compute_mean_image: no frames");
  for (double& v : sum) v /= 255.0 * static_cast<double>(count);
  return sum;
}

std::array<double, 3> reward_marginal(const std::vector<Trajectory>& trajectories) {
  std::array<std::size_t, 3> counts{0, 0, 0};
  std::size_t total = 0;
  for (const auto& t : trajectories) {
    for (auto c : t.reward_classes) {
      ++counts.at(c);
      ++total;
    }
  }
  if (total == 0) return {0.0, 1.0, 0.0};
  return {static_cast<double>(counts[0]) / static_cast<double>(total),
          static_cast<double>(counts[1]) / static_cast<double>(total),
          static_cast<double>(counts[2]) / static_cast<double>(total)};
}

namespace {

Trajectory make_trajectory(std::size_t h, std::size_t w, std::size_t num_actions, std::vector<std::uint8_t> raw,
                           std::vector<std::uint8_t> actions, std::vector<std::uint8_t> rewards,
                           std::span<const double> mean_image) {
  Trajectory t;
  t.height = h;
  t.width = w;
  t.num_actions = num_actions;
  t.frames = normalize_frames(raw, mean_image);
  t.raw_frames = std::move(raw);
  t.actions = std::move(actions);
  t.reward_classes = std::move(rewards);
  return t;
}

}  // namespace

Dataset build_dataset(const std::vector<DecimatedEpisode>& episodes, std::span<const double> mean_image,
                      const std::string& game, const std::string& split, std::uint64_t seed) {
  if (episodes.empty()) throw DataError("build_dataset: no episodes");
  Dataset d;
  const auto& first = episodes.front();
  if (mean_image.size() != first.height * first.width) throw DimensionError("build_dataset: mean image size");
  d.manifest.game = game;
  d.manifest.split = split;
  d.manifest.seed = seed;
  d.manifest.frame_height = first.height;
  d.manifest.frame_width = first.width;
  d.manifest.num_actions = first.num_actions;
  d.manifest.mean_image.assign(mean_image.begin(), mean_image.end());
  for (const auto& e : episodes) {
    if (e.height != first.height || e.width != first.width || e.num_actions != first.num_actions) {
      throw DataError("build_dataset: episodes disagree on frame size or action count");
    }
    std::vector<std::uint8_t> raw;
    raw.reserve(e.length() * e.height * e.width);
    for (const auto& f : e.frames) raw.insert(raw.end(), f.begin(), f.end());
    d.trajectories.push_back(
        make_trajectory(e.height, e.width, e.num_actions, std::move(raw), e.actions, e.reward_classes, mean_image));
  }
  d.manifest.num_trajectories = d.trajectories.size();
  d.manifest.reward_marginal = reward_marginal(d.trajectories);
  return d;
}

std::pair<std::vector<DecimatedEpisode>, std::vector<DecimatedEpisode>> split_train_test(
    std::vector<DecimatedEpisode> episodes, double test_fraction, std::uint64_t seed) {
  if (episodes.size() < 2) throw DataError("split_train_test: need at least two episodes");
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) throw std::invalid_argument("test_fraction must be in (0,1)");
  std::vector<std::size_t> order(episodes.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.index(i + 1)]);
  auto n_test = static_cast<std::size_t>(std::round(test_fraction * static_cast<double>(episodes.size())));
  n_test = std::clamp<std::size_t>(n_test, 1, episodes.size() - 1);
  std::vector<std::size_t> test_idx(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_test));
  std::sort(test_idx.begin(), test_idx.end());
  std::pair<std::vector<DecimatedEpisode>, std::vector<DecimatedEpisode>> out;
  std::size_t ti = 0;
  for (std::size_t i = 0; i < episodes.size(); ++i) {
    if (ti < test_idx.size() && test_idx[ti] == i) {
      out.second.push_back(std::move(episodes[i]));
      ++ti;
    } else {
      out.first.push_back(std::move(episodes[i]));
    }
  }
  return out;
}

std::string DatasetManifest::to_text() const {
  std::string mean;
  for (std::size_t i = 0; i < mean_image.size(); ++i) {
    if (i) mean += ',';
    mean += io::exact_double(mean_image[i]);
  }
  std::vector<std::pair<std::string, std::string>> kv{
      {"format_version", "1"},
      {"game", game},
      {"split", split},
      {"seed", std::to_string(seed)},
      {"num_trajectories", std::to_string(num_trajectories)},
      {"frame_height", std::to_string(frame_height)},
      {"frame_width", std::to_string(frame_width)},
      {"num_actions", std::to_string(num_actions)},
      {"reward_marginal", io::exact_double(reward_marginal[0]) + "," + io::exact_double(reward_marginal[1]) + "," +
                              io::exact_double(reward_marginal[2])},
      {"mean_image", mean},
  };
  for (const auto& [k, v] : env) kv.emplace_back("env." + k, v);
  return io::format_key_values(kv);
}

DatasetManifest DatasetManifest::from_text(const std::string& text) {
  const auto kv = io::parse_key_values(text);
  auto get = [&](const std::string& key) -> const std::string& {
    const auto it = kv.find(key);
    if (it == kv.end()) throw FormatError(FormatError::Kind::content, "manifest missing '" + key + "'");
    return it->second;
  };
  auto get_size = [&](const std::string& key) {
    const long long v = io::parse_int(key, get(key));
    if (v < 0) throw FormatError(FormatError::Kind::content, "manifest '" + key + "' is negative");
    return static_cast<std::size_t>(v);
  };
  if (get("format_version") != "1") throw FormatError(FormatError::Kind::content, "unsupported manifest version");
  DatasetManifest m;
  m.game = get("game");
  m.split = get("split");
  m.seed = static_cast<std::uint64_t>(std::stoull(get("seed")));
  m.num_trajectories = get_size("num_trajectories");
  m.frame_height = get_size("frame_height");
  m.frame_width = get_size("frame_width");
  m.num_actions = get_size("num_actions");
  const auto marg = io::parse_double_list("reward_marginal", get("reward_marginal"));
  if (marg.size() != 3) throw FormatError(FormatError::Kind::content, "reward_marginal needs 3 entries");
  std::copy(marg.begin(), marg.end(), m.reward_marginal.begin());
  m.mean_image = io::parse_double_list("mean_image", get("mean_image"));
  for (const auto& [k, v] : kv) {
    if (k.rfind("env.", 0) == 0) {
      m.env[k.substr(4)] = v;
    } else if (k != "format_version" && k != "game" && k != "split" && k != "seed" && k != "num_trajectories" &&
               k != "frame_height" && k != "frame_width" && k != "num_actions" && k != "reward_marginal" &&
               k != "mean_image") {
      throw FormatError(FormatError::Kind::content, "manifest has unknown key '" + k + "'");
    }
  }
  return m;
}

std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset) {
  io::ByteWriter w;
  w.magic("AJVR1");
  w.str(dataset.manifest.to_text());
  for (const auto& t : dataset.trajectories) {
    w.u32(static_cast<std::uint32_t>(t.length()));
    w.raw(t.raw_frames);
    w.raw(t.actions);
    w.raw(t.reward_classes);
  }
  w.checksum();
  return w.bytes();
}

Dataset deserialize_dataset(std::span<const std::uint8_t> bytes) {
  io::ByteReader(bytes).expect_magic("AJVR1");
  io::ByteReader r(io::verify_checksum(bytes, "dataset"));
  r.expect_magic("AJVR1");
  Dataset d;
  d.manifest = DatasetManifest::from_text(r.str());
  const auto& m = d.manifest;
  const std::size_t fsz = m.frame_height * m.frame_width;
  if (m.mean_image.size() != fsz) throw FormatError(FormatError::Kind::content, "mean image size disagrees with frame dims");
  if (m.num_actions < 1) throw FormatError(FormatError::Kind::content, "manifest num_actions must be positive");
  for (std::size_t i = 0; i < m.num_trajectories; ++i) {
    const std::size_t n = r.u32();
    auto frames = r.raw(n * fsz);
    auto actions = r.raw(n);
    auto rewards = r.raw(n);
    for (auto a : actions) {
      if (a >= m.num_actions) throw FormatError(FormatError::Kind::content, "action index out of range");
    }
    for (auto c : rewards) {
      if (c > 2) throw FormatError(FormatError::Kind::content, "reward class out of range");
    }
    d.trajectories.push_back(make_trajectory(m.frame_height, m.frame_width, m.num_actions,
                                             {frames.begin(), frames.end()}, {actions.begin(), actions.end()},
                                             {rewards.begin(), rewards.end()}, m.mean_image));
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::content, "trailing bytes after trajectories");
  const auto marg = reward_marginal(d.trajectories);
  for (std::size_t c = 0; c < 3; ++c) {
    if (std::abs(marg[c] - m.reward_marginal[c]) > 1e-12) {
      throw FormatError(FormatError::Kind::content, "manifest reward marginal disagrees with stored rewards");
    }
  }
  return d;
}

void write_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  io::write_file(path, serialize_dataset(dataset));
}

Dataset read_dataset(const std::filesystem::path& path) { return deserialize_dataset(io::read_file(path)); }

std::vector<Tensor> Segment::history_at(std::size_t t) const {
  return {frames.begin() + static_cast<std::ptrdiff_t>(t), frames.begin() + static_cast<std::ptrdiff_t>(t + history)};
}

Segment make_segment(const Dataset& dataset, std::size_t trajectory, std::size_t base, std::size_t history,
                     std::size_t unroll_T, std::size_t lookahead_K) {
  const auto& traj = dataset.trajectories.at(trajectory);
  const std::size_t need = required_length(history, unroll_T, lookahead_K);
  if (traj.length() < need || base > traj.length() - need) {
    throw DataError("segment at " + std::to_string(base) + " of length " + std::to_string(need) +
                    " exceeds trajectory " + std::to_string(trajectory) + " (length " +
                    std::to_string(traj.length()) + ")");
  }
  Segment s;
  s.trajectory = trajectory;
  s.base = base;
  s.history = history;
  s.unroll_T = unroll_T;
  s.lookahead_K = lookahead_K;
  const std::size_t span = history + unroll_T + lookahead_K - 1;
  for (std::size_t j = 0; j < span; ++j) {
    s.frames.push_back(traj.frame(base + j));
    s.actions.push_back(traj.action_onehot(base + j));
    s.rewards.push_back(traj.reward_onehot(base + j));
  }
  return s;
}

Segment sample_segment(const Dataset& dataset, std::size_t history, std::size_t unroll_T, std::size_t lookahead_K,
                       Rng& rng) {
  const std::size_t need = required_length(history, unroll_T, lookahead_K);
  std::uint64_t total = 0;
  for (const auto& t : dataset.trajectories) {
    if (t.length() >= need) total += t.length() - need + 1;
  }
  if (total == 0) {
    throw DataError("no trajectory reaches the required length " + std::to_string(need) + " (history " +
                    std::to_string(history) + ", T " + std::to_string(unroll_T) + ", K " +
                    std::to_string(lookahead_K) + ")");
  }
  std::uint64_t pick = rng.index(total);
  for (std::size_t i = 0; i < dataset.trajectories.size(); ++i) {
    const auto& t = dataset.trajectories[i];
    if (t.length() < need) continue;
    const std::uint64_t count = t.length() - need + 1;
    if (pick < count) return make_segment(dataset, i, static_cast<std::size_t>(pick), history, unroll_T, lookahead_K);
    pick -= count;
  }
  throw std::logic_error("sample_segment: unreachable");
}

}  // namespace jointdyn::datapipe
