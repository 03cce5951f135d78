#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "jointdyn/random.hpp"
#include "jointdyn/tensor.hpp"

namespace jointdyn::datapipe {

using tensorgrad::Tensor;

/// Raised when data cannot satisfy a request (e.g. trajectories too short).
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Per-emulator-step stream: frames[j] is observed, actions[j] is taken
/// there and rewards[j] is the raw score it earns.
struct RawEpisode {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_actions = 0;
  std::vector<std::vector<std::uint8_t>> frames;
  std::vector<std::uint8_t> actions;
  std::vector<int> rewards;

  std::size_t length() const { return frames.size(); }
  void validate() const;
};

/// Agent-step stream after frame skipping. reward_classes[n] is the clipped
/// reward earned by actions[n] over its skip window.
struct DecimatedEpisode {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_actions = 0;
  std::vector<std::vector<std::uint8_t>> frames;
  std::vector<std::uint8_t> actions;
  std::vector<int> reward_sums;
  std::vector<std::uint8_t> reward_classes;

  std::size_t length() const { return frames.size(); }
};

/// Stored trajectory. Raw 8-bit frames are kept for bit-exact storage;
/// `frames` holds raw/255 - mean, row-major [N,H,W].
struct Trajectory {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t num_actions = 0;
  std::vector<std::uint8_t> raw_frames;
  std::vector<double> frames;
  std::vector<std::uint8_t> actions;
  std::vector<std::uint8_t> reward_classes;

  std::size_t length() const { return actions.size(); }
  std::size_t frame_size() const { return height * width; }
  std::span<const double> frame_values(std::size_t n) const;
  Tensor frame(std::size_t n) const;  // [1,H,W]
  Tensor action_onehot(std::size_t n) const;
  Tensor reward_onehot(std::size_t n) const;
  int reward_value(std::size_t n) const { return static_cast<int>(reward_classes.at(n)) - 1; }
};

struct DatasetManifest {
  std::string game;
  std::string split = "train";
  std::uint64_t seed = 0;
  std::size_t num_trajectories = 0;
  std::size_t frame_height = 0;
  std::size_t frame_width = 0;
  std::size_t num_actions = 0;
  std::vector<double> mean_image;                  // per-pixel, from the training split
  std::array<double, 3> reward_marginal{0, 1, 0};  // classes (-1, 0, +1)
  std::map<std::string, std::string> env;          // generator parameters

  std::string to_text() const;
  static DatasetManifest from_text(const std::string& text);
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Trajectory> trajectories;

  std::size_t total_steps() const;
};

/// raw/255 - mean, elementwise.
std::vector<double> normalize_frames(std::span<const std::uint8_t> raw, std::span<const double> mean_image);
/// Inverse of normalize_frames, rounding to the nearest 8-bit value.
std::vector<std::uint8_t> denormalize_frames(std::span<const double> normalized, std::span<const double> mean_image);

/// Sign rule: negative -> class 0 (-1), zero -> class 1 (0), positive -> class 2 (+1).
std::uint8_t clip_reward(long long raw_sum);

/// Keeps every `skip`-th frame with its action; rewards are summed over the
/// window of `skip` emulator steps that starts there, then clipped. A
/// trailing partial window is dropped.
DecimatedEpisode skip_and_accumulate(const RawEpisode& raw, std::size_t skip = 4);

std::vector<Tensor> encode_onehots(std::span<const std::size_t> indices, std::size_t width);
std::size_t decode_onehot(const Tensor& onehot);

/// Box-filter resampling, each output pixel the area-weighted mean of the
/// source pixels it covers.
std::vector<std::uint8_t> downsample_area(std::span<const std::uint8_t> src, std::size_t src_h, std::size_t src_w,
                                          std::size_t dst_h, std::size_t dst_w);

std::vector<double> compute_mean_image(const std::vector<DecimatedEpisode>& episodes);
std::array<double, 3> reward_marginal(const std::vector<Trajectory>& trajectories);

Dataset build_dataset(const std::vector<DecimatedEpisode>& episodes, std::span<const double> mean_image,
                      const std::string& game, const std::string& split, std::uint64_t seed);

/// Disjoint, seed-reproducible trajectory-level split. Returns (train, test).
std::pair<std::vector<DecimatedEpisode>, std::vector<DecimatedEpisode>> split_train_test(
    std::vector<DecimatedEpisode> episodes, double test_fraction, std::uint64_t seed);

/// "AJVR1" | u64 length + manifest text | per trajectory: u32 N, N*H*W frame
/// bytes, N action bytes, N reward-class bytes | u64 FNV-1a checksum.
std::vector<std::uint8_t> serialize_dataset(const Dataset& dataset);
Dataset deserialize_dataset(std::span<const std::uint8_t> bytes);
void write_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset read_dataset(const std::filesystem::path& path);

/// Contiguous window of a trajectory covering history + T offsets + K steps.
/// Local index j refers to trajectory step base + j.
struct Segment {
  std::size_t trajectory = 0;
  std::size_t base = 0;
  std::size_t history = 0, unroll_T = 0, lookahead_K = 0;
  std::vector<Tensor> frames;
  std::vector<Tensor> actions;
  std::vector<Tensor> rewards;

  /// Input frames for unroll offset t.
  std::vector<Tensor> history_at(std::size_t t) const;
  /// Action, target frame and target reward for look-ahead step k in 1..K.
  const Tensor& action(std::size_t t, std::size_t k) const { return actions.at(t + history - 1 + k - 1); }
  const Tensor& target_frame(std::size_t t, std::size_t k) const { return frames.at(t + history - 1 + k); }
  const Tensor& target_reward(std::size_t t, std::size_t k) const { return rewards.at(t + history - 1 + k - 1); }
};

inline std::size_t required_length(std::size_t history, std::size_t unroll_T, std::size_t lookahead_K) {
  return history + unroll_T + lookahead_K;
}

Segment make_segment(const Dataset& dataset, std::size_t trajectory, std::size_t base, std::size_t history,
                     std::size_t unroll_T, std::size_t lookahead_K);

/// Uniform over all valid (trajectory, base) pairs, with replacement.
Segment sample_segment(const Dataset& dataset, std::size_t history, std::size_t unroll_T, std::size_t lookahead_K,
                       Rng& rng);

}  // namespace jointdyn::datapipe
