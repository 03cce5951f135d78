#include "jointdyn/netmodel.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>

#include "jointdyn/random.hpp"

namespace jointdyn::netmodel {

namespace tg = tensorgrad;

NetworkConfig NetworkConfig::desk(std::size_t num_actions) {
  NetworkConfig c;
  c.frame_height = c.frame_width = 32;
  c.history = 4;
  c.num_actions = num_actions;
  c.encoder_convs = {{16, 6, 2, 0}, {32, 4, 2, 0}};
  c.latent_dim = 256;
  return c;
}

NetworkConfig NetworkConfig::test16(std::size_t num_actions) {
  NetworkConfig c;
  c.frame_height = c.frame_width = 16;
  c.history = 4;
  c.num_actions = num_actions;
  c.encoder_convs = {{4, 4, 2, 0}, {8, 3, 2, 0}};
  c.latent_dim = 32;
  return c;
}

NetworkConfig NetworkConfig::paper(std::size_t num_actions) {
  NetworkConfig c;
  c.frame_height = c.frame_width = 84;
  c.history = 4;
  c.num_actions = num_actions;
  c.encoder_convs = {{64, 8, 2, 0}, {128, 6, 2, 0}, {128, 6, 2, 0}, {128, 4, 2, 0}};
  c.latent_dim = 2048;
  return c;
}

bool NetworkConfig::operator==(const NetworkConfig& o) const {
  if (encoder_convs.size() != o.encoder_convs.size()) return false;
  for (std::size_t i = 0; i < encoder_convs.size(); ++i) {
    const auto& a = encoder_convs[i];
    const auto& b = o.encoder_convs[i];
    if (a.out_channels != b.out_channels || a.kernel != b.kernel || a.stride != b.stride ||
        a.padding != b.padding) {
      return false;
    }
  }
  return frame_height == o.frame_height && frame_width == o.frame_width && history == o.history &&
         num_actions == o.num_actions && latent_dim == o.latent_dim;
}

namespace {

struct Extent {
  std::size_t h, w;
};

// Spatial extents at every encoder level; level 0 is the input frame.
std::vector<Extent> encoder_extents(const NetworkConfig& c) {
  std::vector<Extent> out{{c.frame_height, c.frame_width}};
  for (const auto& l : c.encoder_convs) {
    const tg::Conv2dGeometry g{l.stride, l.padding, 0};
    out.push_back({tg::conv_output_extent(out.back().h, l.kernel, g),
                   tg::conv_output_extent(out.back().w, l.kernel, g)});
    if (out.back().h == 0 || out.back().w == 0) {
      throw std::invalid_argument("encoder conv " + std::to_string(out.size() - 2) +
                                  " collapses the spatial extent");
    }
  }
  return out;
}

// Output padding the mirrored deconv needs to restore `target` from `src`.
std::size_t mirror_output_padding(const ConvLayerSpec& l, Extent src, Extent target) {
  const tg::Conv2dGeometry g{l.stride, l.padding, 0};
  const std::size_t h = tg::deconv_output_extent(src.h, l.kernel, g);
  const std::size_t w = tg::deconv_output_extent(src.w, l.kernel, g);
  if (h > target.h || w > target.w || target.h - h != target.w - w || target.h - h >= l.stride) {
    throw std::invalid_argument("decoder cannot mirror encoder layer with kernel " +
                                std::to_string(l.kernel) + " stride " + std::to_string(l.stride));
  }
  return target.h - h;
}

std::size_t channels_at(const NetworkConfig& c, std::size_t level) {
  return level == 0 ? c.history : c.encoder_convs[level - 1].out_channels;
}

// Uniform weights from a deterministic stream.
void fill_uniform(Tensor& t, Rng& rng, double bound) {
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
}

double glorot_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

DenseWeights make_dense(std::size_t out, std::size_t in, bool with_bias, Rng& rng, std::optional<double> bound) {
  DenseWeights d;
  d.weights = Tensor({out, in});
  fill_uniform(d.weights, rng, bound.value_or(glorot_bound(in, out)));
  if (with_bias) d.bias = Tensor({out}, 0.0);
  return d;
}

ConvWeights make_conv(std::size_t d0, std::size_t d1, std::size_t k, tg::Conv2dGeometry g, std::size_t bias_len,
                      Rng& rng) {
  ConvWeights c;
  c.kernels = Tensor({d0, d1, k, k});
  fill_uniform(c.kernels, rng, glorot_bound(d1 * k * k, d0 * k * k));
  c.bias = Tensor({bias_len}, 0.0);
  c.geometry = g;
  return c;
}

Tower make_tower(const NetworkConfig& c, bool with_decoder, bool with_reward_head, Rng& rng) {
  const auto ext = encoder_extents(c);
  Tower t;
  for (std::size_t i = 0; i < c.encoder_convs.size(); ++i) {
    const auto& l = c.encoder_convs[i];
    t.encoder_convs.push_back(
        make_conv(l.out_channels, channels_at(c, i), l.kernel, {l.stride, l.padding, 0}, l.out_channels, rng));
  }
  const std::size_t top = c.encoder_convs.size();
  const std::size_t flat = channels_at(c, top) * ext[top].h * ext[top].w;
  t.encoder_fc = make_dense(c.latent_dim, flat, true, rng, std::nullopt);
  t.encoding_factor = make_dense(c.latent_dim, c.latent_dim, false, rng, 1.0);
  t.action_factor = make_dense(c.latent_dim, c.num_actions, false, rng, 0.1);
  t.transform_out = make_dense(c.latent_dim, c.latent_dim, true, rng, std::nullopt);
  if (with_decoder) {
    DecoderWeights dec;
    dec.fc = make_dense(flat, c.latent_dim, true, rng, std::nullopt);
    dec.reshape_channels = channels_at(c, top);
    dec.reshape_height = ext[top].h;
    dec.reshape_width = ext[top].w;
    for (std::size_t level = top; level > 0; --level) {
      const auto& l = c.encoder_convs[level - 1];
      const std::size_t out_ch = level == 1 ? 1 : channels_at(c, level - 1);
      const std::size_t op = mirror_output_padding(l, ext[level], ext[level - 1]);
      dec.deconvs.push_back(make_conv(channels_at(c, level), out_ch, l.kernel, {l.stride, l.padding, op}, out_ch, rng));
    }
    t.decoder = std::move(dec);
  }
  if (with_reward_head) t.reward_head = make_dense(kRewardClasses, c.latent_dim, true, rng, std::nullopt);
  return t;
}

void append_dense(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const DenseWeights& d) {
  out.emplace_back(name + ".weights", d.weights);
  if (d.bias) out.emplace_back(name + ".bias", *d.bias);
}

void append_conv(std::vector<std::pair<std::string, Tensor>>& out, const std::string& name, const ConvWeights& c) {
  out.emplace_back(name + ".kernels", c.kernels);
  out.emplace_back(name + ".bias", c.bias);
}

bool is_reward_only(const std::string& name) { return name.find("reward_head.") != std::string::npos; }

}  // namespace

void NetworkConfig::validate() const {
  if (frame_height == 0 || frame_width == 0) throw std::invalid_argument("frame dimensions must be positive");
  if (history < 1) throw std::invalid_argument("history must be >= 1");
  if (num_actions < 2) throw std::invalid_argument("num_actions must be >= 2");
  if (latent_dim < 1) throw std::invalid_argument("latent_dim must be positive");
  if (encoder_convs.empty()) throw std::invalid_argument("encoder needs at least one conv layer");
  for (const auto& l : encoder_convs) {
    if (l.out_channels == 0 || l.kernel == 0 || l.stride == 0) {
      throw std::invalid_argument("encoder conv layers need positive channels, kernel and stride");
    }
  }
  const auto ext = encoder_extents(*this);
  for (std::size_t level = encoder_convs.size(); level > 0; --level) {
    mirror_output_padding(encoder_convs[level - 1], ext[level], ext[level - 1]);
  }
}

std::string variant_name(ModelVariant v) {
  switch (v) {
    case ModelVariant::joint: return "joint";
    case ModelVariant::decoupled_objective: return "decoupled-obj";
    case ModelVariant::decoupled_architecture: return "decoupled-arch";
  }
  return "joint";
}

ModelVariant parse_variant(const std::string& name) {
  if (name == "joint") return ModelVariant::joint;
  if (name == "decoupled-obj" || name == "decoupled_objective") return ModelVariant::decoupled_objective;
  if (name == "decoupled-arch" || name == "decoupled_architecture") return ModelVariant::decoupled_architecture;
  throw std::invalid_argument("unknown variant '" + name + "'");
}

std::vector<std::pair<std::string, Tensor>> Tower::named_parameters(const std::string& prefix) const {
  std::vector<std::pair<std::string, Tensor>> out;
  for (std::size_t i = 0; i < encoder_convs.size(); ++i) {
    append_conv(out, prefix + "encoder.conv" + std::to_string(i), encoder_convs[i]);
  }
  append_dense(out, prefix + "encoder.fc", encoder_fc);
  append_dense(out, prefix + "transform.encoding_factor", encoding_factor);
  append_dense(out, prefix + "transform.action_factor", action_factor);
  append_dense(out, prefix + "transform.out", transform_out);
  if (decoder) {
    append_dense(out, prefix + "decoder.fc", decoder->fc);
    for (std::size_t i = 0; i < decoder->deconvs.size(); ++i) {
      append_conv(out, prefix + "decoder.deconv" + std::to_string(i), decoder->deconvs[i]);
    }
  }
  if (reward_head) append_dense(out, prefix + "reward_head", *reward_head);
  return out;
}

std::vector<std::pair<std::string, Tensor>> JointModelParams::named_parameters() const {
  if (!reward_tower) return primary.named_parameters("");
  auto out = primary.named_parameters("frame_net.");
  auto rw = reward_tower->named_parameters("reward_net.");
  out.insert(out.end(), rw.begin(), rw.end());
  return out;
}

std::vector<Tensor> JointModelParams::parameters() const {
  std::vector<Tensor> out;
  for (auto& [name, t] : named_parameters()) out.push_back(t);
  return out;
}

std::vector<Tensor> JointModelParams::frame_parameters() const {
  std::vector<Tensor> out;
  if (reward_tower) {
    for (auto& [name, t] : primary.named_parameters("")) out.push_back(t);
    return out;
  }
  for (auto& [name, t] : named_parameters()) {
    if (!is_reward_only(name)) out.push_back(t);
  }
  return out;
}

JointModelParams init_weights(const NetworkConfig& config, std::uint64_t seed, ModelVariant variant) {
  config.validate();
  Rng rng(seed);
  JointModelParams p;
  p.config = config;
  p.variant = variant;
  p.seed = seed;
  if (variant == ModelVariant::decoupled_architecture) {
    p.primary = make_tower(config, true, false, rng);
    p.reward_tower = make_tower(config, false, true, rng);
  } else {
    p.primary = make_tower(config, true, true, rng);
  }
  return p;
}

Tensor encode(Tape* tape, const Tower& tower, const NetworkConfig& config, const Tensor& frames) {
  const tg::Shape expected{config.history, config.frame_height, config.frame_width};
  if (frames.shape() != expected) {
    throw DimensionError("encode: frames must be " + tg::shape_string(expected) + ", got " +
                         tg::shape_string(frames.shape()));
  }
  Tensor x = frames;
  for (const auto& c : tower.encoder_convs) x = tg::relu(tape, tg::conv2d(tape, x, c.kernels, c.bias, c.geometry));
  x = tg::reshape(tape, x, {x.size()});
  return tg::relu(tape, tg::dense(tape, x, tower.encoder_fc.weights, tower.encoder_fc.bias));
}

Tensor transform(Tape* tape, const Tower& tower, const Tensor& h_enc, const Tensor& action) {
  const std::size_t n = tower.action_factor.weights.dim(1);
  if (action.rank() != 1 || action.dim(0) != n) {
    throw DimensionError("transform: action must have shape [" + std::to_string(n) + "], got " +
                         tg::shape_string(action.shape()));
  }
  double ones = 0.0;
  for (double v : action.values()) {
    if (v != 0.0 && v != 1.0) throw std::invalid_argument("transform: action vector is not one-hot");
    ones += v;
  }
  if (ones > 1.0) throw std::invalid_argument("transform: action vector has more than one hot entry");

  const Tensor enc = tg::dense(tape, h_enc, tower.encoding_factor.weights, std::nullopt);
  const Tensor act = tg::dense(tape, action, tower.action_factor.weights, std::nullopt);
  const Tensor joint = tg::hadamard(tape, enc, act);
  return tg::dense(tape, joint, tower.transform_out.weights, tower.transform_out.bias);
}

Tensor decode_frame(Tape* tape, const Tower& tower, const Tensor& h_dec, Mode mode) {
  if (!tower.decoder) throw std::logic_error("decode_frame: tower has no decoder");
  const auto& dec = *tower.decoder;
  Tensor x = tg::relu(tape, tg::dense(tape, h_dec, dec.fc.weights, dec.fc.bias));
  x = tg::reshape(tape, x, {dec.reshape_channels, dec.reshape_height, dec.reshape_width});
  for (std::size_t i = 0; i < dec.deconvs.size(); ++i) {
    const auto& d = dec.deconvs[i];
    x = tg::deconv2d(tape, x, d.kernels, d.bias, d.geometry);
    if (i + 1 < dec.deconvs.size()) x = tg::relu(tape, x);
  }
  if (mode == Mode::eval) x = tg::clip(tape, x, -1.0, 1.0);
  return x;
}

Tensor predict_reward(Tape* tape, const Tower& tower, const Tensor& h_dec) {
  if (!tower.reward_head) throw std::logic_error("predict_reward: tower has no reward head");
  return tg::softmax(tape, tg::dense(tape, h_dec, tower.reward_head->weights, tower.reward_head->bias));
}

StepOutput forward_step(Tape* tape, const JointModelParams& params, const Tensor& frames, const Tensor& action,
                        Mode mode) {
  const Tower& frame_tower = params.primary;
  const Tensor h_enc = encode(tape, frame_tower, params.config, frames);
  const Tensor h_dec = transform(tape, frame_tower, h_enc, action);
  StepOutput out;
  out.frame = decode_frame(tape, frame_tower, h_dec, mode);
  switch (params.variant) {
    case ModelVariant::joint:
      out.reward_probs = predict_reward(tape, frame_tower, h_dec);
      break;
    case ModelVariant::decoupled_objective:
      out.reward_probs = predict_reward(tape, frame_tower, tg::stop_gradient(h_dec));
      break;
    case ModelVariant::decoupled_architecture: {
      const Tower& rt = *params.reward_tower;
      const Tensor r_enc = encode(tape, rt, params.config, tg::stop_gradient(frames));
      out.reward_probs = predict_reward(tape, rt, transform(tape, rt, r_enc, action));
      break;
    }
  }
  return out;
}

std::vector<StepOutput> rollout(Tape* tape, const JointModelParams& params, std::vector<Tensor> history,
                                const std::vector<Tensor>& actions, const RolloutOptions& options) {
  const auto& c = params.config;
  if (history.size() != c.history) {
    throw DimensionError("rollout: history must hold " + std::to_string(c.history) + " frames, got " +
                         std::to_string(history.size()));
  }
  if (actions.empty()) throw std::invalid_argument("rollout: needs at least one action");
  std::vector<StepOutput> out;
  out.reserve(actions.size());
  for (const auto& action : actions) {
    const Tensor input = tg::concat0(tape, history);
    StepOutput step = forward_step(tape, params, input, action, options.mode);
    Tensor feed = step.frame;
    if (options.mode == Mode::train && options.clip_feedback_in_training) feed = tg::clip(tape, feed, -1.0, 1.0);
    history.erase(history.begin());
    history.push_back(feed);
    out.push_back(std::move(step));
  }
  return out;
}

std::size_t count_parameters(const JointModelParams& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params.named_parameters()) n += t.size();
  return n;
}

std::size_t count_parameters(const NetworkConfig& c, ModelVariant variant) {
  c.validate();
  const auto ext = encoder_extents(c);
  std::size_t encoder = 0;
  for (std::size_t i = 0; i < c.encoder_convs.size(); ++i) {
    const auto& l = c.encoder_convs[i];
    encoder += l.out_channels * channels_at(c, i) * l.kernel * l.kernel + l.out_channels;
  }
  const std::size_t top = c.encoder_convs.size();
  const std::size_t flat = channels_at(c, top) * ext[top].h * ext[top].w;
  encoder += flat * c.latent_dim + c.latent_dim;
  // Two bias-free factors plus the biased output projection.
  const std::size_t transform = c.latent_dim * c.latent_dim + c.latent_dim * c.num_actions +
                                c.latent_dim * c.latent_dim + c.latent_dim;
  std::size_t decoder = c.latent_dim * flat + flat;
  for (std::size_t level = top; level > 0; --level) {
    const auto& l = c.encoder_convs[level - 1];
    const std::size_t out_ch = level == 1 ? 1 : channels_at(c, level - 1);
    decoder += channels_at(c, level) * out_ch * l.kernel * l.kernel + out_ch;
  }
  const std::size_t head = kRewardClasses * c.latent_dim + kRewardClasses;
  if (variant == ModelVariant::decoupled_architecture) {
    return (encoder + transform + decoder) + (encoder + transform + head);
  }
  return encoder + transform + decoder + head;
}

Tensor one_hot(std::size_t index, std::size_t width) {
  if (index >= width) {
    throw std::out_of_range("one_hot: index " + std::to_string(index) + " out of range for width " +
                            std::to_string(width));
  }
  Tensor t({width}, 0.0);
  t[index] = 1.0;
  return t;
}

int predicted_reward_value(const Tensor& reward_probs) {
  const auto v = reward_probs.values();
  const auto cls = static_cast<std::size_t>(std::distance(v.begin(), std::max_element(v.begin(), v.end())));
  return reward_value_of_class(cls);
}

}  // namespace jointdyn::netmodel
