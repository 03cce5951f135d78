#include <sstream>

#include "jointdyn/io.hpp"
#include "jointdyn/netmodel.hpp"

namespace jointdyn::netmodel {

namespace {

constexpr std::string_view kMagic = "JDYN1";
constexpr std::uint32_t kFormatVersion = 1;

std::string conv_list_text(const std::vector<ConvLayerSpec>& convs) {
  std::string out;
  for (std::size_t i = 0; i < convs.size(); ++i) {
    const auto& l = convs[i];
    if (i) out += ",";
    out += std::to_string(l.out_channels) + ":" + std::to_string(l.kernel) + ":" + std::to_string(l.stride) + ":" +
           std::to_string(l.padding);
  }
  return out;
}

std::vector<ConvLayerSpec> parse_conv_list(const std::string& text) {
  std::vector<ConvLayerSpec> out;
  std::istringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    ConvLayerSpec l;
    char c1 = 0, c2 = 0, c3 = 0;
    std::istringstream is(item);
    if (!(is >> l.out_channels >> c1 >> l.kernel >> c2 >> l.stride >> c3 >> l.padding) || c1 != ':' || c2 != ':' ||
        c3 != ':') {
      throw ConfigError("encoder_convs: malformed layer '" + item + "'");
    }
    out.push_back(l);
  }
  return out;
}

std::size_t as_size(const io::KeyValues& kv, const std::string& key) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(FormatError::Kind::content, "checkpoint config missing '" + key + "'");
  const long long v = io::parse_int(key, it->second);
  if (v < 0) throw FormatError(FormatError::Kind::content, "checkpoint config '" + key + "' is negative");
  return static_cast<std::size_t>(v);
}

}  // namespace

std::string config_text(const NetworkConfig& c, ModelVariant variant) {
  return io::format_key_values({
      {"frame_height", std::to_string(c.frame_height)},
      {"frame_width", std::to_string(c.frame_width)},
      {"history", std::to_string(c.history)},
      {"num_actions", std::to_string(c.num_actions)},
      {"encoder_convs", conv_list_text(c.encoder_convs)},
      {"latent_dim", std::to_string(c.latent_dim)},
      {"variant", variant_name(variant)},
  });
}

std::vector<std::uint8_t> serialize_checkpoint(const JointModelParams& params) {
  io::ByteWriter w;
  w.magic(kMagic);
  w.u32(kFormatVersion);
  w.str(config_text(params.config, params.variant));
  w.u64(params.seed);
  const auto named = params.named_parameters();
  w.u32(static_cast<std::uint32_t>(named.size()));
  for (const auto& [name, t] : named) {
    w.str(name);
    w.u32(static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) w.u64(d);
    for (double v : t.values()) w.f64(v);
  }
  w.checksum();
  return w.bytes();
}

JointModelParams deserialize_checkpoint(std::span<const std::uint8_t> bytes) {
  io::ByteReader magic_reader(bytes);
  magic_reader.expect_magic(kMagic);
  io::ByteReader r(io::verify_checksum(bytes, "checkpoint"));
  r.expect_magic(kMagic);
  if (const auto v = r.u32(); v != kFormatVersion) {
    throw FormatError(FormatError::Kind::content, "unsupported checkpoint version " + std::to_string(v));
  }
  const io::KeyValues kv = io::parse_key_values(r.str());
  for (const auto& [k, v] : kv) {
    if (k != "frame_height" && k != "frame_width" && k != "history" && k != "num_actions" && k != "encoder_convs" &&
        k != "latent_dim" && k != "variant") {
      throw FormatError(FormatError::Kind::content, "checkpoint config has unknown key '" + k + "'");
    }
  }
  NetworkConfig c;
  c.frame_height = as_size(kv, "frame_height");
  c.frame_width = as_size(kv, "frame_width");
  c.history = as_size(kv, "history");
  c.num_actions = as_size(kv, "num_actions");
  c.latent_dim = as_size(kv, "latent_dim");
  if (!kv.count("encoder_convs") || !kv.count("variant")) {
    throw FormatError(FormatError::Kind::content, "checkpoint config incomplete");
  }
  c.encoder_convs = parse_conv_list(kv.at("encoder_convs"));
  const ModelVariant variant = parse_variant(kv.at("variant"));
  const std::uint64_t seed = r.u64();

  JointModelParams params = init_weights(c, seed, variant);
  auto named = params.named_parameters();
  const std::uint32_t count = r.u32();
  if (count != named.size()) {
    throw FormatError(FormatError::Kind::content, "checkpoint holds " + std::to_string(count) +
                                                      " blobs, config implies " + std::to_string(named.size()));
  }
  for (auto& [name, t] : named) {
    const std::string got = r.str(4096);
    if (got != name) {
      throw FormatError(FormatError::Kind::content, "checkpoint blob '" + got + "' where '" + name + "' expected");
    }
    const std::uint32_t rank = r.u32();
    tensorgrad::Shape shape(rank);
    for (auto& d : shape) d = static_cast<std::size_t>(r.u64());
    if (shape != t.shape()) {
      throw FormatError(FormatError::Kind::content, "checkpoint blob '" + name + "' has shape " +
                                                        tensorgrad::shape_string(shape));
    }
    for (double& v : t.values()) v = r.f64();
  }
  if (r.remaining() != 0) throw FormatError(FormatError::Kind::content, "trailing bytes in checkpoint");
  return params;
}

void save_checkpoint(const std::filesystem::path& path, const JointModelParams& params) {
  io::write_file(path, serialize_checkpoint(params));
}

JointModelParams load_checkpoint(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  return deserialize_checkpoint(bytes);
}

}  // namespace jointdyn::netmodel
