#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace jointdyn {

/// Malformed binary container: bad magic, truncated stream, or checksum mismatch.
class FormatError : public std::runtime_error {
 public:
  enum class Kind { magic, truncated, checksum, content };
  FormatError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  Kind kind() const { return kind_; }

 private:
  Kind kind_;
};

/// Invalid key = value configuration text.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

namespace io {

/// 64-bit FNV-1a. Any single-byte change alters the digest.
std::uint64_t fnv1a64(std::span<const std::uint8_t> bytes);

/// Append-only little-endian encoder.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void raw(std::span<const std::uint8_t> bytes) { buf_.insert(buf_.end(), bytes.begin(), bytes.end()); }
  void str(std::string_view s);  // u64 length prefix
  void magic(std::string_view m) { raw({reinterpret_cast<const std::uint8_t*>(m.data()), m.size()}); }

  /// Appends the FNV-1a digest of everything written so far.
  void checksum() { u64(fnv1a64(buf_)); }
  const std::vector<std::uint8_t>& bytes() const { return buf_; }

 private:
  std::vector<std::uint8_t> buf_;
};

/// Bounds-checked little-endian decoder. Every overrun raises FormatError(truncated).
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::uint8_t u8();
  std::uint32_t u32();
  std::uint64_t u64();
  double f64();
  std::span<const std::uint8_t> raw(std::size_t n);
  std::string str(std::size_t max_len = std::size_t{1} << 30);
  void expect_magic(std::string_view m);

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

/// Checks the trailing 8-byte digest and returns the payload before it.
std::span<const std::uint8_t> verify_checksum(std::span<const std::uint8_t> bytes, std::string_view what);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, std::string_view text);

/// Ordered key = value text. Blank lines and lines starting with '#' are
/// ignored; duplicate keys are errors.
using KeyValues = std::map<std::string, std::string>;
KeyValues parse_key_values(std::string_view text);
std::string format_key_values(const std::vector<std::pair<std::string, std::string>>& entries);

/// Exact text form of a double (hexadecimal float).
std::string exact_double(double v);
double parse_double(const std::string& key, const std::string& text);
long long parse_int(const std::string& key, const std::string& text);
std::vector<double> parse_double_list(const std::string& key, const std::string& text);

}  // namespace io
}  // namespace jointdyn
