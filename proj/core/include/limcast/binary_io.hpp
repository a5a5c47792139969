#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace limcast::io {

/// Little-endian byte sink. All multi-byte values are written LE regardless
/// of host order.
class ByteWriter {
 public:
  void u8(std::uint8_t v) { buf_.push_back(v); }
  void u32(std::uint32_t v);
  void u64(std::uint64_t v);
  void f64(double v);
  void bytes(std::span<const std::uint8_t> data);
  void tag(std::string_view four_cc);
  /// u64 length followed by raw UTF-8 bytes.
  void str(std::string_view s);
  void f64_array(std::span<const double> values);
  /// u32 rows, u32 cols, then row-major f64 values.
  void matrix(const Eigen::MatrixXd& m);

  const std::vector<std::uint8_t>& buffer() const noexcept { return buf_; }
  std::vector<std::uint8_t> take() { return std::move(buf_); }

 private:
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> data, std::string context = "input")
      : data_(data), context_(std::move(context)) {}

  std::uint8_t u8(std::string_view field);
  std::uint32_t u32(std::string_view field);
  std::uint64_t u64(std::string_view field);
  double f64(std::string_view field);
  std::string tag(std::string_view field);
  std::string str(std::string_view field);
  std::vector<double> f64_array(std::size_t n, std::string_view field);
  Eigen::MatrixXd matrix(std::string_view field);
  std::span<const std::uint8_t> bytes(std::size_t n, std::string_view field);

  std::size_t remaining() const noexcept { return data_.size() - pos_; }
  std::size_t position() const noexcept { return pos_; }

 private:
  void require(std::size_t n, std::string_view field) const;

  std::span<const std::uint8_t> data_;
  std::size_t pos_ = 0;
  std::string context_;
};

/// A tagged section: 4-byte tag, u32 version, u64 payload length, payload.
struct Section {
  std::string tag;
  std::uint32_t version = 1;
  std::vector<std::uint8_t> payload;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

/// Container files are a plain concatenation of sections.
void write_sections(const std::filesystem::path& path, const std::vector<Section>& sections);
std::vector<Section> read_sections(const std::filesystem::path& path);
std::vector<std::uint8_t> encode_sections(const std::vector<Section>& sections);
std::vector<Section> decode_sections(std::span<const std::uint8_t> bytes, const std::string& context);

/// First section carrying `tag`; throws DataError when absent.
const Section& find_section(const std::vector<Section>& sections, std::string_view tag);

}  // namespace limcast::io
