#include "limcast/binary_io.hpp"

#include "limcast/error.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>

namespace limcast::io {

namespace {

template <typename T>
void put_le(std::vector<std::uint8_t>& buf, T v) {
  static_assert(std::is_trivially_copyable_v<T>);
  std::array<std::uint8_t, sizeof(T)> raw{};
  std::memcpy(raw.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(raw.begin(), raw.end());
  }
  buf.insert(buf.end(), raw.begin(), raw.end());
}

template <typename T>
T get_le(const std::uint8_t* p) {
  std::array<std::uint8_t, sizeof(T)> raw{};
  std::memcpy(raw.data(), p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    std::reverse(raw.begin(), raw.end());
  }
  T v;
  std::memcpy(&v, raw.data(), sizeof(T));
  return v;
}

}  // namespace

void ByteWriter::u32(std::uint32_t v) { put_le(buf_, v); }
void ByteWriter::u64(std::uint64_t v) { put_le(buf_, v); }
void ByteWriter::f64(double v) { put_le(buf_, v); }

void ByteWriter::bytes(std::span<const std::uint8_t> data) {
  buf_.insert(buf_.end(), data.begin(), data.end());
}

void ByteWriter::tag(std::string_view four_cc) {
  if (four_cc.size() != 4) throw ConfigError("section tag must be 4 bytes: " + std::string(four_cc));
  for (char c : four_cc) buf_.push_back(static_cast<std::uint8_t>(c));
}

void ByteWriter::str(std::string_view s) {
  u64(s.size());
  for (char c : s) buf_.push_back(static_cast<std::uint8_t>(c));
}

void ByteWriter::f64_array(std::span<const double> values) {
  for (double v : values) f64(v);
}

void ByteWriter::matrix(const Eigen::MatrixXd& m) {
  u32(static_cast<std::uint32_t>(m.rows()));
  u32(static_cast<std::uint32_t>(m.cols()));
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) f64(m(i, j));
}

void ByteReader::require(std::size_t n, std::string_view field) const {
  if (pos_ + n > data_.size()) {
    throw DataError(std::string(field), "truncated " + context_ + " (need " + std::to_string(n) +
                                            " bytes at offset " + std::to_string(pos_) + ")");
  }
}

std::uint8_t ByteReader::u8(std::string_view field) {
  require(1, field);
  return data_[pos_++];
}

std::uint32_t ByteReader::u32(std::string_view field) {
  require(4, field);
  auto v = get_le<std::uint32_t>(data_.data() + pos_);
  pos_ += 4;
  return v;
}

std::uint64_t ByteReader::u64(std::string_view field) {
  require(8, field);
  auto v = get_le<std::uint64_t>(data_.data() + pos_);
  pos_ += 8;
  return v;
}

double ByteReader::f64(std::string_view field) {
  require(8, field);
  auto v = get_le<double>(data_.data() + pos_);
  pos_ += 8;
  return v;
}

std::string ByteReader::tag(std::string_view field) {
  require(4, field);
  std::string t(reinterpret_cast<const char*>(data_.data() + pos_), 4);
  pos_ += 4;
  return t;
}

std::string ByteReader::str(std::string_view field) {
  auto n = u64(field);
  require(n, field);
  std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
  pos_ += n;
  return s;
}

std::vector<double> ByteReader::f64_array(std::size_t n, std::string_view field) {
  require(n * 8, field);
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = get_le<double>(data_.data() + pos_ + 8 * i);
  pos_ += 8 * n;
  return out;
}

Eigen::MatrixXd ByteReader::matrix(std::string_view field) {
  auto rows = u32(field);
  auto cols = u32(field);
  auto flat = f64_array(std::size_t(rows) * cols, field);
  Eigen::MatrixXd m(rows, cols);
  for (std::uint32_t i = 0; i < rows; ++i)
    for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = flat[std::size_t(i) * cols + j];
  return m;
}

std::span<const std::uint8_t> ByteReader::bytes(std::size_t n, std::string_view field) {
  require(n, field);
  auto s = data_.subspan(pos_, n);
  pos_ += n;
  return s;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError(path.string(), "cannot open file");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  // Write-then-rename so concurrent readers never observe a partial file.
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError(path.string(), "cannot open file for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError(path.string(), "write failed");
  }
  std::filesystem::rename(tmp, path);
}

std::vector<std::uint8_t> encode_sections(const std::vector<Section>& sections) {
  ByteWriter w;
  for (const auto& s : sections) {
    w.tag(s.tag);
    w.u32(s.version);
    w.u64(s.payload.size());
    w.bytes(s.payload);
  }
  return w.take();
}

std::vector<Section> decode_sections(std::span<const std::uint8_t> bytes, const std::string& context) {
  ByteReader r(bytes, context);
  std::vector<Section> out;
  while (r.remaining() > 0) {
    Section s;
    s.tag = r.tag("section tag");
    s.version = r.u32("section version");
    auto n = r.u64("section length");
    auto payload = r.bytes(n, s.tag + " payload");
    s.payload.assign(payload.begin(), payload.end());
    out.push_back(std::move(s));
  }
  return out;
}

void write_sections(const std::filesystem::path& path, const std::vector<Section>& sections) {
  write_file(path, encode_sections(sections));
}

std::vector<Section> read_sections(const std::filesystem::path& path) {
  return decode_sections(read_file(path), path.string());
}

const Section& find_section(const std::vector<Section>& sections, std::string_view tag) {
  for (const auto& s : sections)
    if (s.tag == tag) return s;
  throw DataError(std::string(tag), "section not found in container");
}

}  // namespace limcast::io
