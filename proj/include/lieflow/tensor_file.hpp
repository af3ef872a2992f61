#pragma once

// Named float64 arrays in one file:
//   "LIEFLOW1" | uint64 LE header length | JSON header | raw little-endian payload.
// The header lists every array's name, shape, byte offset and byte count and
// carries free-form attributes.

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lieflow/core.hpp"

namespace lieflow {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Wrong magic, unsupported version, or an inconsistent header.
class FormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorArray {
  std::vector<std::uint64_t> shape;
  std::vector<double> data;  // row-major

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

class TensorFile {
 public:
  static constexpr char kMagic[9] = "LIEFLOW1";
  static constexpr int kVersion = 1;

  nlohmann::json attributes = nlohmann::json::object();

  void put(const std::string& name, std::vector<std::uint64_t> shape, std::vector<double> data) {
    TensorArray a{std::move(shape), std::move(data)};
    if (a.element_count() != a.data.size())
      throw DimensionError(detail::concat("TensorFile: array '", name, "' shape does not match its data"));
    arrays_[name] = std::move(a);
  }

  void put(const std::string& name, const Matrix& m) {
    std::vector<double> d(static_cast<size_t>(m.size()));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) d[static_cast<size_t>(r * m.cols() + c)] = m(r, c);
    put(name, {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())}, std::move(d));
  }

  void put_vector(const std::string& name, const Vector& v) {
    put(name, {static_cast<std::uint64_t>(v.size())}, std::vector<double>(v.data(), v.data() + v.size()));
  }

  void put_scalar(const std::string& name, double v) { put(name, {1}, {v}); }

  /// Stack of equally-sized square matrices as a [J, d, d] array.
  void put_stack(const std::string& name, const std::vector<Matrix>& ms) {
    if (ms.empty()) throw DimensionError("TensorFile: empty matrix stack");
    const Index r = ms.front().rows(), c = ms.front().cols();
    std::vector<double> d;
    d.reserve(static_cast<size_t>(r * c) * ms.size());
    for (const auto& m : ms) {
      detail::require_dims(m.rows() == r && m.cols() == c, "TensorFile: stack entries differ in shape");
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) d.push_back(m(i, j));
    }
    put(name, {ms.size(), static_cast<std::uint64_t>(r), static_cast<std::uint64_t>(c)}, std::move(d));
  }

  bool has(const std::string& name) const { return arrays_.count(name) > 0; }

  const TensorArray& get(const std::string& name) const {
    auto it = arrays_.find(name);
    if (it == arrays_.end()) throw FormatError("TensorFile: missing array '" + name + "'");
    return it->second;
  }

  Matrix matrix(const std::string& name) const {
    const auto& a = get(name);
    if (a.shape.size() != 2) throw FormatError("TensorFile: array '" + name + "' is not 2-D");
    Matrix m(static_cast<Index>(a.shape[0]), static_cast<Index>(a.shape[1]));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = a.data[static_cast<size_t>(r * m.cols() + c)];
    return m;
  }

  Vector vector(const std::string& name) const {
    const auto& a = get(name);
    return Eigen::Map<const Vector>(a.data.data(), static_cast<Index>(a.data.size()));
  }

  double scalar(const std::string& name) const {
    const auto& a = get(name);
    if (a.data.size() != 1) throw FormatError("TensorFile: array '" + name + "' is not a scalar");
    return a.data.front();
  }

  std::vector<Matrix> stack(const std::string& name) const {
    const auto& a = get(name);
    if (a.shape.size() != 3) throw FormatError("TensorFile: array '" + name + "' is not 3-D");
    const auto r = static_cast<Index>(a.shape[1]), c = static_cast<Index>(a.shape[2]);
    std::vector<Matrix> out;
    for (std::uint64_t k = 0; k < a.shape[0]; ++k) {
      Matrix m(r, c);
      for (Index i = 0; i < r; ++i)
        for (Index j = 0; j < c; ++j) m(i, j) = a.data[static_cast<size_t>(k * r * c + i * c + j)];
      out.push_back(m);
    }
    return out;
  }

  const std::map<std::string, TensorArray>& arrays() const { return arrays_; }

 private:
  std::map<std::string, TensorArray> arrays_;
};

namespace detail {

inline std::uint64_t to_le(std::uint64_t v) {
  if constexpr (std::endian::native == std::endian::little) return v;
  std::uint64_t out = 0;
  for (int i = 0; i < 8; ++i) out |= ((v >> (8 * i)) & 0xffu) << (8 * (7 - i));
  return out;
}

}  // namespace detail

inline std::string serialize(const TensorFile& file) {
  nlohmann::json header;
  header["version"] = TensorFile::kVersion;
  header["dtype"] = "f64";
  header["byte_order"] = "little";
  header["layout"] = "row-major";
  header["attributes"] = file.attributes;
  nlohmann::json table = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& [name, a] : file.arrays()) {
    const std::uint64_t nbytes = 8 * a.data.size();
    table.push_back({{"name", name}, {"shape", a.shape}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["arrays"] = table;
  const std::string text = header.dump();
  std::string out(TensorFile::kMagic, 8);
  const std::uint64_t len = detail::to_le(text.size());
  out.append(reinterpret_cast<const char*>(&len), 8);
  out += text;
  for (const auto& [name, a] : file.arrays()) {
    for (double v : a.data) {
      std::uint64_t bits = detail::to_le(std::bit_cast<std::uint64_t>(v));
      out.append(reinterpret_cast<const char*>(&bits), 8);
    }
  }
  return out;
}

inline TensorFile deserialize(const std::string& bytes) {
  if (bytes.size() < 16 || bytes.compare(0, 8, TensorFile::kMagic) != 0)
    throw FormatError("not a tensor file (bad magic)");
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, 8);
  len = detail::to_le(len);
  if (len > bytes.size() - 16) throw FormatError("tensor file header is truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("tensor file header is not valid JSON: ") + e.what());
  }
  if (!header.contains("version") || header["version"] != TensorFile::kVersion)
    throw FormatError("unsupported tensor file version");
  if (header.value("dtype", "") != "f64" || header.value("byte_order", "") != "little" ||
      header.value("layout", "") != "row-major")
    throw FormatError("unsupported tensor file encoding");
  const size_t base = 16 + len;
  TensorFile file;
  file.attributes = header.value("attributes", nlohmann::json::object());
  for (const auto& entry : header.at("arrays")) {
    const auto shape = entry.at("shape").get<std::vector<std::uint64_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto nbytes = entry.at("nbytes").get<std::uint64_t>();
    std::uint64_t count = 1;
    for (auto s : shape) count *= s;
    if (nbytes != 8 * count) throw FormatError("tensor file array byte count does not match its shape");
    if (base + offset + nbytes > bytes.size()) throw FormatError("tensor file payload is truncated");
    std::vector<double> data(count);
    for (std::uint64_t i = 0; i < count; ++i) {
      std::uint64_t bits = 0;
      std::memcpy(&bits, bytes.data() + base + offset + 8 * i, 8);
      data[i] = std::bit_cast<double>(detail::to_le(bits));
    }
    file.put(entry.at("name").get<std::string>(), shape, std::move(data));
  }
  return file;
}

inline void write_tensor_file(const std::string& path, const TensorFile& file) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  const std::string bytes = serialize(file);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing '" + path + "'");
}

inline TensorFile read_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return deserialize(buf.str());
}

/// 17 significant digits, scientific.
inline std::string format_real(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.16e", v);
  return buf;
}

class CsvWriter {
 public:
  CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path, std::ios::trunc), path_(path) {
    if (!out_) throw IoError("cannot open '" + path + "' for writing");
    row(header);
  }

  void row(const std::vector<std::string>& cells) {
    for (size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
    out_ << '\n';
    if (!out_) throw IoError("failed writing '" + path_ + "'");
  }

 private:
  std::ofstream out_;
  std::string path_;
};

}  // namespace lieflow
