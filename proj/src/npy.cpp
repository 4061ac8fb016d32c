#include "broadcam/npy.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>

#include "broadcam/errors.hpp"

namespace broadcam::npy {
namespace {

static_assert(std::endian::native == std::endian::little,
              "npy I/O assumes a little-endian host");

constexpr char kMagic[] = "\x93NUMPY";

std::string read_all(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Pulls the value following `'key':` out of the header dict.
std::string dict_value(const std::string& header, const std::string& key,
                       const std::filesystem::path& path) {
  const std::string needle = "'" + key + "'";
  auto pos = header.find(needle);
  if (pos == std::string::npos) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": header lacks " + key);
  }
  pos = header.find(':', pos + needle.size());
  if (pos == std::string::npos) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": malformed header");
  }
  ++pos;
  while (pos < header.size() && header[pos] == ' ') ++pos;
  std::size_t end = pos;
  if (header[pos] == '\'') {
    end = header.find('\'', pos + 1);
    return header.substr(pos + 1, end - pos - 1);
  }
  if (header[pos] == '(') {
    end = header.find(')', pos);
    return header.substr(pos, end - pos + 1);
  }
  while (end < header.size() && header[end] != ',' && header[end] != '}') ++end;
  return header.substr(pos, end - pos);
}

std::vector<std::size_t> parse_shape(const std::string& tuple,
                                     const std::filesystem::path& path) {
  std::vector<std::size_t> shape;
  std::size_t i = 1;  // skip '('
  while (i < tuple.size()) {
    while (i < tuple.size() && (tuple[i] == ' ' || tuple[i] == ',')) ++i;
    if (i >= tuple.size() || tuple[i] == ')') break;
    std::size_t value = 0;
    bool any = false;
    while (i < tuple.size() && tuple[i] >= '0' && tuple[i] <= '9') {
      value = value * 10 + static_cast<std::size_t>(tuple[i] - '0');
      ++i;
      any = true;
    }
    if (!any) throw Error(ErrorCode::kBadFormat, path.string() + ": bad shape " + tuple);
    shape.push_back(value);
  }
  return shape;
}

void write_impl(const std::filesystem::path& path, const std::string& descr,
                std::span<const std::size_t> shape, const void* data,
                std::size_t bytes) {
  std::string dict = header_dict(descr, shape);
  // magic(6) + version(2) + len(2) + dict + '\n', total a multiple of 64
  std::size_t total = 10 + dict.size() + 1;
  std::size_t pad = (64 - total % 64) % 64;
  dict.append(pad, ' ');
  dict.push_back('\n');

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(kMagic, 6);
  const char version[2] = {1, 0};
  out.write(version, 2);
  const auto len = static_cast<std::uint16_t>(dict.size());
  const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
  out.write(len_bytes, 2);
  out.write(dict.data(), static_cast<std::streamsize>(dict.size()));
  out.write(static_cast<const char*>(data), static_cast<std::streamsize>(bytes));
  if (!out) throw Error(ErrorCode::kIo, "short write to " + path.string());
}

std::size_t element_count(std::span<const std::size_t> shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

}  // namespace

std::string header_dict(const std::string& descr, std::span<const std::size_t> shape) {
  std::ostringstream ss;
  ss << "{'descr': '" << descr << "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    ss << shape[i];
    if (shape.size() == 1 || i + 1 < shape.size()) ss << ",";
    if (i + 1 < shape.size()) ss << " ";
  }
  ss << "), }";
  return ss.str();
}

Array read(const std::filesystem::path& path) {
  const std::string blob = read_all(path);
  if (blob.size() < 10 || std::memcmp(blob.data(), kMagic, 6) != 0) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": not an npy file");
  }
  const auto major = static_cast<unsigned char>(blob[6]);
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (major == 1) {
    header_len = static_cast<unsigned char>(blob[8]) |
                 (static_cast<std::size_t>(static_cast<unsigned char>(blob[9])) << 8);
    offset = 10;
  } else if (major == 2 || major == 3) {
    if (blob.size() < 12) throw Error(ErrorCode::kBadFormat, path.string() + ": truncated");
    for (int b = 0; b < 4; ++b) {
      header_len |= static_cast<std::size_t>(static_cast<unsigned char>(blob[8 + b])) << (8 * b);
    }
    offset = 12;
  } else {
    throw Error(ErrorCode::kBadFormat, path.string() + ": unsupported npy version");
  }
  if (offset + header_len > blob.size()) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": truncated header");
  }
  const std::string header = blob.substr(offset, header_len);
  offset += header_len;

  Array array;
  array.descr = dict_value(header, "descr", path);
  if (dict_value(header, "fortran_order", path) != "False") {
    throw Error(ErrorCode::kBadFormat, path.string() + ": fortran order not supported");
  }
  array.shape = parse_shape(dict_value(header, "shape", path), path);

  std::size_t width = 0;
  if (array.descr == "<f4") {
    width = 4;
  } else if (array.descr == "<f8") {
    width = 8;
  } else {
    throw Error(ErrorCode::kUnsupportedDtype,
                path.string() + ": dtype " + array.descr + " is not convertible");
  }
  const std::size_t n = element_count(array.shape);
  if (blob.size() - offset < n * width) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": truncated data");
  }
  array.values.resize(n);
  const char* src = blob.data() + offset;
  if (width == 4) {
    for (std::size_t i = 0; i < n; ++i) {
      float v;
      std::memcpy(&v, src + 4 * i, 4);
      array.values[i] = v;
    }
  } else {
    std::memcpy(array.values.data(), src, n * 8);
  }
  return array;
}

void write(const std::filesystem::path& path, std::span<const std::size_t> shape,
           std::span<const float> values) {
  if (element_count(shape) != values.size()) {
    throw Error(ErrorCode::kShapeMismatch, "npy shape does not match data size");
  }
  write_impl(path, "<f4", shape, values.data(), values.size_bytes());
}

void write(const std::filesystem::path& path, std::span<const std::size_t> shape,
           std::span<const double> values) {
  if (element_count(shape) != values.size()) {
    throw Error(ErrorCode::kShapeMismatch, "npy shape does not match data size");
  }
  write_impl(path, "<f8", shape, values.data(), values.size_bytes());
}

}  // namespace broadcam::npy
