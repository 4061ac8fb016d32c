// npy.hpp - minimal NumPy .npy reader/writer.
//
// Reads format v1.0 and v2.0 headers; C-order little-endian '<f4' and '<f8'
// only. Writes v1.0 with the header padded to a 64-byte boundary, the same
// layout numpy.save produces.
#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace broadcam::npy {

struct Array {
  std::string descr;                // "<f4" or "<f8"
  std::vector<std::size_t> shape;
  std::vector<double> values;       // widened losslessly from the file dtype

  std::size_t size() const { return values.size(); }
};

Array read(const std::filesystem::path& path);

void write(const std::filesystem::path& path, std::span<const std::size_t> shape,
           std::span<const float> values);
void write(const std::filesystem::path& path, std::span<const std::size_t> shape,
           std::span<const double> values);

// Header dict string for a given dtype/shape, without magic or padding.
std::string header_dict(const std::string& descr, std::span<const std::size_t> shape);

}  // namespace broadcam::npy
