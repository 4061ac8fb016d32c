// tensor_io.hpp - on-disk formats for feature stacks, masks, labels, CAM
// seeds and dataset manifests.
//
// Layout conventions:
//   features  <dir>/<sample_id>.layer<j>.npy   (C x H x W, '<f4' or '<f8')
//   masks     8-bit single-channel PNG or PGM, 0 = background, 255 = ignore
//   labels    CSV `sample_id,<class_0>,...` with 0/1 entries
//   cams      NPY '<f4', K_fg x H x W, values in [0,1]
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace broadcam {

namespace fs = std::filesystem;

// Dense channels x height x width tensor, C-contiguous.
struct Tensor3 {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<float> data;

  Tensor3() = default;
  Tensor3(int c, int h, int w, float fill = 0.0f)
      : channels(c), height(h), width(w),
        data(static_cast<std::size_t>(c) * h * w, fill) {}

  std::size_t plane_size() const { return static_cast<std::size_t>(height) * width; }
  float& at(int c, int y, int x) {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  float at(int c, int y, int x) const {
    return data[(static_cast<std::size_t>(c) * height + y) * width + x];
  }
  std::span<const float> channel(int c) const {
    return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }
  std::span<float> channel(int c) {
    return {data.data() + static_cast<std::size_t>(c) * plane_size(), plane_size()};
  }
  bool same_shape(const Tensor3& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }
};

struct FeatureLayer {
  int index = 0;  // 1-based layer number
  Tensor3 tensor;
};

struct FeatureStack {
  std::string sample_id;
  std::vector<FeatureLayer> layers;  // strictly increasing index

  // Throws MissingLayer if absent.
  const Tensor3& layer(int index) const;
  bool has_layer(int index) const;
};

struct SegmentationMask {
  static constexpr std::uint8_t kIgnore = 255;

  std::string sample_id;  // file stem when loaded from disk
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> grid;  // row-major

  SegmentationMask() = default;
  SegmentationMask(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), grid(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return grid[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return grid[static_cast<std::size_t>(y) * width + x]; }
};

// Multi-hot image-level labels over the foreground classes.
struct LabelTable {
  std::vector<std::string> class_names;
  std::map<std::string, std::vector<std::uint8_t>> rows;

  int num_classes() const { return static_cast<int>(class_names.size()); }
  // Throws SampleMismatch if the id is unknown.
  const std::vector<std::uint8_t>& row(const std::string& sample_id) const;
};

// Per-class activation maps, K_fg x H x W in [0,1].
struct CamSeed {
  std::string sample_id;
  int num_classes = 0;
  int height = 0;
  int width = 0;
  std::vector<float> maps;
  std::vector<int> layers_used;

  std::span<const float> class_map(int k) const {
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    return {maps.data() + k * plane, plane};
  }
  std::span<float> class_map(int k) {
    const std::size_t plane = static_cast<std::size_t>(height) * width;
    return {maps.data() + k * plane, plane};
  }
};

struct LayerShape {
  int index = 0;
  int channels = 0;
  int height = 0;
  int width = 0;
};

struct Manifest {
  fs::path dataset_root;              // absolute after load
  std::vector<std::string> class_names;
  std::vector<LayerShape> layer_shapes;
  std::string features_dir = "features";
  std::string masks_dir = "masks";
  std::string labels_file = "labels.csv";
  std::string mask_extension = ".png";
  std::map<std::string, std::vector<std::string>> splits;  // train/val/test

  fs::path feature_prefix(const std::string& sample_id) const;
  fs::path mask_path(const std::string& sample_id) const;
  fs::path labels_path() const;
  const std::vector<std::string>& split(const std::string& name) const;
};

fs::path feature_file(const fs::path& prefix, int layer_index);

// `prefix` is <dir>/<sample_id>; one file per requested layer is read.
FeatureStack load_feature_stack(const fs::path& prefix, std::span<const int> expected_layers);
void save_feature_stack(const FeatureStack& stack, const fs::path& dir);

SegmentationMask load_mask(const fs::path& path);
void save_mask_png(const SegmentationMask& mask, const fs::path& path);
void save_mask_pgm(const SegmentationMask& mask, const fs::path& path);
void save_mask(const SegmentationMask& mask, const fs::path& path);  // by extension

LabelTable load_labels(const fs::path& path);
void save_labels(const LabelTable& labels, const fs::path& path);

void save_cam(const CamSeed& cam, const fs::path& path);
CamSeed load_cam(const fs::path& path, const std::string& sample_id = {});

// Validates split disjointness and, when check_files is set, that every
// referenced feature/mask/label file exists.
Manifest load_manifest(const fs::path& path, bool check_files = true);
void save_manifest(const Manifest& manifest, const fs::path& path);

// Writes to a sibling temp file then renames over the target.
void write_file_atomic(const fs::path& path, const std::string& contents);

}  // namespace broadcam
