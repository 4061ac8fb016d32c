#include "broadcam/tensor_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>

#include <json.hpp>

#include "broadcam/errors.hpp"
#include "broadcam/npy.hpp"

namespace broadcam {
namespace {

using json = nlohmann::json;

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  std::istringstream ss(line);
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

std::string trim(std::string s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == ' ' || s.back() == '\n')) s.pop_back();
  std::size_t start = 0;
  while (start < s.size() && s[start] == ' ') ++start;
  return s.substr(start);
}

// ---------------------------------------------------------------------------
// PNG

struct PngReadGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngReadGuard() { png_destroy_read_struct(&png, &info, nullptr); }
};

struct PngWriteGuard {
  png_structp png = nullptr;
  png_infop info = nullptr;
  ~PngWriteGuard() { png_destroy_write_struct(&png, &info); }
};

struct FileCloser {
  void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

SegmentationMask read_png(const fs::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw Error(ErrorCode::kIo, "cannot open " + path.string());

  PngReadGuard g;
  g.png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw Error(ErrorCode::kIo, "png_create_read_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw Error(ErrorCode::kIo, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(g.png))) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": corrupt png");
  }
  png_init_io(g.png, file.get());
  png_read_info(g.png, g.info);

  const auto color = png_get_color_type(g.png, g.info);
  const auto depth = png_get_bit_depth(g.png, g.info);
  if (color != PNG_COLOR_TYPE_GRAY && color != PNG_COLOR_TYPE_PALETTE) {
    throw Error(ErrorCode::kNotSingleChannel, path.string() + ": mask must be single-channel");
  }
  if (depth != 8) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": mask must be 8-bit");
  }
  // Palette images keep their raw indices (VOC-style label PNGs).
  SegmentationMask mask(static_cast<int>(png_get_image_height(g.png, g.info)),
                        static_cast<int>(png_get_image_width(g.png, g.info)));
  std::vector<png_bytep> rows(mask.height);
  for (int y = 0; y < mask.height; ++y) {
    rows[y] = mask.grid.data() + static_cast<std::size_t>(y) * mask.width;
  }
  png_read_image(g.png, rows.data());
  png_read_end(g.png, nullptr);
  return mask;
}

// ---------------------------------------------------------------------------
// PGM (P5 binary and P2 ascii)

SegmentationMask read_pnm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string magic;
  in >> magic;
  if (magic == "P3" || magic == "P6") {
    throw Error(ErrorCode::kNotSingleChannel, path.string() + ": mask must be single-channel");
  }
  if (magic != "P5" && magic != "P2") {
    throw Error(ErrorCode::kBadFormat, path.string() + ": unsupported pnm variant " + magic);
  }
  auto next_int = [&]() {
    in >> std::ws;
    while (in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
      in >> std::ws;
    }
    int v = -1;
    in >> v;
    if (!in) throw Error(ErrorCode::kBadFormat, path.string() + ": bad pgm header");
    return v;
  };
  const int width = next_int();
  const int height = next_int();
  const int maxval = next_int();
  if (width <= 0 || height <= 0 || maxval <= 0 || maxval > 255) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": pgm must be 8-bit");
  }
  SegmentationMask mask(height, width);
  if (magic == "P5") {
    in.get();  // single whitespace after maxval
    in.read(reinterpret_cast<char*>(mask.grid.data()),
            static_cast<std::streamsize>(mask.grid.size()));
    if (in.gcount() != static_cast<std::streamsize>(mask.grid.size())) {
      throw Error(ErrorCode::kBadFormat, path.string() + ": truncated pgm");
    }
  } else {
    for (auto& v : mask.grid) {
      const int value = next_int();
      if (value > maxval) throw Error(ErrorCode::kBadFormat, path.string() + ": value > maxval");
      v = static_cast<std::uint8_t>(value);
    }
  }
  return mask;
}

void check_finite(const std::vector<double>& values, const fs::path& path) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw Error(ErrorCode::kNonFiniteInput, path.string() + " contains NaN/Inf");
    }
  }
}

}  // namespace

// ---------------------------------------------------------------------------

const Tensor3& FeatureStack::layer(int index) const {
  for (const auto& l : layers) {
    if (l.index == index) return l.tensor;
  }
  throw Error(ErrorCode::kMissingLayer,
              "sample " + sample_id + " has no layer " + std::to_string(index));
}

bool FeatureStack::has_layer(int index) const {
  return std::any_of(layers.begin(), layers.end(),
                     [&](const FeatureLayer& l) { return l.index == index; });
}

const std::vector<std::uint8_t>& LabelTable::row(const std::string& sample_id) const {
  auto it = rows.find(sample_id);
  if (it == rows.end()) throw Error(ErrorCode::kSampleMismatch, "no label row for " + sample_id);
  return it->second;
}

fs::path feature_file(const fs::path& prefix, int layer_index) {
  return fs::path(prefix.string() + ".layer" + std::to_string(layer_index) + ".npy");
}

FeatureStack load_feature_stack(const fs::path& prefix, std::span<const int> expected_layers) {
  if (expected_layers.empty()) {
    throw Error(ErrorCode::kInvalidArgument, "no layers requested for " + prefix.string());
  }
  std::vector<int> order(expected_layers.begin(), expected_layers.end());
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw Error(ErrorCode::kDuplicateLayer, "duplicate layer requested");
  }
  FeatureStack stack;
  stack.sample_id = prefix.filename().string();
  for (int j : order) {
    if (j < 1) throw Error(ErrorCode::kInvalidArgument, "layer index must be >= 1");
    const fs::path file = feature_file(prefix, j);
    if (!fs::exists(file)) {
      throw Error(ErrorCode::kMissingLayer,
                  "layer " + std::to_string(j) + " missing for sample " + stack.sample_id);
    }
    npy::Array array = npy::read(file);
    if (array.shape.size() != 3) {
      throw Error(ErrorCode::kShapeMismatch, file.string() + ": expected a 3-D tensor");
    }
    check_finite(array.values, file);
    FeatureLayer layer;
    layer.index = j;
    layer.tensor = Tensor3(static_cast<int>(array.shape[0]), static_cast<int>(array.shape[1]),
                           static_cast<int>(array.shape[2]));
    std::transform(array.values.begin(), array.values.end(), layer.tensor.data.begin(),
                   [](double v) { return static_cast<float>(v); });
    stack.layers.push_back(std::move(layer));
  }
  return stack;
}

void save_feature_stack(const FeatureStack& stack, const fs::path& dir) {
  for (const auto& layer : stack.layers) {
    const std::size_t shape[3] = {static_cast<std::size_t>(layer.tensor.channels),
                                  static_cast<std::size_t>(layer.tensor.height),
                                  static_cast<std::size_t>(layer.tensor.width)};
    npy::write(feature_file(dir / stack.sample_id, layer.index), shape,
               std::span<const float>(layer.tensor.data));
  }
}

SegmentationMask load_mask(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  unsigned char sig[8] = {};
  in.read(reinterpret_cast<char*>(sig), 8);
  in.close();
  SegmentationMask mask;
  if (png_sig_cmp(sig, 0, 8) == 0) {
    mask = read_png(path);
  } else if (sig[0] == 'P') {
    mask = read_pnm(path);
  } else {
    throw Error(ErrorCode::kBadFormat, path.string() + ": not a PNG or PGM mask");
  }
  mask.sample_id = path.stem().string();
  return mask;
}

void save_mask_png(const SegmentationMask& mask, const fs::path& path) {
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  PngWriteGuard g;
  g.png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (!g.png) throw Error(ErrorCode::kIo, "png_create_write_struct failed");
  g.info = png_create_info_struct(g.png);
  if (!g.info) throw Error(ErrorCode::kIo, "png_create_info_struct failed");
  if (setjmp(png_jmpbuf(g.png))) throw Error(ErrorCode::kIo, "png write failed: " + path.string());
  png_init_io(g.png, file.get());
  png_set_IHDR(g.png, g.info, static_cast<png_uint_32>(mask.width),
               static_cast<png_uint_32>(mask.height), 8, PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(g.png, g.info);
  for (int y = 0; y < mask.height; ++y) {
    png_write_row(g.png, mask.grid.data() + static_cast<std::size_t>(y) * mask.width);
  }
  png_write_end(g.png, nullptr);
}

void save_mask_pgm(const SegmentationMask& mask, const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out << "P5\n" << mask.width << " " << mask.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(mask.grid.data()),
            static_cast<std::streamsize>(mask.grid.size()));
}

void save_mask(const SegmentationMask& mask, const fs::path& path) {
  if (path.extension() == ".pgm") {
    save_mask_pgm(mask, path);
  } else {
    save_mask_png(mask, path);
  }
}

LabelTable load_labels(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw Error(ErrorCode::kBadFormat, path.string() + ": empty csv");
  if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
  auto header = split_csv_line(trim(line));
  if (header.size() < 2 || trim(header[0]) != "sample_id") {
    throw Error(ErrorCode::kBadFormat, path.string() + ": header must start with sample_id");
  }
  LabelTable table;
  for (std::size_t i = 1; i < header.size(); ++i) table.class_names.push_back(trim(header[i]));

  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    line = trim(line);
    if (line.empty()) continue;
    auto cells = split_csv_line(line);
    const std::string where = path.string() + ":" + std::to_string(line_no);
    if (cells.size() != header.size()) {
      throw Error(ErrorCode::kBadFormat, where + ": expected " +
                                             std::to_string(header.size()) + " columns");
    }
    const std::string id = trim(cells[0]);
    std::vector<std::uint8_t> row;
    for (std::size_t i = 1; i < cells.size(); ++i) {
      const std::string v = trim(cells[i]);
      if (v != "0" && v != "1") {
        throw Error(ErrorCode::kOutOfRange, where + ": entry '" + v + "' is not 0 or 1");
      }
      row.push_back(v == "1" ? 1 : 0);
    }
    if (std::none_of(row.begin(), row.end(), [](std::uint8_t b) { return b != 0; })) {
      throw Error(ErrorCode::kEmptyLabel, where + ": sample " + id + " has no positive class");
    }
    if (!table.rows.emplace(id, std::move(row)).second) {
      throw Error(ErrorCode::kDuplicateSample, where + ": duplicate sample " + id);
    }
  }
  return table;
}

void save_labels(const LabelTable& labels, const fs::path& path) {
  std::ostringstream out;
  out << "sample_id";
  for (const auto& name : labels.class_names) out << "," << name;
  out << "\n";
  for (const auto& [id, row] : labels.rows) {
    out << id;
    for (auto v : row) out << "," << static_cast<int>(v);
    out << "\n";
  }
  write_file_atomic(path, out.str());
}

void save_cam(const CamSeed& cam, const fs::path& path) {
  for (float v : cam.maps) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw Error(ErrorCode::kOutOfRange, "cam value " + std::to_string(v) + " outside [0,1]");
    }
  }
  const std::size_t shape[3] = {static_cast<std::size_t>(cam.num_classes),
                                static_cast<std::size_t>(cam.height),
                                static_cast<std::size_t>(cam.width)};
  npy::write(path, shape, std::span<const float>(cam.maps));
}

CamSeed load_cam(const fs::path& path, const std::string& sample_id) {
  npy::Array array = npy::read(path);
  if (array.shape.size() != 3) {
    throw Error(ErrorCode::kShapeMismatch, path.string() + ": cam must be K x H x W");
  }
  check_finite(array.values, path);
  CamSeed cam;
  cam.sample_id = sample_id;
  cam.num_classes = static_cast<int>(array.shape[0]);
  cam.height = static_cast<int>(array.shape[1]);
  cam.width = static_cast<int>(array.shape[2]);
  cam.maps.resize(array.values.size());
  std::transform(array.values.begin(), array.values.end(), cam.maps.begin(),
                 [](double v) { return static_cast<float>(v); });
  return cam;
}

// ---------------------------------------------------------------------------
// Manifest

fs::path Manifest::feature_prefix(const std::string& sample_id) const {
  return dataset_root / features_dir / sample_id;
}

fs::path Manifest::mask_path(const std::string& sample_id) const {
  return dataset_root / masks_dir / (sample_id + mask_extension);
}

fs::path Manifest::labels_path() const { return dataset_root / labels_file; }

const std::vector<std::string>& Manifest::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw Error(ErrorCode::kInvalidArgument, "manifest has no split " + name);
  return it->second;
}

Manifest load_manifest(const fs::path& path, bool check_files) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open manifest " + path.string());
  json doc;
  try {
    in >> doc;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": " + e.what());
  }
  Manifest m;
  try {
    const fs::path base = fs::absolute(path).parent_path();
    const fs::path root = doc.value("dataset_root", std::string("."));
    m.dataset_root = fs::weakly_canonical(root.is_absolute() ? root : base / root);
    m.class_names = doc.at("class_names").get<std::vector<std::string>>();
    for (const auto& l : doc.at("layer_shapes")) {
      m.layer_shapes.push_back({l.at("index").get<int>(), l.at("channels").get<int>(),
                                l.at("height").get<int>(), l.at("width").get<int>()});
    }
    m.features_dir = doc.value("features_dir", m.features_dir);
    m.masks_dir = doc.value("masks_dir", m.masks_dir);
    m.labels_file = doc.value("labels_file", m.labels_file);
    m.mask_extension = doc.value("mask_extension", m.mask_extension);
    for (const auto& [name, ids] : doc.at("splits").items()) {
      m.splits[name] = ids.get<std::vector<std::string>>();
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": " + e.what());
  }

  std::set<std::string> seen;
  for (const auto& [name, ids] : m.splits) {
    for (const auto& id : ids) {
      if (!seen.insert(id).second) {
        throw Error(ErrorCode::kDuplicateSample,
                    "sample " + id + " appears in more than one split (" + name + ")");
      }
    }
  }
  if (check_files) {
    if (!fs::exists(m.labels_path())) {
      throw Error(ErrorCode::kIo, "labels file missing: " + m.labels_path().string());
    }
    for (const auto& [name, ids] : m.splits) {
      for (const auto& id : ids) {
        for (const auto& l : m.layer_shapes) {
          if (!fs::exists(feature_file(m.feature_prefix(id), l.index))) {
            throw Error(ErrorCode::kMissingLayer, "sample " + id + " (" + name +
                                                      ") lacks layer " + std::to_string(l.index));
          }
        }
        if (!fs::exists(m.mask_path(id))) {
          throw Error(ErrorCode::kMissingMask, "sample " + id + " has no mask");
        }
      }
    }
  }
  return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
  json doc;
  doc["dataset_root"] = ".";
  doc["class_names"] = m.class_names;
  json layers = json::array();
  for (const auto& l : m.layer_shapes) {
    layers.push_back({{"index", l.index}, {"channels", l.channels}, {"height", l.height},
                      {"width", l.width}});
  }
  doc["layer_shapes"] = layers;
  doc["features_dir"] = m.features_dir;
  doc["masks_dir"] = m.masks_dir;
  doc["labels_file"] = m.labels_file;
  doc["mask_extension"] = m.mask_extension;
  doc["splits"] = m.splits;
  write_file_atomic(path, doc.dump(2) + "\n");
}

void write_file_atomic(const fs::path& path, const std::string& contents) {
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorCode::kIo, "cannot write " + tmp.string());
    out << contents;
    if (!out) throw Error(ErrorCode::kIo, "short write to " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw Error(ErrorCode::kIo, "rename to " + path.string() + " failed: " + ec.message());
}

}  // namespace broadcam
