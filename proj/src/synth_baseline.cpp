#include "broadcam/synth_baseline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "broadcam/errors.hpp"
#include "broadcam/rng.hpp"

namespace broadcam {
namespace {

constexpr std::uint64_t kLayoutStream = 0x6c61796f7574ULL;  // channel assignment

struct Rect {
  int top, left, height, width;
};

Rect random_rect(Rng& rng, int img_h, int img_w) {
  const int h = rng.uniform_int(std::max(1, img_h / 4), std::max(1, img_h / 2));
  const int w = rng.uniform_int(std::max(1, img_w / 4), std::max(1, img_w / 2));
  return {rng.uniform_int(0, img_h - h), rng.uniform_int(0, img_w - w), h, w};
}

// Fraction of each feature cell covered by `label` in the mask.
std::vector<double> cell_coverage(const SegmentationMask& mask, std::uint8_t label, int h, int w) {
  const int sy = mask.height / h;
  const int sx = mask.width / w;
  std::vector<double> cov(static_cast<std::size_t>(h) * w, 0.0);
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (mask.at(y, x) == label) cov[static_cast<std::size_t>(y / sy) * w + x / sx] += 1.0;
    }
  }
  for (double& c : cov) c /= static_cast<double>(sy * sx);
  return cov;
}

struct LayerLayout {
  std::vector<int> owner;        // per channel: class index, or -1
  std::vector<bool> distractor;  // per channel
};

std::string sample_name(int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "s%05d", i);
  return buf;
}

double stable_bce(double logit, double y) {
  return std::max(logit, 0.0) - logit * y + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace

// ---------------------------------------------------------------------------

int SynthConfig::total_channels() const {
  int d = 0;
  for (const auto& l : layers) d += l.channels;
  return d;
}

void SynthConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (n_samples < 1) fail("n_samples must be >= 1");
  if (k_classes < 1 || k_classes > 254) fail("k_classes must be in [1, 254]");
  if (image_height < 1 || image_width < 1) fail("image size must be positive");
  if (layers.empty()) fail("at least one layer required");
  if (relevant_channels_per_class < 0) fail("relevant_channels_per_class must be >= 0");
  if (!(noise_std >= 0.0)) fail("noise_std must be >= 0");
  if (!std::isfinite(relevance_strength)) fail("relevance_strength must be finite");
  if (!(distractor_fraction >= 0.0 && distractor_fraction <= 1.0)) {
    fail("distractor_fraction must be in [0,1]");
  }
  if (!(class_probability > 0.0 && class_probability <= 1.0)) {
    fail("class_probability must be in (0,1]");
  }
  if (relevant_channels_per_class * k_classes > total_channels()) {
    fail("relevant_channels_per_class * k_classes exceeds total channels");
  }
  int prev = 0;
  for (const auto& l : layers) {
    if (l.index <= prev) fail("layer indices must be strictly increasing and >= 1");
    prev = l.index;
    if (l.channels < 1 || l.height < 1 || l.width < 1) fail("layer dimensions must be positive");
    if (image_height % l.height != 0 || image_width % l.width != 0) {
      fail("image size must be a multiple of every layer's spatial size");
    }
    if (l.relevance_scale > 0.0 && relevant_channels_per_class * k_classes > l.channels) {
      fail("layer " + std::to_string(l.index) + " too small for its planted channels");
    }
    if (l.relevance_scale < 0.0 || l.noise_scale < 0.0) fail("layer scales must be >= 0");
  }
}

SynthDataset synth_dataset(const SynthConfig& config) {
  config.validate();
  const int k = config.k_classes;
  const int rc = config.relevant_channels_per_class;

  SynthDataset data;
  for (int c = 0; c < k; ++c) data.labels.class_names.push_back("class_" + std::to_string(c));

  // Channel roles, fixed for the whole dataset.
  Rng layout_rng(config.seed, kLayoutStream);
  std::vector<LayerLayout> layouts;
  int offset = 0;
  data.relevance.values = Matrix::Zero(config.total_channels(), k);
  data.relevance.planted.resize(k);
  for (const auto& l : config.layers) {
    std::vector<int> perm(l.channels);
    std::iota(perm.begin(), perm.end(), 0);
    for (int i = l.channels - 1; i > 0; --i) {
      std::swap(perm[i], perm[layout_rng.uniform_int(static_cast<std::uint64_t>(i) + 1)]);
    }
    LayerLayout layout{std::vector<int>(l.channels, -1), std::vector<bool>(l.channels, false)};
    int next = 0;
    if (l.relevance_scale > 0.0) {
      for (int cls = 0; cls < k; ++cls) {
        for (int r = 0; r < rc; ++r, ++next) {
          layout.owner[perm[next]] = cls;
          data.relevance.values(offset + perm[next], cls) = l.relevance_scale;
          data.relevance.planted[cls].push_back(offset + perm[next]);
        }
      }
    }
    const int rest = l.channels - next;
    const int n_distract = static_cast<int>(std::lround(config.distractor_fraction * rest));
    for (int i = 0; i < n_distract; ++i) layout.distractor[perm[next + i]] = true;
    data.relevance.layer_offsets.push_back({l.index, offset, offset + l.channels});
    offset += l.channels;
    layouts.push_back(std::move(layout));
  }
  for (auto& p : data.relevance.planted) std::sort(p.begin(), p.end());

  const Rng base(config.seed);
  for (int i = 0; i < config.n_samples; ++i) {
    Rng rng = base.split(static_cast<std::uint64_t>(i));
    const std::string id = sample_name(i);

    std::vector<int> present;
    for (int c = 0; c < k; ++c) {
      if (rng.bernoulli(config.class_probability)) present.push_back(c);
    }
    if (present.empty()) present.push_back(rng.uniform_int(0, k - 1));
    for (int j = static_cast<int>(present.size()) - 1; j > 0; --j) {
      std::swap(present[j], present[rng.uniform_int(0, j)]);
    }

    SegmentationMask mask(config.image_height, config.image_width, 0);
    mask.sample_id = id;
    for (int c : present) {
      const Rect r = random_rect(rng, config.image_height, config.image_width);
      for (int y = r.top; y < r.top + r.height; ++y) {
        for (int x = r.left; x < r.left + r.width; ++x) mask.at(y, x) = static_cast<std::uint8_t>(c + 1);
      }
    }
    // Later rectangles may hide earlier ones; labels follow what is visible.
    std::vector<std::uint8_t> label_row(k, 0);
    for (auto v : mask.grid) {
      if (v > 0) label_row[v - 1] = 1;
    }

    FeatureStack stack;
    stack.sample_id = id;
    for (std::size_t li = 0; li < config.layers.size(); ++li) {
      const SynthLayer& l = config.layers[li];
      const LayerLayout& layout = layouts[li];
      const double noise = config.noise_std * l.noise_scale;
      const double strength = config.relevance_strength * l.relevance_scale;

      std::vector<std::vector<double>> coverage(k);
      for (int c = 0; c < k; ++c) {
        if (label_row[c]) coverage[c] = cell_coverage(mask, static_cast<std::uint8_t>(c + 1), l.height, l.width);
      }

      FeatureLayer layer{l.index, Tensor3(l.channels, l.height, l.width)};
      for (int ch = 0; ch < l.channels; ++ch) {
        auto plane = layer.tensor.channel(ch);
        std::vector<double> signal(plane.size(), 0.0);
        const int owner = layout.owner[ch];
        if (owner >= 0 && label_row[owner]) {
          for (std::size_t p = 0; p < plane.size(); ++p) signal[p] = strength * coverage[owner][p];
        } else if (layout.distractor[ch]) {
          const Rect blob = random_rect(rng, l.height, l.width);
          for (int y = blob.top; y < blob.top + blob.height; ++y) {
            for (int x = blob.left; x < blob.left + blob.width; ++x) {
              signal[static_cast<std::size_t>(y) * l.width + x] = config.relevance_strength;
            }
          }
        }
        for (std::size_t p = 0; p < plane.size(); ++p) {
          const double n = noise > 0.0 ? rng.normal(0.0, noise) : 0.0;
          plane[p] = static_cast<float>(signal[p] + n);
        }
      }
      stack.layers.push_back(std::move(layer));
    }

    data.sample_ids.push_back(id);
    data.labels.rows.emplace(id, std::move(label_row));
    data.masks.push_back(std::move(mask));
    data.stacks.push_back(std::move(stack));
  }
  return data;
}

void write_dataset(const SynthDataset& data, const SynthConfig& config,
                   const std::map<std::string, std::vector<int>>& splits,
                   const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  Manifest manifest;
  manifest.dataset_root = dir;
  manifest.class_names = data.labels.class_names;
  for (const auto& l : config.layers) {
    manifest.layer_shapes.push_back({l.index, l.channels, l.height, l.width});
  }
  fs::create_directories(dir / manifest.features_dir);
  fs::create_directories(dir / manifest.masks_dir);

  for (std::size_t i = 0; i < data.stacks.size(); ++i) {
    save_feature_stack(data.stacks[i], dir / manifest.features_dir);
    save_mask(data.masks[i], manifest.mask_path(data.sample_ids[i]));
  }
  save_labels(data.labels, manifest.labels_path());

  for (const auto& [name, indices] : splits) {
    auto& ids = manifest.splits[name];
    for (int idx : indices) ids.push_back(data.sample_ids.at(idx));
  }
  save_manifest(manifest, dir / "manifest.json");

  std::ostringstream rel;
  rel << "column,layer,channel";
  for (const auto& name : data.labels.class_names) rel << "," << name;
  rel << "\n";
  for (const auto& span : data.relevance.layer_offsets) {
    for (int c = span.begin; c < span.end; ++c) {
      rel << c << "," << span.layer_index << "," << c - span.begin;
      for (int k = 0; k < config.k_classes; ++k) rel << "," << data.relevance.values(c, k);
      rel << "\n";
    }
  }
  write_file_atomic(dir / "relevance.csv", rel.str());

  nlohmann::json cfg;
  cfg["n_samples"] = config.n_samples;
  cfg["k_classes"] = config.k_classes;
  cfg["image_size"] = {config.image_height, config.image_width};
  cfg["relevant_channels_per_class"] = config.relevant_channels_per_class;
  cfg["noise_std"] = config.noise_std;
  cfg["relevance_strength"] = config.relevance_strength;
  cfg["distractor_fraction"] = config.distractor_fraction;
  cfg["class_probability"] = config.class_probability;
  cfg["seed"] = config.seed;
  cfg["rng"] = std::string(Rng::kName);
  for (const auto& l : config.layers) {
    cfg["layers"].push_back({{"index", l.index},
                             {"channels", l.channels},
                             {"height", l.height},
                             {"width", l.width},
                             {"relevance_scale", l.relevance_scale},
                             {"noise_scale", l.noise_scale}});
  }
  write_file_atomic(dir / "synth.json", cfg.dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Gradient-descent baseline

double sigmoid_cross_entropy(const Matrix& Z, const Matrix& Y, const Matrix& W,
                             const RowVector& b) {
  Matrix logits = Z * W;
  logits.rowwise() += b;
  double sum = 0.0;
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index k = 0; k < logits.cols(); ++k) sum += stable_bce(logits(i, k), Y(i, k));
  }
  return sum / static_cast<double>(logits.size());
}

GDClassifier fit_gd_classifier(const Matrix& Z, const Matrix& Y, const GDOptions& options) {
  if (options.epochs < 1) throw Error(ErrorCode::kInvalidArgument, "epochs must be >= 1");
  if (!(options.learning_rate >= 0.0)) {
    throw Error(ErrorCode::kInvalidArgument, "learning_rate must be >= 0");
  }
  if (Z.rows() != Y.rows() || Z.rows() == 0) {
    throw Error(ErrorCode::kDimensionMismatch, "Z and Y must have the same nonzero row count");
  }
  if (!Z.allFinite() || !Y.allFinite()) {
    throw Error(ErrorCode::kNonFiniteInput, "gd baseline inputs contain NaN/Inf");
  }
  Rng rng(options.seed);
  GDClassifier model;
  model.weights.resize(Z.cols(), Y.cols());
  for (Eigen::Index c = 0; c < model.weights.cols(); ++c) {
    for (Eigen::Index r = 0; r < model.weights.rows(); ++r) {
      model.weights(r, c) = rng.normal(0.0, options.init_std);
    }
  }
  model.bias = RowVector::Zero(Y.cols());

  const double scale = 1.0 / static_cast<double>(Y.size());
  for (int epoch = 1; epoch <= options.epochs; ++epoch) {
    Matrix logits = Z * model.weights;
    logits.rowwise() += model.bias;
    double loss = 0.0;
    Matrix grad(logits.rows(), logits.cols());
    for (Eigen::Index i = 0; i < logits.rows(); ++i) {
      for (Eigen::Index k = 0; k < logits.cols(); ++k) {
        const double x = logits(i, k);
        loss += stable_bce(x, Y(i, k));
        grad(i, k) = (1.0 / (1.0 + std::exp(-x)) - Y(i, k)) * scale;
      }
    }
    loss /= static_cast<double>(Y.size());
    if (!std::isfinite(loss)) throw DivergedError(epoch);
    model.training_log.emplace_back(epoch, loss);
    model.weights -= options.learning_rate * (Z.transpose() * grad);
    model.bias -= options.learning_rate * grad.colwise().sum();
    if (!model.weights.allFinite()) throw DivergedError(epoch);
  }
  return model;
}

std::vector<std::string> subsample_split(std::span<const std::string> sample_ids,
                                         double proportion, std::uint64_t seed) {
  if (!(proportion > 0.0 && proportion <= 1.0)) {
    throw Error(ErrorCode::kOutOfRange, "proportion must be in (0,1]");
  }
  const auto n = sample_ids.size();
  const auto take = static_cast<std::size_t>(std::llround(proportion * static_cast<double>(n)));
  if (take == 0) {
    throw Error(ErrorCode::kInvalidArgument, "proportion " + std::to_string(proportion) + " of " +
                                                 std::to_string(n) + " samples is empty");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(seed, 0x737562736574ULL);
  for (std::size_t i = 0; i < take; ++i) {
    const std::size_t j = i + rng.uniform_int(static_cast<std::uint64_t>(n - i));
    std::swap(idx[i], idx[j]);
  }
  idx.resize(take);
  std::sort(idx.begin(), idx.end());
  std::vector<std::string> out;
  out.reserve(take);
  for (auto i : idx) out.push_back(sample_ids[i]);
  return out;
}

}  // namespace broadcam
