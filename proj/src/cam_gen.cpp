#include "broadcam/cam_gen.hpp"

#include <algorithm>
#include <numeric>

#include "broadcam/errors.hpp"
#include "broadcam/image.hpp"

namespace broadcam {
namespace {

struct LayerPlan {
  const Tensor3* tensor;
  LayerSpan span;
};

std::vector<LayerPlan> plan_layers(const FeatureStack& stack, const CamWeights& weights,
                                   std::span<const int> layers) {
  if (layers.empty()) throw Error(ErrorCode::kInvalidArgument, "generate_cam: no layers");
  std::vector<int> order(layers.begin(), layers.end());
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw Error(ErrorCode::kDuplicateLayer, "generate_cam: layer listed twice");
  }
  std::vector<LayerPlan> plan;
  for (int j : order) {
    const LayerSpan& span = weights.span_of(j);
    const Tensor3& t = stack.layer(j);
    if (t.channels != span.size()) {
      throw Error(ErrorCode::kShapeMismatch,
                  "sample " + stack.sample_id + " layer " + std::to_string(j) + " has " +
                      std::to_string(t.channels) + " channels, weights expect " +
                      std::to_string(span.size()));
    }
    plan.push_back({&t, span});
  }
  return plan;
}

TargetSize finest(const std::vector<LayerPlan>& plan) {
  TargetSize best{plan.front().tensor->height, plan.front().tensor->width};
  for (const auto& p : plan) {
    if (static_cast<long>(p.tensor->height) * p.tensor->width >
        static_cast<long>(best.height) * best.width) {
      best = {p.tensor->height, p.tensor->width};
    }
  }
  return best;
}

// Rectified cross-layer sum for one weight column.
std::vector<double> rectified_map(const std::vector<LayerPlan>& plan, const Vector& column,
                                  TargetSize target) {
  std::vector<double> acc(static_cast<std::size_t>(target.height) * target.width, 0.0);
  for (const auto& p : plan) {
    const Tensor3& t = *p.tensor;
    std::vector<double> layer_map(t.plane_size(), 0.0);
    for (int c = 0; c < t.channels; ++c) {
      const double w = column[p.span.begin + c];
      if (w == 0.0) continue;
      const auto ch = t.channel(c);
      for (std::size_t i = 0; i < ch.size(); ++i) layer_map[i] += w * ch[i];
    }
    const auto up = resize_bilinear(layer_map, t.height, t.width, target.height, target.width);
    for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += up[i];
  }
  for (double& v : acc) v = std::max(v, 0.0);
  return acc;
}

}  // namespace

const LayerSpan& CamWeights::span_of(int layer_index) const {
  for (const auto& s : layer_offsets) {
    if (s.layer_index == layer_index) return s;
  }
  throw Error(ErrorCode::kMissingLayer,
              "weights do not cover layer " + std::to_string(layer_index));
}

CamWeights cam_weights(const BLSModel& model) {
  return CamWeights{model.W_broadcam, model.layer_offsets};
}

CamSeed generate_cam(const FeatureStack& stack, const CamWeights& weights,
                     std::span<const int> layers, std::optional<TargetSize> target_size) {
  const auto plan = plan_layers(stack, weights, layers);
  const TargetSize target = target_size.value_or(finest(plan));
  if (target.height < 1 || target.width < 1) {
    throw Error(ErrorCode::kInvalidArgument, "generate_cam: empty target size");
  }
  CamSeed cam;
  cam.sample_id = stack.sample_id;
  cam.num_classes = weights.num_classes();
  cam.height = target.height;
  cam.width = target.width;
  for (const auto& p : plan) cam.layers_used.push_back(p.span.layer_index);
  cam.maps.resize(static_cast<std::size_t>(cam.num_classes) * target.height * target.width);
  for (int k = 0; k < cam.num_classes; ++k) {
    const auto map = normalize_cam(rectified_map(plan, weights.weights.col(k), target));
    std::transform(map.begin(), map.end(), cam.class_map(k).begin(),
                   [](double v) { return static_cast<float>(v); });
  }
  return cam;
}

CamSeed generate_cam(const FeatureStack& stack, const BLSModel& model,
                     std::span<const int> layers, std::optional<TargetSize> target_size) {
  return generate_cam(stack, cam_weights(model), layers, target_size);
}

std::vector<int> topk_channels(const Vector& column, int k) {
  const int d = static_cast<int>(column.size());
  if (k < 1 || k > d) {
    throw Error(ErrorCode::kOutOfRange,
                "top-k: k=" + std::to_string(k) + " outside [1, " + std::to_string(d) + "]");
  }
  std::vector<int> idx(d);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(),
                   [&](int a, int b) { return column[a] > column[b]; });
  idx.resize(k);
  return idx;
}

TopkCam generate_cam_topk(const FeatureStack& stack, const CamWeights& weights,
                          std::span<const int> layers, int class_k, int k,
                          std::optional<TargetSize> target_size) {
  if (class_k < 0 || class_k >= weights.num_classes()) {
    throw Error(ErrorCode::kOutOfRange, "top-k: class index out of range");
  }
  const Vector full = weights.weights.col(class_k);
  TopkCam out;
  out.retained = topk_channels(full, k);
  std::sort(out.retained.begin(), out.retained.end());

  CamWeights restricted;
  restricted.layer_offsets = weights.layer_offsets;
  restricted.weights = Matrix::Zero(full.size(), 1);
  for (int c : out.retained) restricted.weights(c, 0) = full[c];
  out.cam = generate_cam(stack, restricted, layers, target_size);
  return out;
}

std::vector<double> normalize_cam(std::span<const double> raw) {
  double top = 0.0;
  for (double v : raw) {
    if (v < 0.0) throw Error(ErrorCode::kOutOfRange, "normalize_cam: negative entry");
    top = std::max(top, v);
  }
  std::vector<double> out(raw.size(), 0.0);
  if (top > 0.0) {
    for (std::size_t i = 0; i < raw.size(); ++i) out[i] = raw[i] / top;
  }
  return out;
}

SegmentationMask cam_to_mask(const CamSeed& cam, std::span<const std::uint8_t> present_classes,
                             double threshold) {
  if (static_cast<int>(present_classes.size()) != cam.num_classes) {
    throw Error(ErrorCode::kDimensionMismatch, "cam_to_mask: label length != cam classes");
  }
  std::vector<int> active;
  for (int k = 0; k < cam.num_classes; ++k) {
    if (present_classes[k]) active.push_back(k);
  }
  if (active.empty()) throw Error(ErrorCode::kEmptyLabel, "cam_to_mask: no present classes");
  if (!(threshold > 0.0 && threshold < 1.0)) {
    throw Error(ErrorCode::kOutOfRange, "cam_to_mask: threshold must lie in (0,1)");
  }
  if (cam.num_classes > 254) throw Error(ErrorCode::kOutOfRange, "too many classes for a mask");

  SegmentationMask mask(cam.height, cam.width, 0);
  const std::size_t plane = static_cast<std::size_t>(cam.height) * cam.width;
  for (std::size_t i = 0; i < plane; ++i) {
    int best = -1;
    float best_score = 0.0f;
    for (int k : active) {
      const float s = cam.maps[k * plane + i];
      if (best < 0 || s > best_score) {
        best = k;
        best_score = s;
      }
    }
    if (best_score >= threshold) mask.grid[i] = static_cast<std::uint8_t>(best + 1);
  }
  return mask;
}

CamSeed resize_cam(const CamSeed& cam, int height, int width) {
  if (cam.height == height && cam.width == width) return cam;
  CamSeed out = cam;
  out.height = height;
  out.width = width;
  out.maps.assign(static_cast<std::size_t>(cam.num_classes) * height * width, 0.0f);
  for (int k = 0; k < cam.num_classes; ++k) {
    const auto src = cam.class_map(k);
    std::vector<double> plane(src.begin(), src.end());
    const auto up = resize_bilinear(plane, cam.height, cam.width, height, width);
    auto dst = out.class_map(k);
    for (std::size_t i = 0; i < up.size(); ++i) {
      dst[i] = std::clamp(static_cast<float>(up[i]), 0.0f, 1.0f);
    }
  }
  return out;
}

}  // namespace broadcam
