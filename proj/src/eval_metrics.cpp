#include "broadcam/eval_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "broadcam/cam_gen.hpp"
#include "broadcam/errors.hpp"
#include "broadcam/image.hpp"

namespace broadcam {
namespace {

void check_aligned(std::span<const CamSeed> cams, std::span<const SegmentationMask> masks) {
  if (cams.size() != masks.size()) {
    throw Error(ErrorCode::kSampleMismatch, "got " + std::to_string(cams.size()) + " cams and " +
                                                std::to_string(masks.size()) + " masks");
  }
  for (std::size_t i = 0; i < cams.size(); ++i) {
    if (!cams[i].sample_id.empty() && !masks[i].sample_id.empty() &&
        cams[i].sample_id != masks[i].sample_id) {
      throw Error(ErrorCode::kSampleMismatch,
                  "cam " + cams[i].sample_id + " paired with mask " + masks[i].sample_id);
    }
  }
}

std::string fmt_real(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

}  // namespace

// ---------------------------------------------------------------------------
// ConfusionMatrix

ConfusionMatrix::ConfusionMatrix(int num_classes)
    : k_(num_classes), counts_(static_cast<std::size_t>(num_classes) * num_classes, 0) {
  if (num_classes < 1) throw Error(ErrorCode::kInvalidArgument, "confusion needs >= 1 class");
}

void ConfusionMatrix::add(int gt, int pred, std::uint64_t count) {
  if (gt < 0 || gt >= k_ || pred < 0 || pred >= k_) {
    throw Error(ErrorCode::kOutOfRange, "label outside [0, " + std::to_string(k_) + ")");
  }
  counts_[gt * k_ + pred] += count;
}

void ConfusionMatrix::accumulate(const SegmentationMask& gt, const SegmentationMask& pred) {
  if (gt.height != pred.height || gt.width != pred.width) {
    throw Error(ErrorCode::kShapeMismatch, "prediction and ground truth sizes differ");
  }
  for (std::size_t i = 0; i < gt.grid.size(); ++i) {
    if (gt.grid[i] == SegmentationMask::kIgnore) continue;
    add(gt.grid[i], pred.grid[i]);
  }
}

void ConfusionMatrix::merge(const ConfusionMatrix& other) {
  if (other.k_ != k_) throw Error(ErrorCode::kDimensionMismatch, "confusion sizes differ");
  for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
}

std::uint64_t ConfusionMatrix::total() const {
  return std::accumulate(counts_.begin(), counts_.end(), std::uint64_t{0});
}

std::uint64_t ConfusionMatrix::gt_count(int k) const {
  std::uint64_t n = 0;
  for (int p = 0; p < k_; ++p) n += at(k, p);
  return n;
}

std::uint64_t ConfusionMatrix::pred_count(int k) const {
  std::uint64_t n = 0;
  for (int g = 0; g < k_; ++g) n += at(g, k);
  return n;
}

std::vector<double> ConfusionMatrix::class_iou() const {
  std::vector<double> iou(k_, 0.0);
  for (int k = 0; k < k_; ++k) {
    const std::uint64_t tp = at(k, k);
    const std::uint64_t uni = gt_count(k) + pred_count(k) - tp;
    iou[k] = uni == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(uni);
  }
  return iou;
}

double ConfusionMatrix::mean_iou() const {
  const auto iou = class_iou();
  return std::accumulate(iou.begin(), iou.end(), 0.0) / static_cast<double>(k_);
}

double fwiou(const ConfusionMatrix& confusion) {
  const std::uint64_t total = confusion.total();
  if (total == 0) throw Error(ErrorCode::kInvalidArgument, "fwiou: empty confusion matrix");
  const auto iou = confusion.class_iou();
  double sum = 0.0;
  for (int k = 0; k < confusion.num_classes(); ++k) {
    sum += static_cast<double>(confusion.gt_count(k)) / static_cast<double>(total) * iou[k];
  }
  return sum;
}

// ---------------------------------------------------------------------------
// Threshold sweep

std::vector<double> default_thresholds() { return parse_thresholds("0.05:0.95:0.05"); }

std::vector<double> parse_thresholds(const std::string& text) {
  std::vector<double> out;
  try {
    if (text.find(':') != std::string::npos) {
      std::istringstream ss(text);
      std::string lo_s, hi_s, step_s;
      std::getline(ss, lo_s, ':');
      std::getline(ss, hi_s, ':');
      std::getline(ss, step_s, ':');
      const double lo = std::stod(lo_s), hi = std::stod(hi_s), step = std::stod(step_s);
      if (!(step > 0.0)) throw Error(ErrorCode::kInvalidArgument, "threshold step must be > 0");
      const auto n = static_cast<int>(std::floor((hi - lo) / step + 1e-9));
      for (int i = 0; i <= n; ++i) {
        // Round to 12 digits so 0.05 * 3 prints and compares as 0.15.
        out.push_back(std::round((lo + i * step) * 1e12) / 1e12);
      }
    } else {
      std::istringstream ss(text);
      std::string item;
      while (std::getline(ss, item, ',')) {
        if (!item.empty()) out.push_back(std::stod(item));
      }
    }
  } catch (const std::logic_error&) {
    throw Error(ErrorCode::kInvalidArgument, "cannot parse thresholds '" + text + "'");
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "empty threshold list");
  return out;
}

EvalReport miou_sweep(std::span<const CamSeed> cams, const LabelTable& labels,
                      std::span<const SegmentationMask> masks,
                      std::span<const double> thresholds) {
  if (thresholds.empty()) throw Error(ErrorCode::kInvalidArgument, "empty threshold list");
  for (double t : thresholds) {
    if (!(t > 0.0 && t < 1.0)) throw Error(ErrorCode::kOutOfRange, "threshold outside (0,1)");
  }
  check_aligned(cams, masks);
  const int k = labels.num_classes() + 1;
  std::vector<ConfusionMatrix> confusion(thresholds.size(), ConfusionMatrix(k));

  for (std::size_t s = 0; s < cams.size(); ++s) {
    const SegmentationMask& gt = masks[s];
    const CamSeed cam = resize_cam(cams[s], gt.height, gt.width);
    if (cam.num_classes != labels.num_classes()) {
      throw Error(ErrorCode::kDimensionMismatch, "cam " + cam.sample_id + " has " +
                                                     std::to_string(cam.num_classes) +
                                                     " classes, labels have " +
                                                     std::to_string(labels.num_classes()));
    }
    const auto& present = labels.row(cam.sample_id.empty() ? gt.sample_id : cam.sample_id);
    // The thresholded mask only depends on each pixel's winning class and
    // score, so compute those once and reuse them for every threshold.
    std::vector<int> winner(gt.grid.size(), 0);
    std::vector<float> score(gt.grid.size(), 0.0f);
    const std::size_t plane = gt.grid.size();
    for (std::size_t i = 0; i < plane; ++i) {
      int best = -1;
      float best_score = 0.0f;
      for (int c = 0; c < cam.num_classes; ++c) {
        if (!present[c]) continue;
        const float v = cam.maps[c * plane + i];
        if (best < 0 || v > best_score) {
          best = c;
          best_score = v;
        }
      }
      if (best < 0) throw Error(ErrorCode::kEmptyLabel, "sample has no present class");
      winner[i] = best + 1;
      score[i] = best_score;
    }
    for (std::size_t i = 0; i < plane; ++i) {
      const int g = gt.grid[i];
      if (g == SegmentationMask::kIgnore) continue;
      if (g >= k) {
        throw Error(ErrorCode::kOutOfRange, "mask value " + std::to_string(g) +
                                                " >= number of classes " + std::to_string(k));
      }
      for (std::size_t t = 0; t < thresholds.size(); ++t) {
        confusion[t].add(g, score[i] >= thresholds[t] ? winner[i] : 0);
      }
    }
  }

  EvalReport report;
  std::size_t best = 0;
  for (std::size_t t = 0; t < thresholds.size(); ++t) {
    ThresholdResult r;
    r.threshold = thresholds[t];
    r.class_iou = confusion[t].class_iou();
    r.mean_iou = confusion[t].mean_iou();
    report.per_threshold.push_back(std::move(r));
    if (report.per_threshold[t].mean_iou > report.per_threshold[best].mean_iou) best = t;
  }
  report.best_threshold = report.per_threshold[best].threshold;
  report.best_miou = report.per_threshold[best].mean_iou;
  report.counts = confusion[best];
  report.fwiou = report.counts.total() > 0 ? fwiou(report.counts) : 0.0;
  return report;
}

// ---------------------------------------------------------------------------
// mPxAP

double average_precision(std::vector<std::pair<float, bool>> scored) {
  std::sort(scored.begin(), scored.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  const auto positives = static_cast<std::uint64_t>(
      std::count_if(scored.begin(), scored.end(), [](const auto& p) { return p.second; }));
  if (positives == 0) return 0.0;
  std::uint64_t tp = 0, fp = 0;
  double ap = 0.0;
  double prev_recall = 0.0;
  std::size_t i = 0;
  while (i < scored.size()) {
    const float s = scored[i].first;
    while (i < scored.size() && scored[i].first == s) {
      if (scored[i].second) {
        ++tp;
      } else {
        ++fp;
      }
      ++i;
    }
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    ap += (recall - prev_recall) * precision;
    prev_recall = recall;
  }
  return ap;
}

MpxapResult mpxap(std::span<const CamSeed> cams, std::span<const SegmentationMask> masks) {
  check_aligned(cams, masks);
  MpxapResult result;
  if (cams.empty()) return result;
  const int k_fg = cams.front().num_classes;
  std::vector<std::vector<std::pair<float, bool>>> pools(k_fg);
  for (std::size_t s = 0; s < cams.size(); ++s) {
    const SegmentationMask& gt = masks[s];
    if (cams[s].num_classes != k_fg) {
      throw Error(ErrorCode::kDimensionMismatch, "cams disagree on class count");
    }
    const CamSeed cam = resize_cam(cams[s], gt.height, gt.width);
    const std::size_t plane = gt.grid.size();
    for (int k = 0; k < k_fg; ++k) {
      auto& pool = pools[k];
      const auto map = cam.class_map(k);
      for (std::size_t i = 0; i < plane; ++i) {
        if (gt.grid[i] == SegmentationMask::kIgnore) continue;
        pool.emplace_back(map[i], gt.grid[i] == k + 1);
      }
    }
  }
  double sum = 0.0;
  int counted = 0;
  for (int k = 0; k < k_fg; ++k) {
    const bool any = std::any_of(pools[k].begin(), pools[k].end(),
                                 [](const auto& p) { return p.second; });
    if (!any) {
      result.per_class_ap.push_back(std::nullopt);
      result.excluded_classes.push_back(k);
      continue;
    }
    const double ap = average_precision(std::move(pools[k]));
    result.per_class_ap.push_back(ap);
    sum += ap;
    ++counted;
  }
  result.mean = counted > 0 ? sum / counted : 0.0;
  return result;
}

EvalReport evaluate_seeds(std::span<const CamSeed> cams, const LabelTable& labels,
                          std::span<const SegmentationMask> masks,
                          std::span<const double> thresholds) {
  EvalReport report = miou_sweep(cams, labels, masks, thresholds);
  report.mpxap = mpxap(cams, masks);
  return report;
}

// ---------------------------------------------------------------------------
// Relevance

std::vector<double> max_normalize(std::span<const float> map) {
  float top = 0.0f;
  for (float v : map) top = std::max(top, v);
  std::vector<double> out(map.size(), 0.0);
  if (top > 0.0f) {
    for (std::size_t i = 0; i < map.size(); ++i) {
      out[i] = static_cast<double>(map[i]) / static_cast<double>(top);
    }
  }
  return out;
}

double feature_relevance_iou(std::span<const double> channel_map, int height, int width,
                             const SegmentationMask& mask, int class_label,
                             double activation_threshold) {
  const auto map = resize_bilinear(channel_map, height, width, mask.height, mask.width);
  std::uint64_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < mask.grid.size(); ++i) {
    if (mask.grid[i] == SegmentationMask::kIgnore) continue;
    const bool active = map[i] >= activation_threshold;
    const bool target = mask.grid[i] == class_label;
    inter += active && target;
    uni += active || target;
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<double> channel_relevances(std::span<const FeatureStack> stacks,
                                       std::span<const SegmentationMask> masks,
                                       std::span<const LayerSpan> layer_offsets, int class_label,
                                       double activation_threshold) {
  if (stacks.size() != masks.size()) {
    throw Error(ErrorCode::kSampleMismatch, "stacks and masks differ in count");
  }
  if (stacks.empty()) throw Error(ErrorCode::kInvalidArgument, "no samples for relevance");
  int d = 0;
  for (const auto& s : layer_offsets) d = std::max(d, s.end);
  std::vector<double> relevance(d, 0.0);
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    for (const auto& span : layer_offsets) {
      const Tensor3& t = stacks[i].layer(span.layer_index);
      if (t.channels != span.size()) {
        throw Error(ErrorCode::kShapeMismatch, "layer channel count differs from weights");
      }
      for (int c = 0; c < t.channels; ++c) {
        const auto norm = max_normalize(t.channel(c));
        relevance[span.begin + c] += feature_relevance_iou(norm, t.height, t.width, masks[i],
                                                           class_label, activation_threshold);
      }
    }
  }
  for (double& r : relevance) r /= static_cast<double>(stacks.size());
  return relevance;
}

double pearson(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.empty()) {
    throw Error(ErrorCode::kDimensionMismatch, "pearson: length mismatch");
  }
  const auto [amin, amax] = std::minmax_element(a.begin(), a.end());
  const auto [bmin, bmax] = std::minmax_element(b.begin(), b.end());
  if (*amin == *amax || *bmin == *bmax) return 0.0;  // undefined for a constant series
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    sab += (a[i] - ma) * (b[i] - mb);
    saa += (a[i] - ma) * (a[i] - ma);
    sbb += (b[i] - mb) * (b[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

RelevanceReport weight_relevance_report(std::span<const double> weights,
                                        std::span<const double> relevances, int n_groups) {
  const int d = static_cast<int>(relevances.size());
  if (static_cast<int>(weights.size()) != d) {
    throw Error(ErrorCode::kDimensionMismatch, "weights and relevances differ in length");
  }
  if (n_groups < 1 || d < n_groups) {
    throw Error(ErrorCode::kInvalidArgument, "need at least n_groups channels (D=" +
                                                 std::to_string(d) + ", groups=" +
                                                 std::to_string(n_groups) + ")");
  }
  RelevanceReport report;
  std::vector<int> order(d);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](int a, int b) { return relevances[a] > relevances[b]; });
  for (int c : order) report.per_channel.push_back({c, relevances[c], weights[c]});

  const int base = d / n_groups;
  int pos = 0;
  double top = 0.0;
  for (int g = 0; g < n_groups; ++g) {
    RelevanceGroup group;
    group.size = g + 1 == n_groups ? d - pos : base;
    double sum = 0.0;
    for (int i = 0; i < group.size; ++i, ++pos) {
      const auto& ch = report.per_channel[pos];
      sum += ch.relevance_iou;
      if (ch.weight > 0.0) {
        ++group.positive_count;
      } else {
        ++group.negative_count;
      }
    }
    group.mean_iou = sum / group.size;
    top = std::max(top, group.mean_iou);
    report.groups.push_back(group);
  }
  for (auto& g : report.groups) g.mean_normalized_iou = top > 0.0 ? g.mean_iou / top : 0.0;
  report.pearson_r = pearson(weights, relevances);
  return report;
}

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json to_json(const EvalReport& report) {
  nlohmann::json j;
  auto& curve = j["per_threshold"] = nlohmann::json::array();
  for (const auto& r : report.per_threshold) {
    curve.push_back({{"threshold", r.threshold}, {"mean_iou", r.mean_iou},
                     {"per_class_iou", r.class_iou}});
  }
  j["best"] = {{"threshold", report.best_threshold}, {"mean_iou", report.best_miou}};
  j["fwiou"] = report.fwiou;
  std::vector<std::vector<std::uint64_t>> counts;
  for (int g = 0; g < report.counts.num_classes(); ++g) {
    auto& row = counts.emplace_back();
    for (int p = 0; p < report.counts.num_classes(); ++p) row.push_back(report.counts.at(g, p));
  }
  j["counts"] = counts;
  if (report.mpxap) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& ap : report.mpxap->per_class_ap) {
      per.push_back(ap ? nlohmann::json(*ap) : nlohmann::json(nullptr));
    }
    j["mpxap"] = {{"per_class_ap", per},
                  {"mean", report.mpxap->mean},
                  {"excluded_classes", report.mpxap->excluded_classes}};
  }
  return j;
}

nlohmann::json to_json(const RelevanceReport& report) {
  nlohmann::json j;
  auto& channels = j["per_channel"] = nlohmann::json::array();
  for (const auto& c : report.per_channel) {
    channels.push_back(
        {{"channel", c.channel}, {"relevance_iou", c.relevance_iou}, {"weight", c.weight}});
  }
  auto& groups = j["groups"] = nlohmann::json::array();
  for (const auto& g : report.groups) {
    groups.push_back({{"size", g.size},
                      {"mean_iou", g.mean_iou},
                      {"mean_normalized_iou", g.mean_normalized_iou},
                      {"positive_count", g.positive_count},
                      {"negative_count", g.negative_count}});
  }
  j["pearson_r"] = report.pearson_r;
  return j;
}

std::string threshold_curve_csv(const EvalReport& report) {
  std::ostringstream out;
  out << "threshold,mean_iou";
  const std::size_t k = report.per_threshold.empty() ? 0 : report.per_threshold[0].class_iou.size();
  for (std::size_t c = 0; c < k; ++c) out << ",iou_" << c;
  out << "\n";
  for (const auto& r : report.per_threshold) {
    out << fmt_real(r.threshold) << "," << fmt_real(r.mean_iou);
    for (double v : r.class_iou) out << "," << fmt_real(v);
    out << "\n";
  }
  return out.str();
}

std::string relevance_groups_csv(const RelevanceReport& report) {
  std::ostringstream out;
  out << "group,size,mean_iou,mean_normalized_iou,positive_count,negative_count\n";
  for (std::size_t g = 0; g < report.groups.size(); ++g) {
    const auto& r = report.groups[g];
    out << g << "," << r.size << "," << fmt_real(r.mean_iou) << ","
        << fmt_real(r.mean_normalized_iou) << "," << r.positive_count << "," << r.negative_count
        << "\n";
  }
  return out.str();
}

std::string relevance_channels_csv(const RelevanceReport& report) {
  std::ostringstream out;
  out << "rank,channel,relevance_iou,weight\n";
  for (std::size_t i = 0; i < report.per_channel.size(); ++i) {
    const auto& c = report.per_channel[i];
    out << i << "," << c.channel << "," << fmt_real(c.relevance_iou) << "," << fmt_real(c.weight)
        << "\n";
  }
  return out.str();
}

}  // namespace broadcam
