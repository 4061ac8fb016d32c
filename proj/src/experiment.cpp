#include "broadcam/experiment.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <set>
#include <sstream>
#include <thread>

#include "broadcam/errors.hpp"
#include "broadcam/hashing.hpp"
#include "broadcam/model_store.hpp"
#include "broadcam/npy.hpp"
#include "broadcam/rng.hpp"

namespace broadcam {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string fmt_real(double v) {
  std::ostringstream ss;
  ss.precision(17);
  ss << v;
  return ss.str();
}

// Runs fn(i) for i in [0, n) on up to `threads` workers. Each job writes only
// its own output slot, so results do not depend on scheduling.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  if (workers == 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, n); ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& t : pool) t.join();
}

json run_header(const std::string& command, const ExperimentSpec& spec,
                const std::string& input_hash) {
  return {{"tool", "broadcam"},
          {"version", kToolVersion},
          {"command", command},
          {"rng", std::string(Rng::kName)},
          {"spec", spec.echo()},
          {"input_hash", input_hash}};
}

std::vector<std::string> resolve_eval_splits(const ExperimentSpec& spec, const Manifest& m) {
  if (!spec.eval_splits.empty()) return spec.eval_splits;
  std::vector<std::string> out;
  for (const auto& [name, ids] : m.splits) {
    if (!ids.empty()) out.push_back(name);
  }
  return out;
}

std::vector<int> union_layers(const std::vector<std::vector<int>>& sets) {
  std::set<int> all;
  for (const auto& s : sets) all.insert(s.begin(), s.end());
  return {all.begin(), all.end()};
}

std::string short_hash(const std::vector<std::string>& ids) {
  Sha256 h;
  for (const auto& id : ids) h.update(id).update("\n");
  return h.hex_digest().substr(0, 16);
}

std::vector<const FeatureStack*> pick(const SplitData& split,
                                      const std::vector<std::string>& ids) {
  std::map<std::string, const FeatureStack*> by_id;
  for (const auto& s : split.stacks) by_id[s.sample_id] = &s;
  std::vector<const FeatureStack*> out;
  for (const auto& id : ids) out.push_back(by_id.at(id));
  return out;
}

struct CellKey {
  Method method;
  std::vector<int> layers;
  double proportion;
  std::uint64_t seed;
};

std::vector<TableRow> run_cell(const Dataset& data, const ExperimentSpec& spec,
                               const CellKey& key, const std::vector<std::string>& eval_splits,
                               bool& failed) {
  std::vector<TableRow> rows;
  TableRow base;
  base.method = std::string(to_string(key.method));
  base.layer_set = layer_set_name(key.layers);
  base.proportion = key.proportion;
  base.seed = key.seed;
  failed = false;
  try {
    const SplitData& train = data.split(spec.train_split);
    const auto subset =
        subsample_split(train.ids, key.proportion, subset_seed(key.proportion, key.seed));
    base.subset_hash = short_hash(subset);
    const auto stacks = pick(train, subset);
    const FittedWeights fitted =
        fit_weights(key.method, stacks, data.labels, key.layers, spec, key.seed);
    for (const auto& split_name : eval_splits) {
      const EvalReport report = evaluate_weights(fitted.weights, data.split(split_name),
                                                 data.labels, key.layers, spec.thresholds);
      const double values[3] = {report.best_miou, report.fwiou,
                                report.mpxap ? report.mpxap->mean : 0.0};
      for (std::size_t m = 0; m < table_metrics().size(); ++m) {
        TableRow row = base;
        row.split = split_name;
        row.metric = table_metrics()[m];
        row.value = values[m];
        rows.push_back(row);
      }
    }
  } catch (const std::exception& e) {
    rows.clear();
    TableRow row = base;
    row.split = "*";
    row.metric = "*";
    row.ok = false;
    row.error = e.what();
    rows.push_back(row);
    failed = true;
  }
  return rows;
}

TableResult run_cells(const Dataset& data, const ExperimentSpec& spec,
                      const std::vector<CellKey>& cells) {
  std::vector<std::string> eval_splits = spec.eval_splits;
  if (eval_splits.empty()) {
    for (const auto& [name, split] : data.splits) {
      if (!split.ids.empty()) eval_splits.push_back(name);
    }
  }
  std::vector<std::vector<TableRow>> out(cells.size());
  std::vector<char> failed(cells.size(), 0);
  parallel_for(cells.size(), spec.threads, [&](std::size_t i) {
    bool f = false;
    out[i] = run_cell(data, spec, cells[i], eval_splits, f);
    failed[i] = f;
  });
  TableResult result;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    result.rows.insert(result.rows.end(), out[i].begin(), out[i].end());
    result.failed_cells += failed[i];
  }
  return result;
}

void write_table(const fs::path& dir, const std::string& name, const std::string& command,
                 const ExperimentSpec& spec, const Dataset& data, const TableResult& result,
                 json extra = json::object()) {
  fs::create_directories(dir);
  write_file_atomic(dir / (name + ".csv"), table_csv(result.rows));
  json doc = run_header(command, spec, data.input_hash);
  for (auto& [k, v] : extra.items()) doc[k] = v;
  doc["failed_cells"] = result.failed_cells;
  json rows = json::array();
  for (const auto& r : result.rows) {
    json row = {{"method", r.method},     {"layer_set", r.layer_set}, {"proportion", r.proportion},
                {"seed", r.seed},         {"split", r.split},         {"metric", r.metric},
                {"subset_hash", r.subset_hash}, {"status", r.ok ? "ok" : "failed"}};
    if (r.ok) {
      row["value"] = r.value;
    } else {
      row["error"] = r.error;
    }
    rows.push_back(row);
  }
  doc["rows"] = rows;
  write_file_atomic(dir / (name + ".json"), doc.dump(2) + "\n");
}

SplitData subset_of(const SplitData& split, const std::vector<std::string>& ids) {
  SplitData out;
  for (const auto& id : ids) {
    auto it = std::find(split.ids.begin(), split.ids.end(), id);
    if (it == split.ids.end()) throw Error(ErrorCode::kSampleMismatch, "sample " + id + " not in split");
    const auto i = static_cast<std::size_t>(it - split.ids.begin());
    out.ids.push_back(id);
    out.stacks.push_back(split.stacks[i]);
    if (i < split.masks.size()) out.masks.push_back(split.masks[i]);
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

std::string_view to_string(Method m) {
  return m == Method::kBroadCAM ? "broadcam" : "gd_baseline";
}

Method parse_method(std::string_view name) {
  if (name == "broadcam") return Method::kBroadCAM;
  if (name == "gd-baseline" || name == "gd_baseline") return Method::kGDBaseline;
  throw Error(ErrorCode::kInvalidArgument, "unknown method " + std::string(name));
}

std::vector<double> default_proportions() {
  return {0.01, 0.02, 0.05, 0.08, 0.10, 0.20, 0.50, 0.80, 1.00};
}

std::vector<int> parse_layer_list(const std::string& text) {
  std::vector<int> out;
  std::string item;
  std::string normalized = text;
  std::replace(normalized.begin(), normalized.end(), '+', ',');
  std::istringstream ss(normalized);
  while (std::getline(ss, item, ',')) {
    item.erase(std::remove(item.begin(), item.end(), ' '), item.end());
    if (item.empty()) continue;
    if (item[0] == 'L' || item[0] == 'l') item.erase(0, 1);
    try {
      out.push_back(std::stoi(item));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidArgument, "bad layer '" + item + "'");
    }
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "empty layer list '" + text + "'");
  std::vector<int> sorted = out;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorCode::kDuplicateLayer, "layer repeated in '" + text + "'");
  }
  for (int j : sorted) {
    if (j < 1) throw Error(ErrorCode::kInvalidArgument, "layer index must be >= 1");
  }
  return sorted;
}

std::vector<std::vector<int>> parse_layer_sets(const std::string& text) {
  std::vector<std::vector<int>> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    if (item.find_first_not_of(' ') == std::string::npos) continue;
    out.push_back(parse_layer_list(item));
  }
  if (out.empty()) throw Error(ErrorCode::kInvalidArgument, "no layer sets given");
  return out;
}

std::string layer_set_name(const std::vector<int>& layers) {
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) {
    if (i) out += "+";
    out += "L" + std::to_string(layers[i]);
  }
  return out;
}

void ExperimentSpec::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidArgument, what); };
  if (layers.empty()) fail("no layers selected");
  if (!(lambda >= 0.0)) fail("lambda must be >= 0");
  if (enhance_nodes < 0) fail("enhance_nodes must be >= 0");
  if (thresholds.empty()) fail("no thresholds");
  if (proportions.empty()) fail("no proportions");
  for (double p : proportions) {
    if (!(p > 0.0 && p <= 1.0)) fail("proportions must lie in (0,1]");
  }
  if (seeds.empty()) fail("at least one seed required");
  if (methods.empty()) fail("at least one method required");
}

json ExperimentSpec::echo() const {
  json methods_json = json::array();
  for (auto m : methods) methods_json.push_back(std::string(to_string(m)));
  return {{"layers", layers},
          {"lambda", lambda},
          {"enhance_nodes", enhance_nodes == 0 ? json("auto") : json(enhance_nodes)},
          {"activation", std::string(to_string(activation))},
          {"thresholds", thresholds},
          {"proportions", proportions},
          {"seeds", seeds},
          {"methods", methods_json},
          {"gd", {{"epochs", gd.epochs}, {"learning_rate", gd.learning_rate}, {"init_std", gd.init_std}}},
          {"train_split", train_split},
          {"eval_splits", eval_splits}};
}

int threads_from_env(int fallback) {
  if (const char* env = std::getenv("BROADCAM_THREADS")) {
    try {
      const int n = std::stoi(env);
      if (n > 0) return n;
    } catch (const std::logic_error&) {
    }
  }
  return fallback;
}

const SplitData& Dataset::split(const std::string& name) const {
  auto it = splits.find(name);
  if (it == splits.end()) throw Error(ErrorCode::kInvalidArgument, "dataset has no split " + name);
  return it->second;
}

Dataset load_dataset(const Manifest& manifest, const std::vector<int>& layers,
                     const std::vector<std::string>& split_names, bool load_masks) {
  Dataset data;
  data.class_names = manifest.class_names;
  data.labels = load_labels(manifest.labels_path());
  if (data.labels.class_names.size() != manifest.class_names.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "labels and manifest disagree on class count");
  }
  Sha256 hash;
  hash.update("labels").update_file(manifest.labels_path());
  std::set<std::string> wanted(split_names.begin(), split_names.end());
  for (const auto& name : wanted) {
    SplitData split;
    split.ids = manifest.split(name);
    hash.update("split:" + name);
    for (const auto& id : split.ids) {
      data.labels.row(id);  // throws for unlabeled samples
      try {
        split.stacks.push_back(load_feature_stack(manifest.feature_prefix(id), layers));
      } catch (const Error& e) {
        throw Error(e.code(), "sample " + id + ": " + e.what());
      }
      for (int j : layers) hash.update(id).update_file(feature_file(manifest.feature_prefix(id), j));
      if (load_masks) {
        const fs::path mp = manifest.mask_path(id);
        if (!fs::exists(mp)) throw Error(ErrorCode::kMissingMask, "sample " + id + " has no mask");
        split.masks.push_back(load_mask(mp));
        split.masks.back().sample_id = id;
        hash.update_file(mp);
      }
    }
    data.splits.emplace(name, std::move(split));
  }
  data.input_hash = hash.hex_digest();
  return data;
}

Dataset dataset_from_synth(const SynthDataset& synth,
                           const std::map<std::string, std::vector<int>>& splits) {
  Dataset data;
  data.class_names = synth.labels.class_names;
  data.labels = synth.labels;
  Sha256 hash;
  for (const auto& [name, indices] : splits) {
    SplitData split;
    for (int i : indices) {
      split.ids.push_back(synth.sample_ids.at(i));
      split.stacks.push_back(synth.stacks.at(i));
      split.masks.push_back(synth.masks.at(i));
      hash.update(name).update(synth.sample_ids[i]);
    }
    data.splits.emplace(name, std::move(split));
  }
  data.input_hash = hash.hex_digest();
  return data;
}

FittedWeights fit_weights(Method method, std::span<const FeatureStack* const> train,
                          const LabelTable& labels, const std::vector<int>& layers,
                          const ExperimentSpec& spec, std::uint64_t seed) {
  const BroadFeatureMatrix Z = build_broad_matrix(train, layers);
  const Matrix Y = label_matrix(labels, Z.sample_ids);
  FittedWeights out;
  out.method = method;
  if (method == Method::kBroadCAM) {
    BLSOptions opts;
    opts.lambda = spec.lambda;
    opts.enhance_nodes = spec.enhance_nodes;
    opts.activation = spec.activation;
    BLSModel model = fit_bls(Z, Y, opts);
    model.class_names = labels.class_names;
    out.weights = cam_weights(model);
    out.bls = std::move(model);
  } else {
    GDOptions opts = spec.gd;
    opts.seed = seed;
    GDClassifier clf = fit_gd_classifier(Z.data, Y, opts);
    out.weights = CamWeights{clf.weights, Z.layer_offsets};
    out.gd = std::move(clf);
  }
  return out;
}

std::vector<CamSeed> generate_split_cams(const CamWeights& weights, const SplitData& split,
                                         const std::vector<int>& layers) {
  std::vector<CamSeed> cams;
  cams.reserve(split.stacks.size());
  for (const auto& stack : split.stacks) cams.push_back(generate_cam(stack, weights, layers));
  return cams;
}

EvalReport evaluate_weights(const CamWeights& weights, const SplitData& split,
                            const LabelTable& labels, const std::vector<int>& layers,
                            std::span<const double> thresholds) {
  if (split.masks.size() != split.stacks.size()) {
    throw Error(ErrorCode::kMissingMask, "split was loaded without masks");
  }
  const auto cams = generate_split_cams(weights, split, layers);
  return evaluate_seeds(cams, labels, split.masks, thresholds);
}

std::uint64_t subset_seed(double proportion, std::uint64_t seed) {
  const auto p = static_cast<std::uint64_t>(std::llround(proportion * 1e6));
  return splitmix64(splitmix64(seed) ^ p);
}

const std::vector<std::string>& table_metrics() {
  static const std::vector<std::string> kMetrics = {"miou", "fwiou", "mpxap"};
  return kMetrics;
}

std::string table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream out;
  out << "method,layer_set,proportion,seed,split,metric,value,subset_hash,status,error\n";
  for (const auto& r : rows) {
    std::string err = r.error;
    std::replace(err.begin(), err.end(), ',', ';');
    std::replace(err.begin(), err.end(), '\n', ' ');
    out << r.method << "," << r.layer_set << "," << fmt_real(r.proportion) << "," << r.seed << ","
        << r.split << "," << r.metric << "," << (r.ok ? fmt_real(r.value) : "") << ","
        << r.subset_hash << "," << (r.ok ? "ok" : "failed") << "," << err << "\n";
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Runs

void run_build_z(const ExperimentSpec& spec) {
  spec.validate();
  const Manifest manifest = load_manifest(spec.manifest);
  const Dataset data = load_dataset(manifest, spec.layers, {spec.train_split}, false);
  const SplitData& train = data.split(spec.train_split);
  const BroadFeatureMatrix Z = build_broad_matrix(std::span<const FeatureStack>(train.stacks), spec.layers);

  fs::create_directories(spec.output_dir);
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor rm = Z.data;
  const std::size_t shape[2] = {static_cast<std::size_t>(rm.rows()), static_cast<std::size_t>(rm.cols())};
  npy::write(spec.output_dir / "Z.npy", shape,
             std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
  json doc = run_header("build-z", spec, data.input_hash);
  doc["sample_ids"] = Z.sample_ids;
  json offsets = json::array();
  for (const auto& s : Z.layer_offsets) offsets.push_back({{"layer", s.layer_index}, {"begin", s.begin}, {"end", s.end}});
  doc["layer_offsets"] = offsets;
  write_file_atomic(spec.output_dir / "z.json", doc.dump(2) + "\n");
}

std::string run_fit(const ExperimentSpec& spec) {
  spec.validate();
  const Manifest manifest = load_manifest(spec.manifest);
  const Dataset data = load_dataset(manifest, spec.layers, {spec.train_split}, false);
  const SplitData& train = data.split(spec.train_split);
  std::vector<const FeatureStack*> stacks;
  for (const auto& s : train.stacks) stacks.push_back(&s);

  const Method method = spec.methods.front();
  const std::uint64_t seed = spec.seeds.front();
  const FittedWeights fitted = fit_weights(method, stacks, data.labels, spec.layers, spec, seed);

  json extra = {{"input_hash", data.input_hash}, {"train_samples", train.ids.size()}};
  std::string hash;
  const fs::path model_dir = spec.output_dir / "model";
  if (method == Method::kBroadCAM) {
    hash = save_bls_model(*fitted.bls, model_dir, extra);
  } else {
    extra["epochs"] = spec.gd.epochs;
    extra["learning_rate"] = spec.gd.learning_rate;
    extra["init_std"] = spec.gd.init_std;
    extra["seed"] = seed;
    hash = save_gd_model(*fitted.gd, fitted.weights.layer_offsets, data.class_names, model_dir, extra);
  }
  json doc = run_header("fit", spec, data.input_hash);
  doc["method"] = std::string(to_string(method));
  doc["model_hash"] = hash;
  write_file_atomic(spec.output_dir / "fit.json", doc.dump(2) + "\n");
  return hash;
}

void run_cam(const ExperimentSpec& spec, const fs::path& model_dir, const std::string& split) {
  const StoredModel model = load_model(model_dir);
  const Manifest manifest = load_manifest(spec.manifest);
  const Dataset data = load_dataset(manifest, spec.layers, {split}, false);
  const SplitData& s = data.split(split);
  const fs::path cam_dir = spec.output_dir / "cams";
  fs::create_directories(cam_dir);
  for (const auto& stack : s.stacks) {
    save_cam(generate_cam(stack, model.weights, spec.layers), cam_dir / (stack.sample_id + ".npy"));
  }
  json doc = run_header("cam", spec, data.input_hash);
  doc["split"] = split;
  doc["model_hash"] = model.metadata.value("model_hash", "");
  doc["samples"] = s.ids;
  write_file_atomic(spec.output_dir / "cams.json", doc.dump(2) + "\n");
}

EvalReport run_eval(const ExperimentSpec& spec, const fs::path& cams_dir, const std::string& split) {
  const Manifest manifest = load_manifest(spec.manifest, false);
  const LabelTable labels = load_labels(manifest.labels_path());
  std::vector<CamSeed> cams;
  std::vector<SegmentationMask> masks;
  Sha256 hash;
  for (const auto& id : manifest.split(split)) {
    const fs::path cam_path = cams_dir / (id + ".npy");
    if (!fs::exists(cam_path)) throw Error(ErrorCode::kSampleMismatch, "no cam for sample " + id);
    cams.push_back(load_cam(cam_path, id));
    const fs::path mp = manifest.mask_path(id);
    if (!fs::exists(mp)) throw Error(ErrorCode::kMissingMask, "sample " + id + " has no mask");
    masks.push_back(load_mask(mp));
    masks.back().sample_id = id;
    hash.update_file(cam_path).update_file(mp);
  }
  const EvalReport report = evaluate_seeds(cams, labels, masks, spec.thresholds);
  fs::create_directories(spec.output_dir);
  json doc = run_header("eval", spec, hash.hex_digest());
  doc["split"] = split;
  doc["report"] = to_json(report);
  write_file_atomic(spec.output_dir / ("eval_" + split + ".json"), doc.dump(2) + "\n");
  write_file_atomic(spec.output_dir / ("eval_" + split + "_curve.csv"), threshold_curve_csv(report));
  return report;
}

TableResult gamut_table(const Dataset& data, const ExperimentSpec& spec) {
  spec.validate();
  std::vector<CellKey> cells;
  for (auto method : spec.methods) {
    for (double p : spec.proportions) {
      for (auto seed : spec.seeds) cells.push_back({method, spec.layers, p, seed});
    }
  }
  return run_cells(data, spec, cells);
}

TableResult ablation_table(const Dataset& data, const ExperimentSpec& spec,
                           const std::vector<std::vector<int>>& layer_sets) {
  spec.validate();
  std::vector<CellKey> cells;
  for (const auto& set : layer_sets) {
    if (set.empty()) throw Error(ErrorCode::kInvalidArgument, "empty layer set");
    std::vector<int> sorted = set;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw Error(ErrorCode::kDuplicateLayer, "layer repeated in set " + layer_set_name(set));
    }
    for (auto method : spec.methods) {
      for (double p : spec.proportions) {
        for (auto seed : spec.seeds) cells.push_back({method, sorted, p, seed});
      }
    }
  }
  return run_cells(data, spec, cells);
}

TableResult run_gamut(const ExperimentSpec& spec) {
  spec.validate();
  const Manifest manifest = load_manifest(spec.manifest);
  auto splits = resolve_eval_splits(spec, manifest);
  splits.push_back(spec.train_split);
  const Dataset data = load_dataset(manifest, spec.layers, splits);
  ExperimentSpec resolved = spec;
  resolved.eval_splits = resolve_eval_splits(spec, manifest);
  const TableResult result = gamut_table(data, resolved);
  write_table(spec.output_dir, "gamut", "gamut", resolved, data, result);
  return result;
}

TableResult run_ablation(const ExperimentSpec& spec,
                         const std::vector<std::vector<int>>& layer_sets) {
  spec.validate();
  for (const auto& set : layer_sets) {
    std::vector<int> sorted = set;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw Error(ErrorCode::kDuplicateLayer, "layer repeated in set " + layer_set_name(set));
    }
  }
  const Manifest manifest = load_manifest(spec.manifest);
  auto splits = resolve_eval_splits(spec, manifest);
  splits.push_back(spec.train_split);
  const Dataset data = load_dataset(manifest, union_layers(layer_sets), splits);
  ExperimentSpec resolved = spec;
  resolved.eval_splits = resolve_eval_splits(spec, manifest);
  const TableResult result = ablation_table(data, resolved, layer_sets);
  json sets = json::array();
  for (const auto& s : layer_sets) sets.push_back(layer_set_name(s));
  write_table(spec.output_dir, "ablation", "ablate", resolved, data, result, {{"layer_sets", sets}});
  return result;
}

AnalysisResult analyze_weights(const CamWeights& weights, const SplitData& split,
                               const std::vector<int>& layers, int class_k,
                               std::vector<int> topk_list, int n_groups,
                               double activation_threshold) {
  if (class_k < 0 || class_k >= weights.num_classes()) {
    throw Error(ErrorCode::kOutOfRange, "class index out of range");
  }
  if (split.masks.size() != split.stacks.size()) {
    throw Error(ErrorCode::kMissingMask, "analysis needs a mask for every sample");
  }
  AnalysisResult out;
  const auto relevance = channel_relevances(split.stacks, split.masks, weights.layer_offsets,
                                            class_k + 1, activation_threshold);
  const Vector column = weights.weights.col(class_k);
  const std::vector<double> w(column.data(), column.data() + column.size());
  out.report = weight_relevance_report(w, relevance, n_groups);

  for (int k : topk_list) {
    const int clipped = std::clamp(k, 1, weights.num_features());
    if (std::find(out.ks.begin(), out.ks.end(), clipped) == out.ks.end()) out.ks.push_back(clipped);
  }
  for (const auto& stack : split.stacks) {
    for (int k : out.ks) out.topk.push_back(generate_cam_topk(stack, weights, layers, class_k, k));
  }
  return out;
}

AnalysisResult run_analysis(const ExperimentSpec& spec, const fs::path& model_dir,
                            const std::string& split, const std::vector<std::string>& sample_ids,
                            int class_k, const std::vector<int>& topk_list, int n_groups) {
  const StoredModel model = load_model(model_dir);
  std::vector<int> model_layers;
  for (const auto& s : model.weights.layer_offsets) model_layers.push_back(s.layer_index);
  const Manifest manifest = load_manifest(spec.manifest, false);
  const Dataset data = load_dataset(manifest, model_layers, {split});
  SplitData chosen;
  if (sample_ids.empty()) {
    const SplitData& all = data.split(split);
    std::vector<std::string> ids;
    for (const auto& id : all.ids) {
      if (data.labels.row(id).at(static_cast<std::size_t>(class_k))) ids.push_back(id);
    }
    chosen = subset_of(all, ids);
  } else {
    chosen = subset_of(data.split(split), sample_ids);
  }
  if (chosen.ids.empty()) throw Error(ErrorCode::kInvalidArgument, "no samples to analyze");

  AnalysisResult result =
      analyze_weights(model.weights, chosen, spec.layers, class_k, topk_list, n_groups);

  const fs::path out = spec.output_dir;
  fs::create_directories(out / "topk");
  json doc = run_header("analyze", spec, data.input_hash);
  doc["model_hash"] = model.metadata.value("model_hash", "");
  doc["class"] = class_k;
  doc["samples"] = chosen.ids;
  doc["topk"] = result.ks;
  doc["report"] = to_json(result.report);
  write_file_atomic(out / "relevance.json", doc.dump(2) + "\n");
  write_file_atomic(out / "relevance_channels.csv", relevance_channels_csv(result.report));
  write_file_atomic(out / "relevance_groups.csv", relevance_groups_csv(result.report));

  std::size_t idx = 0;
  for (const auto& id : chosen.ids) {
    for (int k : result.ks) {
      const TopkCam& t = result.topk[idx++];
      const std::string stem = id + ".class" + std::to_string(class_k) + ".top" + std::to_string(k);
      save_cam(t.cam, out / "topk" / (stem + ".npy"));
      json side = {{"class", class_k}, {"k", k}, {"retained_channel_indices", t.retained}};
      write_file_atomic(out / "topk" / (stem + ".json"), side.dump(2) + "\n");
    }
  }
  return result;
}

}  // namespace broadcam
