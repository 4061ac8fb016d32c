// broadcam - command line front-end.
//
//   broadcam synth   --out DIR [--samples N --val N --test N ...]
//   broadcam build-z --manifest M --out DIR
//   broadcam fit     --manifest M --out DIR [--method broadcam|gd-baseline]
//   broadcam cam     --manifest M --model DIR --split val --out DIR
//   broadcam eval    --manifest M --cams DIR --split val --out DIR
//   broadcam gamut   --manifest M --out DIR [--proportions ... --seeds ...]
//   broadcam ablate  --manifest M --layer-sets "1;2;1,2" --out DIR
//   broadcam analyze --manifest M --model DIR --class K --out DIR
//
// Exit codes: 0 success, 2 finished with failed cells, 1 fatal error.

#include <CLI11.hpp>

#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "broadcam/errors.hpp"
#include "broadcam/experiment.hpp"
#include "broadcam/model_store.hpp"
#include "broadcam/synth_baseline.hpp"

namespace {

using namespace broadcam;

std::vector<std::string> split_list(const std::string& text, char sep = ',') {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string item;
  while (std::getline(ss, item, sep)) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& text, Parse parse) {
  std::vector<T> out;
  for (const auto& s : split_list(text)) {
    try {
      out.push_back(parse(s));
    } catch (const std::logic_error&) {
      throw Error(ErrorCode::kInvalidArgument, "cannot parse '" + s + "'");
    }
  }
  return out;
}

// "index:channels:HxW[:relevance_scale[:noise_scale]]"
SynthLayer parse_synth_layer(const std::string& text) {
  const auto parts = split_list(text, ':');
  if (parts.size() < 3 || parts.size() > 5) {
    throw Error(ErrorCode::kInvalidArgument, "layer spec '" + text + "' must be index:channels:HxW");
  }
  SynthLayer l;
  l.index = std::stoi(parts[0]);
  l.channels = std::stoi(parts[1]);
  const auto x = parts[2].find('x');
  if (x == std::string::npos) throw Error(ErrorCode::kInvalidArgument, "bad size '" + parts[2] + "'");
  l.height = std::stoi(parts[2].substr(0, x));
  l.width = std::stoi(parts[2].substr(x + 1));
  if (parts.size() > 3) l.relevance_scale = std::stod(parts[3]);
  if (parts.size() > 4) l.noise_scale = std::stod(parts[4]);
  return l;
}

struct CommonFlags {
  std::string manifest;
  std::string layers = "3,4";
  double lambda = 1.0;
  std::string enhance_nodes = "auto";
  std::string activation = "identity";
  std::string thresholds = "0.05:0.95:0.05";
  std::string proportions = "0.01,0.02,0.05,0.08,0.10,0.20,0.50,0.80,1.00";
  std::string seeds = "0";
  std::string method = "broadcam";
  int epochs = 5;
  double lr = GDOptions{}.learning_rate;
  double init_std = GDOptions{}.init_std;
  std::string train_split = "train";
  std::string eval_splits;
  std::string out = "out";
  CLI::Option* layers_opt = nullptr;

  void attach(CLI::App* app, bool needs_manifest = true) {
    auto* m = app->add_option("--manifest", manifest, "Dataset manifest.json");
    if (needs_manifest) m->required();
    layers_opt = app->add_option("--layers", layers, "Comma-separated layer indices");
    app->add_option("--lambda", lambda, "Ridge strength");
    app->add_option("--enhance-nodes", enhance_nodes, "Enhancement nodes (auto = one per class)");
    app->add_option("--activation", activation, "identity | scaled_tanh");
    app->add_option("--thresholds", thresholds, "lo:hi:step or comma list");
    app->add_option("--proportions", proportions, "Training proportions in (0,1]");
    app->add_option("--seeds", seeds, "Comma-separated seeds");
    app->add_option("--method", method, "broadcam | gd-baseline (comma list for gamut/ablate)");
    app->add_option("--epochs", epochs, "GD baseline epochs");
    app->add_option("--lr", lr, "GD baseline learning rate");
    app->add_option("--init-std", init_std, "GD baseline init standard deviation");
    app->add_option("--train-split", train_split, "Split used for fitting");
    app->add_option("--eval-splits", eval_splits, "Splits to evaluate (default: all)");
    app->add_option("--out", out, "Output directory");
  }

  ExperimentSpec spec() const {
    ExperimentSpec s;
    s.manifest = manifest;
    s.layers = parse_layer_list(layers);
    s.lambda = lambda;
    s.enhance_nodes = enhance_nodes == "auto" ? 0 : std::stoi(enhance_nodes);
    s.activation = parse_activation(activation);
    s.thresholds = parse_thresholds(thresholds);
    s.proportions = parse_list<double>(proportions, [](const std::string& v) { return std::stod(v); });
    s.seeds = parse_list<std::uint64_t>(seeds, [](const std::string& v) { return std::stoull(v); });
    s.methods = parse_list<Method>(method, [](const std::string& v) { return parse_method(v); });
    s.gd.epochs = epochs;
    s.gd.learning_rate = lr;
    s.gd.init_std = init_std;
    s.train_split = train_split;
    s.eval_splits = split_list(eval_splits);
    s.output_dir = out;
    s.threads = threads_from_env(1);
    s.validate();
    return s;
  }
};

std::vector<int> model_layers(const std::string& model_dir) {
  const StoredModel m = load_model(model_dir);
  std::vector<int> layers;
  for (const auto& s : m.weights.layer_offsets) layers.push_back(s.layer_index);
  return layers;
}

void print_table_summary(const TableResult& r) {
  std::cout << r.rows.size() << " rows, " << r.failed_cells << " failed cells\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"BroadCAM: outcome-agnostic CAM weights from a broad learning system"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kToolVersion);

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic planted-relevance dataset");
  SynthConfig cfg;
  cfg.layers.clear();
  int n_train = 200, n_val = 50, n_test = 0;
  std::vector<std::string> layer_specs = {"3:32:8x8", "4:32:4x4"};
  std::string synth_out = "synth";
  std::string image_size = "32x32";
  synth->add_option("--out", synth_out, "Output dataset directory");
  synth->add_option("--samples", n_train, "Training samples");
  synth->add_option("--val", n_val, "Validation samples");
  synth->add_option("--test", n_test, "Test samples");
  synth->add_option("--classes", cfg.k_classes, "Foreground classes");
  synth->add_option("--image-size", image_size, "HxW of masks");
  synth->add_option("--layer", layer_specs, "index:channels:HxW[:relevance_scale[:noise_scale]]");
  synth->add_option("--relevant-per-class", cfg.relevant_channels_per_class, "Planted channels per class and layer");
  synth->add_option("--noise", cfg.noise_std, "Gaussian noise std");
  synth->add_option("--strength", cfg.relevance_strength, "Planted signal strength");
  synth->add_option("--distractors", cfg.distractor_fraction, "Fraction of unplanted channels with blobs");
  synth->add_option("--class-prob", cfg.class_probability, "Per-class presence probability");
  synth->add_option("--seed", cfg.seed, "Generator seed");

  CommonFlags build_flags, fit_flags, cam_flags, eval_flags, gamut_flags, ablate_flags, analyze_flags;
  auto* build_z = app.add_subcommand("build-z", "Write the broad feature matrix of the train split");
  build_flags.attach(build_z);
  auto* fit = app.add_subcommand("fit", "Fit CAM weights on the train split");
  fit_flags.attach(fit);

  auto* cam = app.add_subcommand("cam", "Generate CAM seeds for a split");
  cam_flags.attach(cam);
  std::string cam_model, cam_split = "val";
  cam->add_option("--model", cam_model, "Model directory")->required();
  cam->add_option("--split", cam_split, "Split to process");

  auto* eval = app.add_subcommand("eval", "Evaluate saved CAM seeds");
  eval_flags.attach(eval);
  std::string eval_cams, eval_split = "val";
  eval->add_option("--cams", eval_cams, "Directory with <sample_id>.npy seeds")->required();
  eval->add_option("--split", eval_split, "Split to evaluate");

  auto* gamut = app.add_subcommand("gamut", "Train-proportion sweep");
  gamut_flags.attach(gamut);

  auto* ablate = app.add_subcommand("ablate", "Layer-combination ablation");
  ablate_flags.attach(ablate);
  ablate_flags.proportions = "1.0";
  std::string layer_sets = "1;2;3;4;3,4;2,3,4;1,2,3,4";
  ablate->add_option("--layer-sets", layer_sets, "Semicolon-separated layer lists");

  auto* analyze = app.add_subcommand("analyze", "Channel relevance vs weight analysis and top-k CAMs");
  analyze_flags.attach(analyze);
  std::string analyze_model, analyze_split = "val", analyze_samples, topk = "20,200,2000";
  int analyze_class = 0, groups = 16;
  analyze->add_option("--model", analyze_model, "Model directory")->required();
  analyze->add_option("--split", analyze_split, "Split holding the samples");
  analyze->add_option("--samples", analyze_samples, "Comma-separated sample ids (default: all with the class)");
  analyze->add_option("--class", analyze_class, "Foreground class index");
  analyze->add_option("--topk", topk, "Comma-separated k values (clipped to D)");
  analyze->add_option("--groups", groups, "Number of relevance groups");

  CLI11_PARSE(app, argc, argv);

  try {
    if (synth->parsed()) {
      cfg.n_samples = n_train + n_val + n_test;
      const auto x = image_size.find('x');
      if (x == std::string::npos) throw Error(ErrorCode::kInvalidArgument, "image size must be HxW");
      cfg.image_height = std::stoi(image_size.substr(0, x));
      cfg.image_width = std::stoi(image_size.substr(x + 1));
      for (const auto& s : layer_specs) cfg.layers.push_back(parse_synth_layer(s));
      const SynthDataset data = synth_dataset(cfg);
      std::map<std::string, std::vector<int>> splits;
      int i = 0;
      for (; i < n_train; ++i) splits["train"].push_back(i);
      for (; i < n_train + n_val; ++i) splits["val"].push_back(i);
      for (; i < cfg.n_samples; ++i) splits["test"].push_back(i);
      write_dataset(data, cfg, splits, synth_out);
      std::cout << "wrote " << cfg.n_samples << " samples to " << synth_out << "\n";
      return 0;
    }
    if (build_z->parsed()) {
      run_build_z(build_flags.spec());
      return 0;
    }
    if (fit->parsed()) {
      const std::string hash = run_fit(fit_flags.spec());
      std::cout << "model_hash " << hash << "\n";
      return 0;
    }
    if (cam->parsed()) {
      ExperimentSpec spec = cam_flags.spec();
      if (cam_flags.layers_opt->count() == 0) spec.layers = model_layers(cam_model);
      run_cam(spec, cam_model, cam_split);
      return 0;
    }
    if (eval->parsed()) {
      const EvalReport r = run_eval(eval_flags.spec(), eval_cams, eval_split);
      std::cout << "mIoU " << r.best_miou << " @ " << r.best_threshold << "  FwIoU " << r.fwiou
                << "  mPxAP " << (r.mpxap ? r.mpxap->mean : 0.0) << "\n";
      return 0;
    }
    if (gamut->parsed()) {
      const TableResult r = run_gamut(gamut_flags.spec());
      print_table_summary(r);
      return r.failed_cells > 0 ? 2 : 0;
    }
    if (ablate->parsed()) {
      const auto sets = parse_layer_sets(layer_sets);
      const TableResult r = run_ablation(ablate_flags.spec(), sets);
      print_table_summary(r);
      return r.failed_cells > 0 ? 2 : 0;
    }
    if (analyze->parsed()) {
      ExperimentSpec spec = analyze_flags.spec();
      if (analyze_flags.layers_opt->count() == 0) spec.layers = model_layers(analyze_model);
      const auto ks = parse_list<int>(topk, [](const std::string& v) { return std::stoi(v); });
      const AnalysisResult r = run_analysis(spec, analyze_model, analyze_split,
                                            split_list(analyze_samples), analyze_class, ks, groups);
      std::cout << "pearson_r " << r.report.pearson_r << "\n";
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
