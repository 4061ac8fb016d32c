#include "broadcam/model_store.hpp"

#include <fstream>

#include "broadcam/errors.hpp"
#include "broadcam/hashing.hpp"
#include "broadcam/npy.hpp"

namespace broadcam {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

// Eigen is column-major; NPY rows are C-order.
void write_matrix(const fs::path& path, const Matrix& m) {
  using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
  const RowMajor rm = m;
  const std::size_t shape[2] = {static_cast<std::size_t>(m.rows()),
                                static_cast<std::size_t>(m.cols())};
  npy::write(path, shape, std::span<const double>(rm.data(), static_cast<std::size_t>(rm.size())));
}

void write_row(const fs::path& path, const RowVector& v) {
  const std::size_t shape[1] = {static_cast<std::size_t>(v.size())};
  npy::write(path, shape, std::span<const double>(v.data(), static_cast<std::size_t>(v.size())));
}

Matrix read_matrix(const fs::path& path) {
  const npy::Array a = npy::read(path);
  if (a.shape.size() != 2) throw Error(ErrorCode::kShapeMismatch, path.string() + ": expected 2-D");
  Matrix m(static_cast<Eigen::Index>(a.shape[0]), static_cast<Eigen::Index>(a.shape[1]));
  for (std::size_t r = 0; r < a.shape[0]; ++r) {
    for (std::size_t c = 0; c < a.shape[1]; ++c) {
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = a.values[r * a.shape[1] + c];
    }
  }
  return m;
}

RowVector read_row(const fs::path& path) {
  const npy::Array a = npy::read(path);
  if (a.shape.size() != 1) throw Error(ErrorCode::kShapeMismatch, path.string() + ": expected 1-D");
  RowVector v(static_cast<Eigen::Index>(a.shape[0]));
  for (std::size_t i = 0; i < a.shape[0]; ++i) v[static_cast<Eigen::Index>(i)] = a.values[i];
  return v;
}

std::string hash_arrays(const fs::path& dir, const std::vector<std::string>& names) {
  Sha256 h;
  for (const auto& n : names) h.update(n).update_file(dir / (n + ".npy"));
  return h.hex_digest();
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kBadFormat, path.string() + ": " + e.what());
  }
}

const std::vector<std::string> kBlsArrays = {"theta_H", "beta_H", "W_Z", "W_H", "W_broadcam",
                                             "sigma"};
const std::vector<std::string> kGdArrays = {"weights", "bias"};

}  // namespace

json layer_offsets_json(const std::vector<LayerSpan>& offsets) {
  json j = json::array();
  for (const auto& s : offsets) j.push_back({{"layer", s.layer_index}, {"begin", s.begin}, {"end", s.end}});
  return j;
}

std::vector<LayerSpan> layer_offsets_from_json(const json& j) {
  std::vector<LayerSpan> out;
  for (const auto& s : j) {
    out.push_back({s.at("layer").get<int>(), s.at("begin").get<int>(), s.at("end").get<int>()});
  }
  return out;
}

std::string save_bls_model(const BLSModel& model, const fs::path& dir, const json& extra) {
  fs::create_directories(dir);
  write_matrix(dir / "theta_H.npy", model.theta_H);
  write_row(dir / "beta_H.npy", model.beta_H);
  write_matrix(dir / "W_Z.npy", model.W_Z);
  write_matrix(dir / "W_H.npy", model.W_H);
  write_matrix(dir / "W_broadcam.npy", model.W_broadcam);
  write_row(dir / "sigma.npy", model.sigma);
  const std::string hash = hash_arrays(dir, kBlsArrays);

  json meta = extra;
  meta["method"] = "broadcam";
  meta["lambda"] = model.lambda;
  meta["enhance_nodes"] = model.enhance_nodes();
  meta["activation"] = std::string(to_string(model.activation));
  meta["activation_scale"] = model.activation_scale;
  meta["layer_offsets"] = layer_offsets_json(model.layer_offsets);
  meta["class_names"] = model.class_names;
  meta["model_hash"] = hash;
  write_file_atomic(dir / "model.json", meta.dump(2) + "\n");
  return hash;
}

std::string save_gd_model(const GDClassifier& model, const std::vector<LayerSpan>& offsets,
                          const std::vector<std::string>& class_names, const fs::path& dir,
                          const json& extra) {
  fs::create_directories(dir);
  write_matrix(dir / "weights.npy", model.weights);
  write_row(dir / "bias.npy", model.bias);
  const std::string hash = hash_arrays(dir, kGdArrays);

  json meta = extra;
  meta["method"] = "gd_baseline";
  json log = json::array();
  for (const auto& [epoch, loss] : model.training_log) log.push_back({{"epoch", epoch}, {"loss", loss}});
  meta["training_log"] = log;
  meta["layer_offsets"] = layer_offsets_json(offsets);
  meta["class_names"] = class_names;
  meta["model_hash"] = hash;
  write_file_atomic(dir / "model.json", meta.dump(2) + "\n");
  return hash;
}

BLSModel load_bls_model(const fs::path& dir) {
  const json meta = read_json(dir / "model.json");
  if (meta.value("method", "") != "broadcam") {
    throw Error(ErrorCode::kBadFormat, dir.string() + " does not hold a broadcam model");
  }
  BLSModel m;
  m.lambda = meta.at("lambda").get<double>();
  m.activation = parse_activation(meta.at("activation").get<std::string>());
  m.activation_scale = meta.value("activation_scale", 1.0);
  m.layer_offsets = layer_offsets_from_json(meta.at("layer_offsets"));
  m.class_names = meta.value("class_names", std::vector<std::string>{});
  m.theta_H = read_matrix(dir / "theta_H.npy");
  m.beta_H = read_row(dir / "beta_H.npy");
  m.W_Z = read_matrix(dir / "W_Z.npy");
  m.W_H = read_matrix(dir / "W_H.npy");
  m.W_broadcam = read_matrix(dir / "W_broadcam.npy");
  m.sigma = read_row(dir / "sigma.npy");
  return m;
}

StoredModel load_model(const fs::path& dir) {
  const json meta = read_json(dir / "model.json");
  StoredModel out;
  out.method = meta.value("method", "");
  out.metadata = meta;
  out.class_names = meta.value("class_names", std::vector<std::string>{});
  if (out.method == "broadcam") {
    const BLSModel m = load_bls_model(dir);
    out.weights = cam_weights(m);
    out.bias = m.sigma;
  } else if (out.method == "gd_baseline") {
    out.weights.weights = read_matrix(dir / "weights.npy");
    out.weights.layer_offsets = layer_offsets_from_json(meta.at("layer_offsets"));
    out.bias = read_row(dir / "bias.npy");
  } else {
    throw Error(ErrorCode::kBadFormat, dir.string() + ": unknown model method '" + out.method + "'");
  }
  return out;
}

}  // namespace broadcam
