// model_store.hpp - persistence for fitted weight models.
//
// A model directory holds one '<f8' NPY per array plus model.json with the
// scalar settings, layer layout, class names and a SHA-256 over the array
// files ("model_hash").
//   broadcam:    theta_H, beta_H, W_Z, W_H, W_broadcam, sigma
//   gd_baseline: weights, bias
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "broadcam/bls_core.hpp"
#include "broadcam/cam_gen.hpp"
#include "broadcam/synth_baseline.hpp"

namespace broadcam {

struct StoredModel {
  std::string method;  // "broadcam" or "gd_baseline"
  CamWeights weights;
  RowVector bias;
  std::vector<std::string> class_names;
  nlohmann::json metadata;
};

nlohmann::json layer_offsets_json(const std::vector<LayerSpan>& offsets);
std::vector<LayerSpan> layer_offsets_from_json(const nlohmann::json& j);

// Both return the model hash. `extra` is merged into model.json.
std::string save_bls_model(const BLSModel& model, const std::filesystem::path& dir,
                           const nlohmann::json& extra = nlohmann::json::object());
std::string save_gd_model(const GDClassifier& model, const std::vector<LayerSpan>& offsets,
                          const std::vector<std::string>& class_names,
                          const std::filesystem::path& dir,
                          const nlohmann::json& extra = nlohmann::json::object());

BLSModel load_bls_model(const std::filesystem::path& dir);
StoredModel load_model(const std::filesystem::path& dir);

}  // namespace broadcam
