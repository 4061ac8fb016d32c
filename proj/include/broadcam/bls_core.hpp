// bls_core.hpp - broad learning system used to derive CAM weights.
//
// Feature nodes Z are GAP-squeezed multi-layer features. A first ridge fit
// on Z gives class-relevance weights that seed the enhancement mapping
// H = f(Z * theta_H + beta_H). A second ridge fit on A = [Z | H] gives
// W_BLS = [W_Z; W_H], which collapses to
//
//   Y = Z * (W_Z + theta_H * W_H) + beta_H * W_H = Z * W_broadcam + sigma
//
// so W_broadcam holds one weight per (channel, class).
#pragma once

#include <Eigen/Dense>

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "broadcam/tensor_io.hpp"

namespace broadcam {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

// Column range [begin, end) of one layer inside the broad feature matrix.
struct LayerSpan {
  int layer_index = 0;
  int begin = 0;
  int end = 0;

  int size() const { return end - begin; }
  bool operator==(const LayerSpan&) const = default;
};

struct BroadFeatureMatrix {
  Matrix data;  // N samples x D features
  std::vector<LayerSpan> layer_offsets;
  std::vector<std::string> sample_ids;

  int num_features() const { return static_cast<int>(data.cols()); }
};

enum class Activation { kIdentity, kScaledTanh };

std::string_view to_string(Activation a);
Activation parse_activation(std::string_view name);

struct BLSModel {
  double lambda = 1.0;
  Activation activation = Activation::kIdentity;
  double activation_scale = 1.0;  // s of scaled_tanh, 1 for identity
  Matrix theta_H;                 // D x E
  RowVector beta_H;               // E
  Matrix W_Z;                     // D x K
  Matrix W_H;                     // E x K
  Matrix W_broadcam;              // D x K
  RowVector sigma;                // K
  std::vector<LayerSpan> layer_offsets;
  std::vector<std::string> class_names;

  int num_features() const { return static_cast<int>(W_broadcam.rows()); }
  int num_classes() const { return static_cast<int>(W_broadcam.cols()); }
  int enhance_nodes() const { return static_cast<int>(theta_H.cols()); }
  // [W_Z; W_H] stacked, i.e. the weights of the expanded matrix A.
  Matrix W_bls() const;
};

struct BLSOptions {
  double lambda = 1.0;
  int enhance_nodes = 0;  // 0 = one node per class
  Activation activation = Activation::kIdentity;
  std::optional<Matrix> theta_override;  // replaces the W_init-derived theta_H
};

// Spatial mean of every channel.
Vector gap(const Tensor3& tensor);

// Rows follow `stacks`; columns concatenate gap() of the requested layers in
// ascending layer order.
BroadFeatureMatrix build_broad_matrix(std::span<const FeatureStack> stacks,
                                      std::span<const int> layers);
BroadFeatureMatrix build_broad_matrix(std::span<const FeatureStack* const> stacks,
                                      std::span<const int> layers);

// Minimizer of |A W - Y|^2 + lambda |W|^2. Uses the primal system when
// N >= M (or lambda == 0) and the dual system otherwise.
Matrix ridge_solve(const Matrix& A, const Matrix& Y, double lambda);
// (lambda I_M + A^T A) W = A^T Y
Matrix ridge_solve_primal(const Matrix& A, const Matrix& Y, double lambda);
// W = A^T (lambda I_N + A A^T)^{-1} Y, requires lambda > 0
Matrix ridge_solve_dual(const Matrix& A, const Matrix& Y, double lambda);

Matrix enhance_map(const Matrix& Z, const Matrix& theta_H, const RowVector& beta_H,
                   Activation activation = Activation::kIdentity);
// Same map with an explicit tanh scale (ignored for identity).
Matrix enhance_map(const Matrix& Z, const Matrix& theta_H, const RowVector& beta_H,
                   Activation activation, double scale);

// theta_H from the first-stage ridge weights: W_init itself when E == K,
// otherwise W_init columns cycled and l2-normalized.
Matrix init_enhance_weights(const Matrix& W_init, int enhance_nodes);

BLSModel fit_bls(const BroadFeatureMatrix& Z, const Matrix& Y, const BLSOptions& options = {});

RowVector predict(const BLSModel& model, const RowVector& z_row);

// Expanded matrix A = [Z | H] for a fitted model.
Matrix expanded_features(const BLSModel& model, const Matrix& Z);

// Multi-hot target matrix for the given sample order.
Matrix label_matrix(const LabelTable& labels, std::span<const std::string> sample_ids);

}  // namespace broadcam
