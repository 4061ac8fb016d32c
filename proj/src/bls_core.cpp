#include "broadcam/bls_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "broadcam/errors.hpp"

namespace broadcam {
namespace {

void require_finite(const Matrix& m, const char* what) {
  if (!m.allFinite()) {
    throw Error(ErrorCode::kNonFiniteInput, std::string(what) + " has non-finite entries");
  }
}

// Solves S X = B for symmetric S. Cholesky first; symmetric eigendecomposition
// when the factorization reports a non-positive pivot.
Matrix solve_spd(const Matrix& S, const Matrix& B) {
  Eigen::LLT<Matrix> llt(S);
  if (llt.info() == Eigen::Success) return llt.solve(B);

  Eigen::SelfAdjointEigenSolver<Matrix> eig(S);
  if (eig.info() != Eigen::Success) {
    throw Error(ErrorCode::kSingularSystem, "eigendecomposition of the gram matrix failed");
  }
  const Vector& values = eig.eigenvalues();
  const double tol = static_cast<double>(S.rows()) * std::numeric_limits<double>::epsilon() *
                     std::max(values.cwiseAbs().maxCoeff(), 1e-300);
  if (values.minCoeff() <= tol) {
    throw Error(ErrorCode::kSingularSystem, "regularized gram matrix is singular");
  }
  const Matrix& V = eig.eigenvectors();
  return V * (values.cwiseInverse().asDiagonal() * (V.transpose() * B));
}

void check_ridge_inputs(const Matrix& A, const Matrix& Y, double lambda) {
  if (A.rows() != Y.rows()) {
    throw Error(ErrorCode::kDimensionMismatch, "ridge: A and Y row counts differ");
  }
  if (A.rows() == 0 || A.cols() == 0 || Y.cols() == 0) {
    throw Error(ErrorCode::kInvalidArgument, "ridge: empty system");
  }
  if (!std::isfinite(lambda) || lambda < 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "ridge: lambda must be finite and >= 0");
  }
  require_finite(A, "ridge design matrix");
  require_finite(Y, "ridge targets");
}

}  // namespace

std::string_view to_string(Activation a) {
  return a == Activation::kIdentity ? "identity" : "scaled_tanh";
}

Activation parse_activation(std::string_view name) {
  if (name == "identity") return Activation::kIdentity;
  if (name == "scaled_tanh") return Activation::kScaledTanh;
  throw Error(ErrorCode::kInvalidArgument, "unknown activation " + std::string(name));
}

Matrix BLSModel::W_bls() const {
  Matrix w(W_Z.rows() + W_H.rows(), W_Z.cols());
  w << W_Z, W_H;
  return w;
}

Vector gap(const Tensor3& tensor) {
  const std::size_t plane = tensor.plane_size();
  if (plane == 0) throw Error(ErrorCode::kInvalidArgument, "gap: empty spatial grid");
  Vector out(tensor.channels);
  for (int c = 0; c < tensor.channels; ++c) {
    double sum = 0.0;
    for (float v : tensor.channel(c)) sum += v;
    out[c] = sum / static_cast<double>(plane);
  }
  return out;
}

BroadFeatureMatrix build_broad_matrix(std::span<const FeatureStack> stacks,
                                      std::span<const int> layers) {
  std::vector<const FeatureStack*> ptrs;
  ptrs.reserve(stacks.size());
  for (const auto& s : stacks) ptrs.push_back(&s);
  return build_broad_matrix(std::span<const FeatureStack* const>(ptrs), layers);
}

BroadFeatureMatrix build_broad_matrix(std::span<const FeatureStack* const> stacks,
                                      std::span<const int> layers) {
  if (stacks.empty()) throw Error(ErrorCode::kInvalidArgument, "no samples");
  if (layers.empty()) throw Error(ErrorCode::kInvalidArgument, "no layers selected");
  std::vector<int> order(layers.begin(), layers.end());
  std::sort(order.begin(), order.end());
  if (std::adjacent_find(order.begin(), order.end()) != order.end()) {
    throw Error(ErrorCode::kDuplicateLayer, "layer selected twice");
  }

  BroadFeatureMatrix out;
  int offset = 0;
  std::vector<const Tensor3*> reference;
  for (int j : order) {
    const Tensor3& t = stacks.front()->layer(j);
    reference.push_back(&t);
    out.layer_offsets.push_back({j, offset, offset + t.channels});
    offset += t.channels;
  }
  out.data.resize(static_cast<Eigen::Index>(stacks.size()), offset);
  for (std::size_t i = 0; i < stacks.size(); ++i) {
    const auto& stack = *stacks[i];
    out.sample_ids.push_back(stack.sample_id);
    for (std::size_t l = 0; l < order.size(); ++l) {
      const Tensor3& t = stack.layer(order[l]);
      if (!t.same_shape(*reference[l])) {
        throw Error(ErrorCode::kShapeMismatch,
                    "sample " + stack.sample_id + " layer " + std::to_string(order[l]) +
                        " shape differs from sample " + stacks.front()->sample_id);
      }
      out.data.block(static_cast<Eigen::Index>(i), out.layer_offsets[l].begin, 1, t.channels) =
          gap(t).transpose();
    }
  }
  return out;
}

Matrix ridge_solve_primal(const Matrix& A, const Matrix& Y, double lambda) {
  check_ridge_inputs(A, Y, lambda);
  Matrix gram = A.transpose() * A;
  if (lambda == 0.0) {
    Eigen::SelfAdjointEigenSolver<Matrix> eig(gram, Eigen::EigenvaluesOnly);
    const Vector& values = eig.eigenvalues();
    const double top = std::max(values.cwiseAbs().maxCoeff(), 1e-300);
    if (values.minCoeff() <= static_cast<double>(gram.rows()) * 1e-12 * top) {
      throw Error(ErrorCode::kSingularSystem, "lambda == 0 and A^T A is singular");
    }
  } else {
    gram.diagonal().array() += lambda;
  }
  return solve_spd(gram, A.transpose() * Y);
}

Matrix ridge_solve_dual(const Matrix& A, const Matrix& Y, double lambda) {
  check_ridge_inputs(A, Y, lambda);
  if (lambda <= 0.0) {
    throw Error(ErrorCode::kInvalidArgument, "dual ridge form requires lambda > 0");
  }
  Matrix kernel = A * A.transpose();
  kernel.diagonal().array() += lambda;
  return A.transpose() * solve_spd(kernel, Y);
}

Matrix ridge_solve(const Matrix& A, const Matrix& Y, double lambda) {
  if (lambda > 0.0 && A.rows() < A.cols()) return ridge_solve_dual(A, Y, lambda);
  return ridge_solve_primal(A, Y, lambda);
}

Matrix enhance_map(const Matrix& Z, const Matrix& theta_H, const RowVector& beta_H,
                   Activation activation, double scale) {
  if (Z.cols() != theta_H.rows() || theta_H.cols() != beta_H.size()) {
    throw Error(ErrorCode::kDimensionMismatch, "enhance_map: shapes do not agree");
  }
  Matrix H = Z * theta_H;
  H.rowwise() += beta_H;
  if (activation == Activation::kScaledTanh && scale > 0.0) {
    H = ((H.array() / scale).tanh() * scale).matrix();
  }
  return H;
}

Matrix enhance_map(const Matrix& Z, const Matrix& theta_H, const RowVector& beta_H,
                   Activation activation) {
  double scale = 1.0;
  if (activation == Activation::kScaledTanh && Z.cols() == theta_H.rows()) {
    scale = (Z * theta_H).colwise().norm().maxCoeff();
  }
  return enhance_map(Z, theta_H, beta_H, activation, scale);
}

Matrix init_enhance_weights(const Matrix& W_init, int enhance_nodes) {
  if (enhance_nodes < 1) throw Error(ErrorCode::kInvalidArgument, "enhance_nodes must be >= 1");
  const auto k = W_init.cols();
  if (enhance_nodes == k) return W_init;
  Matrix theta(W_init.rows(), enhance_nodes);
  for (int e = 0; e < enhance_nodes; ++e) {
    const auto col = W_init.col(e % k);
    const double norm = col.norm();
    theta.col(e) = norm > 0.0 ? Vector(col / norm) : Vector(col);
  }
  return theta;
}

BLSModel fit_bls(const BroadFeatureMatrix& Z, const Matrix& Y, const BLSOptions& options) {
  const auto n = Z.data.rows();
  const auto d = Z.data.cols();
  if (n < 1 || d < 1) throw Error(ErrorCode::kInvalidArgument, "fit_bls: empty feature matrix");
  if (Y.rows() != n) throw Error(ErrorCode::kDimensionMismatch, "fit_bls: Y rows != samples");
  if (Y.cols() < 1) throw Error(ErrorCode::kInvalidArgument, "fit_bls: no classes");
  const int k = static_cast<int>(Y.cols());
  const int e = options.enhance_nodes > 0 ? options.enhance_nodes : k;

  BLSModel model;
  model.lambda = options.lambda;
  model.activation = options.activation;
  model.layer_offsets = Z.layer_offsets;

  const Matrix W_init = ridge_solve(Z.data, Y, options.lambda);
  if (options.theta_override) {
    if (options.theta_override->rows() != d) {
      throw Error(ErrorCode::kDimensionMismatch, "theta override must have D rows");
    }
    model.theta_H = *options.theta_override;
  } else {
    model.theta_H = init_enhance_weights(W_init, e);
  }
  model.beta_H = RowVector::Zero(model.theta_H.cols());

  if (model.activation == Activation::kScaledTanh) {
    model.activation_scale = (Z.data * model.theta_H).colwise().norm().maxCoeff();
  }
  const Matrix H = enhance_map(Z.data, model.theta_H, model.beta_H, model.activation,
                               model.activation_scale);

  Matrix A(n, d + H.cols());
  A << Z.data, H;
  const Matrix W = ridge_solve(A, Y, options.lambda);
  model.W_Z = W.topRows(d);
  model.W_H = W.bottomRows(H.cols());
  model.W_broadcam = model.W_Z + model.theta_H * model.W_H;
  model.sigma = model.beta_H * model.W_H;
  if (!model.W_broadcam.allFinite() || !model.sigma.allFinite()) {
    throw Error(ErrorCode::kSingularSystem, "fit_bls produced non-finite weights");
  }
  return model;
}

RowVector predict(const BLSModel& model, const RowVector& z_row) {
  if (z_row.size() != model.num_features()) {
    throw Error(ErrorCode::kDimensionMismatch,
                "predict: row has " + std::to_string(z_row.size()) + " features, model expects " +
                    std::to_string(model.num_features()));
  }
  return z_row * model.W_broadcam + model.sigma;
}

Matrix expanded_features(const BLSModel& model, const Matrix& Z) {
  const Matrix H = enhance_map(Z, model.theta_H, model.beta_H, model.activation,
                               model.activation_scale);
  Matrix A(Z.rows(), Z.cols() + H.cols());
  A << Z, H;
  return A;
}

Matrix label_matrix(const LabelTable& labels, std::span<const std::string> sample_ids) {
  Matrix Y(static_cast<Eigen::Index>(sample_ids.size()), labels.num_classes());
  for (std::size_t i = 0; i < sample_ids.size(); ++i) {
    const auto& row = labels.row(sample_ids[i]);
    for (int k = 0; k < labels.num_classes(); ++k) {
      Y(static_cast<Eigen::Index>(i), k) = row[k];
    }
  }
  return Y;
}

}  // namespace broadcam
