#pragma once

// Eigen views over Tensor storage plus the handful of dense kernels shared by
// the encoder and the heads. Templated on the scalar so the gradient checker
// can evaluate the same forward path in double precision.

#include <Eigen/Dense>
#include <cmath>
#include <set>
#include <stdexcept>
#include <string>

#include "dinomx/tensor.hpp"

namespace dinomx {

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using RowVector = Eigen::Matrix<T, 1, Eigen::Dynamic>;

using MatrixMap = Eigen::Map<Matrix<float>>;
using ConstMatrixMap = Eigen::Map<const Matrix<float>>;
using ConstRowMap = Eigen::Map<const RowVector<float>>;
using RowMap = Eigen::Map<RowVector<float>>;

/// Set of parameter names that receive gradients.
using TrainableSet = std::set<std::string>;

inline const Tensor& param(const ParameterSet& params, const std::string& name) {
  auto it = params.find(name);
  if (it == params.end()) throw std::out_of_range("missing parameter " + name);
  return it->second;
}

/// Views a rank-2 tensor (or rank-1 as a single row) as a row-major matrix.
inline ConstMatrixMap as_matrix(const Tensor& t) {
  const auto rows = t.ndim() == 1 ? 1 : t.dim(0);
  const auto cols = t.ndim() == 1 ? t.dim(0) : static_cast<std::int64_t>(t.numel()) / t.dim(0);
  return ConstMatrixMap(t.data().data(), rows, cols);
}
inline MatrixMap as_matrix(Tensor& t) {
  const auto rows = t.ndim() == 1 ? 1 : t.dim(0);
  const auto cols = t.ndim() == 1 ? t.dim(0) : static_cast<std::int64_t>(t.numel()) / t.dim(0);
  return MatrixMap(t.data().data(), rows, cols);
}
inline ConstRowMap as_row(const Tensor& t) {
  return ConstRowMap(t.data().data(), static_cast<Eigen::Index>(t.numel()));
}

template <typename T>
Matrix<T> weight(const ParameterSet& params, const std::string& name) {
  return as_matrix(param(params, name)).template cast<T>();
}
template <typename T>
RowVector<T> bias(const ParameterSet& params, const std::string& name) {
  return as_row(param(params, name)).template cast<T>();
}

inline Tensor to_tensor(const Matrix<float>& m) {
  return Tensor({m.rows(), m.cols()}, std::vector<float>(m.data(), m.data() + m.size()));
}

/// Returns the gradient accumulator for `name`, creating a zero tensor shaped
/// like the parameter on first use.
inline Tensor& grad_slot(ParameterSet& grads, const ParameterSet& params, const std::string& name) {
  auto it = grads.find(name);
  if (it != grads.end()) return it->second;
  return grads.emplace(name, Tensor(param(params, name).shape(), 0.0f)).first->second;
}

/// y = x W^T + b for W [out, in].
template <typename T>
Matrix<T> linear(const Matrix<T>& x, const ParameterSet& params, const std::string& prefix) {
  Matrix<T> y = x * as_matrix(param(params, prefix + ".weight")).template cast<T>().transpose();
  y.rowwise() += as_row(param(params, prefix + ".bias")).template cast<T>();
  return y;
}

/// Accumulates dW, db for a linear layer when trainable; returns dx if requested.
inline void linear_backward(const Matrix<float>& x, const Matrix<float>& dy, const ParameterSet& params,
                            const std::string& prefix, const TrainableSet& trainable, ParameterSet& grads,
                            Matrix<float>* dx) {
  const std::string wname = prefix + ".weight";
  const std::string bname = prefix + ".bias";
  if (trainable.count(wname)) as_matrix(grad_slot(grads, params, wname)).noalias() += dy.transpose() * x;
  if (trainable.count(bname)) as_matrix(grad_slot(grads, params, bname)) += dy.colwise().sum();
  if (dx) dx->noalias() = dy * as_matrix(param(params, wname));
}

template <typename T>
T gelu(T x) {
  return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}
inline float gelu_grad(float x) {
  constexpr float kInvSqrt2 = 0.70710678118654752f;
  constexpr float kInvSqrt2Pi = 0.39894228040143268f;
  return 0.5f * (1.0f + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5f * x * x);
}

constexpr double kLayerNormEps = 1e-6;

struct LayerNormCache {
  Matrix<float> xhat;
  Eigen::VectorXf rstd;
};

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const ParameterSet& params, const std::string& prefix,
                     LayerNormCache* cache) {
  const auto d = x.cols();
  Matrix<T> xhat(x.rows(), d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    T mean = x.row(r).mean();
    auto centered = (x.row(r).array() - mean).eval();
    T var = centered.square().mean();
    rstd(r) = T(1) / std::sqrt(var + T(kLayerNormEps));
    xhat.row(r) = centered * rstd(r);
  }
  Matrix<T> y = xhat;
  y.array().rowwise() *= as_row(param(params, prefix + ".weight")).template cast<T>().array();
  y.rowwise() += as_row(param(params, prefix + ".bias")).template cast<T>();
  if (cache) {
    if constexpr (std::is_same_v<T, float>) {
      cache->xhat = std::move(xhat);
      cache->rstd = std::move(rstd);
    }
  }
  return y;
}

inline Matrix<float> layer_norm_backward(const LayerNormCache& cache, const Matrix<float>& dy,
                                         const ParameterSet& params, const std::string& prefix,
                                         const TrainableSet& trainable, ParameterSet& grads) {
  const std::string wname = prefix + ".weight";
  const std::string bname = prefix + ".bias";
  if (trainable.count(wname)) {
    as_matrix(grad_slot(grads, params, wname)) += (dy.array() * cache.xhat.array()).colwise().sum().matrix();
  }
  if (trainable.count(bname)) as_matrix(grad_slot(grads, params, bname)) += dy.colwise().sum();
  Matrix<float> dxhat = dy;
  dxhat.array().rowwise() *= as_row(param(params, wname)).array();
  const float inv_d = 1.0f / static_cast<float>(dy.cols());
  Matrix<float> dx(dy.rows(), dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const float mean_g = dxhat.row(r).sum() * inv_d;
    const float mean_gx = dxhat.row(r).dot(cache.xhat.row(r)) * inv_d;
    dx.row(r) = cache.rstd(r) * (dxhat.row(r).array() - mean_g - cache.xhat.row(r).array() * mean_gx).matrix();
  }
  return dx;
}

template <typename T>
void softmax_rows_inplace(Matrix<T>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const T mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

}  // namespace dinomx
