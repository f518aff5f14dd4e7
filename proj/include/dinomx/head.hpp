#pragma once

#include <string>

#include "dinomx/matrix.hpp"
#include "dinomx/rng.hpp"

namespace dinomx {

/// MLP (in -> hidden -> hidden -> bottleneck), L2 normalization, then a
/// weight-normalized projection to out_dim logits. Parameters are stored as
///   <prefix>.mlp.{0,1,2}.{weight,bias}, <prefix>.last.v [K, bottleneck], <prefix>.last.g [K].
struct HeadConfig {
  int in_dim = 64;
  int hidden_dim = 256;
  int bottleneck_dim = 64;
  int out_dim = 1024;
  bool norm_last_layer = false;  // true pins the weight-norm scale g at 1

  void validate() const;
  bool operator==(const HeadConfig&) const = default;
};

/// Guard on the bottleneck normalization: x / max(|x|, eps).
constexpr double kL2NormEps = 1e-6;

struct HeadTape {
  Matrix<float> x, pre0, act0, pre1, act1, z;
  Eigen::VectorXf znorm;
  Matrix<float> zn;
  Matrix<float> w_last;  // effective g * v / |v|
  Eigen::VectorXf vnorm;
};

void init_head(ParameterSet& params, const std::string& prefix, const HeadConfig& cfg, Rng& rng);

/// Names of the head's trainable tensors (g omitted under norm_last_layer).
TrainableSet head_trainable_names(const std::string& prefix, const HeadConfig& cfg);

template <typename T>
Matrix<T> head_forward(const ParameterSet& params, const std::string& prefix, const HeadConfig& cfg,
                       const Matrix<T>& features, HeadTape* tape = nullptr);

/// Returns d features; accumulates parameter gradients for trainable names.
Matrix<float> head_backward(const ParameterSet& params, const std::string& prefix, const HeadConfig& cfg,
                            const HeadTape& tape, const Matrix<float>& d_logits, const TrainableSet& trainable,
                            ParameterSet& grads);

/// Single-vector convenience wrapper.
Tensor head_forward(const ParameterSet& params, const std::string& prefix, const HeadConfig& cfg,
                    const Tensor& feature);

}  // namespace dinomx
