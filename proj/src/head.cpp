#include "dinomx/head.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dinomx {

void HeadConfig::validate() const {
  if (in_dim < 1 || hidden_dim < 1 || bottleneck_dim < 1 || out_dim < 1) {
    throw std::invalid_argument("head dimensions must be positive");
  }
}

void init_head(ParameterSet& params, const std::string& prefix, const HeadConfig& cfg, Rng& rng) {
  cfg.validate();
  auto trunc = [&](Shape shape) {
    Tensor t(std::move(shape), 0.0f);
    for (float& v : t.data()) v = static_cast<float>(rng.truncated_normal(0.02));
    return t;
  };
  const int dims[4] = {cfg.in_dim, cfg.hidden_dim, cfg.hidden_dim, cfg.bottleneck_dim};
  for (int i = 0; i < 3; ++i) {
    const std::string lp = prefix + ".mlp." + std::to_string(i);
    params[lp + ".weight"] = trunc({dims[i + 1], dims[i]});
    params[lp + ".bias"] = Tensor({dims[i + 1]}, 0.0f);
  }
  params[prefix + ".last.v"] = trunc({cfg.out_dim, cfg.bottleneck_dim});
  params[prefix + ".last.g"] = Tensor({cfg.out_dim}, 1.0f);
}

TrainableSet head_trainable_names(const std::string& prefix, const HeadConfig& cfg) {
  TrainableSet names;
  for (int i = 0; i < 3; ++i) {
    names.insert(prefix + ".mlp." + std::to_string(i) + ".weight");
    names.insert(prefix + ".mlp." + std::to_string(i) + ".bias");
  }
  names.insert(prefix + ".last.v");
  if (!cfg.norm_last_layer) names.insert(prefix + ".last.g");
  return names;
}

template <typename T>
Matrix<T> head_forward(const ParameterSet& params, const std::string& prefix, const HeadConfig& cfg,
                       const Matrix<T>& x, HeadTape* tape) {
  if (x.cols() != cfg.in_dim) {
    throw std::invalid_argument("head input has " + std::to_string(x.cols()) + " features, expected " +
                                std::to_string(cfg.in_dim));
  }
  auto gelu_m = [](const Matrix<T>& m) { return Matrix<T>(m.unaryExpr([](T a) { return gelu(a); })); };
  Matrix<T> pre0 = linear<T>(x, params, prefix + ".mlp.0");
  Matrix<T> act0 = gelu_m(pre0);
  Matrix<T> pre1 = linear<T>(act0, params, prefix + ".mlp.1");
  Matrix<T> act1 = gelu_m(pre1);
  Matrix<T> z = linear<T>(act1, params, prefix + ".mlp.2");

  Eigen::Matrix<T, Eigen::Dynamic, 1> znorm = z.rowwise().norm();
  Matrix<T> zn = z;
  for (Eigen::Index r = 0; r < z.rows(); ++r) zn.row(r) /= std::max(znorm(r), T(kL2NormEps));

  Matrix<T> v = weight<T>(params, prefix + ".last.v");
  Eigen::Matrix<T, Eigen::Dynamic, 1> vnorm = v.rowwise().norm();
  Matrix<T> w = v;
  const bool learn_g = !cfg.norm_last_layer;
  const auto g = bias<T>(params, prefix + ".last.g");
  for (Eigen::Index k = 0; k < v.rows(); ++k) {
    const T scale = (learn_g ? g(k) : T(1)) / vnorm(k);
    w.row(k) *= scale;
  }
  Matrix<T> logits = zn * w.transpose();
  if (tape) {
    if constexpr (std::is_same_v<T, float>) {
      tape->x = x;
      tape->pre0 = std::move(pre0);
      tape->act0 = std::move(act0);
      tape->pre1 = std::move(pre1);
      tape->act1 = std::move(act1);
      tape->z = std::move(z);
      tape->znorm = std::move(znorm);
      tape->zn = std::move(zn);
      tape->w_last = std::move(w);
      tape->vnorm = std::move(vnorm);
    } else {
      throw std::invalid_argument("head tapes are recorded in float precision only");
    }
  }
  return logits;
}

template Matrix<float> head_forward<float>(const ParameterSet&, const std::string&, const HeadConfig&,
                                          const Matrix<float>&, HeadTape*);
template Matrix<double> head_forward<double>(const ParameterSet&, const std::string&, const HeadConfig&,
                                             const Matrix<double>&, HeadTape*);

Matrix<float> head_backward(const ParameterSet& params, const std::string& prefix, const HeadConfig& cfg,
                            const HeadTape& tape, const Matrix<float>& d_logits, const TrainableSet& trainable,
                            ParameterSet& grads) {
  // logits = zn W^T with W_k = g_k v_k / |v_k|.
  const std::string vname = prefix + ".last.v";
  const std::string gname = prefix + ".last.g";
  const bool want_v = trainable.count(vname) > 0;
  const bool want_g = !cfg.norm_last_layer && trainable.count(gname) > 0;
  if (want_v || want_g) {
    Matrix<float> dW = d_logits.transpose() * tape.zn;  // [K, bottleneck]
    const auto v = as_matrix(param(params, vname));
    const auto g = as_row(param(params, gname));
    Tensor* gv = want_v ? &grad_slot(grads, params, vname) : nullptr;
    Tensor* gg = want_g ? &grad_slot(grads, params, gname) : nullptr;
    for (Eigen::Index k = 0; k < dW.rows(); ++k) {
      const float inv = 1.0f / tape.vnorm(k);
      const auto vhat = (v.row(k) * inv).eval();
      const float proj = dW.row(k).dot(vhat);
      if (gg) (*gg)[k] += proj;
      if (gv) {
        const float gk = cfg.norm_last_layer ? 1.0f : g(k);
        as_matrix(*gv).row(k) += (gk * inv) * (dW.row(k) - proj * vhat);
      }
    }
  }
  Matrix<float> dzn = d_logits * tape.w_last;
  Matrix<float> dz(dzn.rows(), dzn.cols());
  for (Eigen::Index r = 0; r < dzn.rows(); ++r) {
    const float s = tape.znorm(r);
    if (s > static_cast<float>(kL2NormEps)) {
      const float dot = dzn.row(r).dot(tape.zn.row(r));
      dz.row(r) = (dzn.row(r) - dot * tape.zn.row(r)) / s;
    } else {
      dz.row(r) = dzn.row(r) / static_cast<float>(kL2NormEps);
    }
  }
  Matrix<float> dact1;
  linear_backward(tape.act1, dz, params, prefix + ".mlp.2", trainable, grads, &dact1);
  Matrix<float> dpre1 = dact1.array() * tape.pre1.unaryExpr([](float a) { return gelu_grad(a); }).array();
  Matrix<float> dact0;
  linear_backward(tape.act0, dpre1, params, prefix + ".mlp.1", trainable, grads, &dact0);
  Matrix<float> dpre0 = dact0.array() * tape.pre0.unaryExpr([](float a) { return gelu_grad(a); }).array();
  Matrix<float> dx;
  linear_backward(tape.x, dpre0, params, prefix + ".mlp.0", trainable, grads, &dx);
  return dx;
}

Tensor head_forward(const ParameterSet& params, const std::string& prefix, const HeadConfig& cfg,
                    const Tensor& feature) {
  if (static_cast<int>(feature.numel()) != cfg.in_dim) {
    throw std::invalid_argument("head input has " + std::to_string(feature.numel()) + " features, expected " +
                                std::to_string(cfg.in_dim));
  }
  Matrix<float> x = as_row(feature);
  Matrix<float> y = head_forward<float>(params, prefix, cfg, x, nullptr);
  return Tensor({cfg.out_dim}, std::vector<float>(y.data(), y.data() + y.size()));
}

}  // namespace dinomx
