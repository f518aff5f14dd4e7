#include "dinomx/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace dinomx {

void adamw_step(ParameterSet& params, const ParameterSet& grads, AdamState& state, double lr, double weight_decay,
                const AdamWConfig& cfg, const std::set<std::string>* owned) {
  for (const auto& [name, g] : grads) {
    if (owned && !owned->count(name)) continue;
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("gradient for unknown parameter '" + name + "'");
    Tensor& p = it->second;
    if (p.shape() != g.shape()) throw std::invalid_argument("gradient shape mismatch for '" + name + "'");
    auto mi = state.m.try_emplace(name, p.shape(), 0.0f).first;
    auto vi = state.v.try_emplace(name, p.shape(), 0.0f).first;
    const auto step = ++state.steps[name];
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    float* pd = p.data().data();
    float* md = mi->second.data().data();
    float* vd = vi->second.data().data();
    const float* gd = g.data().data();
    const bool decay = p.ndim() >= 2 && weight_decay > 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = gd[i];
      const double m = cfg.beta1 * md[i] + (1.0 - cfg.beta1) * gi;
      const double v = cfg.beta2 * vd[i] + (1.0 - cfg.beta2) * gi * gi;
      md[i] = static_cast<float>(m);
      vd[i] = static_cast<float>(v);
      double x = pd[i];
      if (decay) x -= lr * weight_decay * x;
      x -= lr * (m / bc1) / (std::sqrt(v / bc2) + cfg.eps);
      pd[i] = static_cast<float>(x);
    }
  }
}

double grad_sq_norm(const ParameterSet& grads, const std::set<std::string>* owned) {
  double sq = 0.0;
  for (const auto& [name, g] : grads) {
    if (owned && !owned->count(name)) continue;
    for (float v : g.data()) sq += static_cast<double>(v) * v;
  }
  return sq;
}

double clip_to_norm(ParameterSet& grads, double norm, double max_norm) {
  if (max_norm <= 0.0 || norm <= max_norm) return 1.0;
  const double scale = max_norm / (norm + 1e-6);
  for (auto& [name, g] : grads) {
    for (float& v : g.data()) v = static_cast<float>(v * scale);
  }
  return scale;
}

double clip_grad_norm(ParameterSet& grads, double max_norm) {
  const double norm = std::sqrt(grad_sq_norm(grads));
  clip_to_norm(grads, norm, max_norm);
  return norm;
}

void drop_gradients(ParameterSet& grads, const std::string& prefix) {
  std::erase_if(grads, [&](const auto& kv) { return kv.first.compare(0, prefix.size(), prefix) == 0; });
}

}  // namespace dinomx
