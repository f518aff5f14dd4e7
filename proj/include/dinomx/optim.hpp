#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <string>

#include "dinomx/tensor.hpp"

namespace dinomx {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// First/second moments keyed like the parameters; `steps` counts the
/// updates each tensor has received (bias correction is per tensor).
struct AdamState {
  ParameterSet m;
  ParameterSet v;
  std::map<std::string, std::int64_t> steps;
};

/// Decoupled-weight-decay Adam. Only names present in `grads` move; decay
/// applies to tensors of rank >= 2. `owned`, when given, restricts the update
/// to that subset (sharded mode).
void adamw_step(ParameterSet& params, const ParameterSet& grads, AdamState& state, double lr, double weight_decay,
                const AdamWConfig& cfg = {}, const std::set<std::string>* owned = nullptr);

double grad_sq_norm(const ParameterSet& grads, const std::set<std::string>* owned = nullptr);

/// Rescales `grads` so the global norm is at most max_norm. `norm` is the
/// precomputed global norm. Returns the scale applied.
double clip_to_norm(ParameterSet& grads, double norm, double max_norm);

/// Convenience: global-norm clip computed from `grads` alone. Returns the pre-clip norm.
double clip_grad_norm(ParameterSet& grads, double max_norm);

/// Drops gradient entries whose name starts with `prefix`.
void drop_gradients(ParameterSet& grads, const std::string& prefix);

}  // namespace dinomx
