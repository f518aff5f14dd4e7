#pragma once

#include <string>
#include <vector>

#include "dinomx/vit.hpp"

namespace dinomx {

/// One low-rank update for a [d, k] weight: delta = scaling * B A, A [r, k], B [d, r].
struct LoraAdapter {
  Tensor A;
  Tensor B;
  double scaling = 1.0;
  double dropout = 0.0;
};

LoraAdapter make_adapter(int d, int k, const LoraConfig& cfg, Rng& rng);

/// h = W0 x + scaling * B (A x). Dropout hits the adapter branch input only,
/// and only when `rng` is supplied (training mode).
Tensor lora_forward(const LoraAdapter& adapter, const Tensor& w0, const Tensor& x, Rng* rng = nullptr);

Tensor merge_lora(const LoraAdapter& adapter, const Tensor& w0);
Tensor unmerge_lora(const LoraAdapter& adapter, const Tensor& merged);

/// LoraConfig with targets given by name ("Q", "v", ...); unknown names throw.
LoraConfig make_lora_config(int r, double alpha, double dropout, const std::vector<std::string>& targets);

/// Adds `lora.<layer>.<target>.{A,B}` tensors for every layer and records the
/// adapter in `spec`. Returns the adapter tensor names.
TrainableSet inject_lora(ParameterSet& params, BackboneSpec& spec, const LoraConfig& cfg, Rng& rng);

/// Folds every adapter into its base weight. Throws on double merge.
void merge_adapters(ParameterSet& params, BackboneSpec& spec);
void unmerge_adapters(ParameterSet& params, BackboneSpec& spec);

/// All parameter names except those frozen by the first-`n` rule: with n > 0
/// the patch/positional embeddings, CLS and mask tokens and blocks 0..n-1
/// (with their adapters) are frozen; the final norm freezes only at n == depth.
/// Head tensors are never frozen here.
TrainableSet freeze_backbone_layers(const ParameterSet& params, int depth, int n);

/// Removes every `backbone.*` base tensor (W0 and friends) from the set, leaving
/// adapters and heads.
void freeze_base_weights(TrainableSet& trainable);

bool is_head_parameter(const std::string& name);

}  // namespace dinomx
