#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dinomx/matrix.hpp"
#include "dinomx/rng.hpp"
#include "dinomx/tensor.hpp"

namespace dinomx {

struct ViTConfig {
  int patch_size = 4;
  int embed_dim = 64;
  int depth = 4;
  int num_heads = 4;
  double mlp_ratio = 4.0;
  int in_channels = 1;
  int base_grid = 8;  // patches per side at the reference resolution

  int head_dim() const { return embed_dim / num_heads; }
  int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
  void validate() const;
  bool operator==(const ViTConfig&) const = default;
};

// --- adapter hooks ---------------------------------------------------------
// The attention projections consult these when a LoRA adapter is attached.
// Injection, merging and freezing live in peft.hpp.

enum class Projection { q = 0, k = 1, v = 2, o = 3 };

std::string projection_name(Projection p);
Projection parse_projection(const std::string& name);

struct LoraConfig {
  int r = 4;
  double alpha = 16.0;
  double dropout = 0.1;
  std::vector<Projection> targets{Projection::q, Projection::v};

  double scaling() const { return alpha / r; }
  bool targets_projection(Projection p) const;
  void validate(const ViTConfig& vit) const;
  bool operator==(const LoraConfig&) const = default;
};

/// Architecture plus adapter state; the parameters themselves live in a ParameterSet.
struct BackboneSpec {
  ViTConfig vit;
  std::optional<LoraConfig> lora;
  bool lora_merged = false;
};

std::string block_prefix(int layer);                      // "backbone.blocks.<l>."
std::string lora_prefix(int layer, Projection p);         // "lora.<l>.<p>."

/// Per-layer, per-head [n,n] attention for one image. maps[layer * heads + head].
struct AttentionStack {
  int layers = 0;
  int heads = 0;
  int tokens = 0;
  std::vector<Tensor> maps;

  const Tensor& at(int layer, int head) const { return maps.at(static_cast<std::size_t>(layer) * heads + head); }
};

struct EncoderOutput {
  Tensor cls;           // [d]
  Tensor patch_tokens;  // [num_patches, d]
  std::optional<AttentionStack> attention;
};

struct ForwardOptions {
  bool capture_attention = false;
  /// Per-image masked patch indices; empty outer vector means no masking.
  std::vector<std::vector<int>> masks;
  /// Enables adapter dropout; requires one seed per image.
  bool training = false;
  std::vector<std::uint64_t> dropout_seeds;
};

/// Bilinear (half-pixel) resampling table from a g x g grid to h x w.
struct PosInterpolation {
  int source_grid = 0;
  int target_h = 0;
  int target_w = 0;
  std::vector<std::array<int, 4>> index;
  std::vector<std::array<float, 4>> weight;

  static PosInterpolation build(int source_grid, int target_h, int target_w);
  bool identity() const { return source_grid == target_h && source_grid == target_w; }
};

Tensor interpolate_pos_embed(const Tensor& pos, int target_grid);
Tensor interpolate_pos_embed(const Tensor& pos, int target_h, int target_w);

struct LoraTape {
  bool active = false;
  Matrix<float> input;  // adapter-branch input after dropout
  Matrix<float> keep;   // dropout multipliers; empty when dropout is off
  Matrix<float> down;   // input * A^T
};

struct BlockTape {
  Matrix<float> x_in;
  LayerNormCache ln1;
  Matrix<float> h1, q, k, v, ctx;
  std::vector<Matrix<float>> probs;  // [batch * heads], each [n,n]
  std::array<LoraTape, 4> lora;
  LayerNormCache ln2;
  Matrix<float> h2, f1, g;
};

/// Activations recorded by a float forward for the matching backward call.
struct EncoderTape {
  bool recorded = false;
  int batch = 0;
  int tokens = 0;
  int grid_h = 0;
  int grid_w = 0;
  Matrix<float> patches;
  std::vector<std::vector<int>> masks;
  PosInterpolation interp;
  std::vector<BlockTape> blocks;
  LayerNormCache final_ln;
};

template <typename T>
struct EncoderBatch {
  int batch = 0;
  int num_patches = 0;
  int grid_h = 0;
  int grid_w = 0;
  Matrix<T> cls;      // [batch, d]
  Matrix<T> patches;  // [batch * num_patches, d]
  std::vector<AttentionStack> attention;
};

ParameterSet init_backbone(const ViTConfig& config, Rng& rng);

/// Batched forward over images of identical size. Records a tape when one is
/// supplied (float only).
template <typename T>
EncoderBatch<T> encode(const ParameterSet& params, const BackboneSpec& spec, std::span<const Tensor> images,
                       const ForwardOptions& options, EncoderTape* tape = nullptr);

/// Reverse pass for a recorded forward. Gradients are accumulated into `grads`
/// only for names present in `trainable`; untouched names get no entry.
/// `d_patches` may be null when patch tokens did not feed the loss.
void encode_backward(const ParameterSet& params, const BackboneSpec& spec, const EncoderTape& tape,
                     const Matrix<float>& d_cls, const Matrix<float>* d_patches, const TrainableSet& trainable,
                     ParameterSet& grads);

/// Convenience per-image forward returning Tensors.
std::vector<EncoderOutput> forward(const ParameterSet& params, const BackboneSpec& spec,
                                   std::span<const Tensor> images, const ForwardOptions& options = {});

}  // namespace dinomx
