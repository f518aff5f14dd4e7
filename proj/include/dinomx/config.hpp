#pragma once

#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "dinomx/augment.hpp"
#include "dinomx/head.hpp"
#include "dinomx/io.hpp"
#include "dinomx/loss.hpp"
#include "dinomx/parallel.hpp"
#include "dinomx/schedule.hpp"
#include "dinomx/vit.hpp"

namespace dinomx {

/// Raised for anything wrong with a configuration file (CLI exit code 2).
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelPreset {
  std::string name;
  ViTConfig vit;
};

/// Known architecture names. Hub identifiers map onto the tiny presets.
const std::vector<ModelPreset>& model_presets();
ViTConfig resolve_preset(const std::string& name);

struct DinoHeadSection {
  int out_dim = 1024;
  bool norm_last_layer = false;
  double loss_weight = 1.0;
  int hidden_dim = 256;
  int bottleneck_dim = 64;
  bool operator==(const DinoHeadSection&) const = default;
};

enum class TeacherViews { global, local, all };

std::string teacher_views_name(TeacherViews v);

struct DistillationSection {
  std::string distilled_model_type = "tiny-giant";
  std::string distilled_model_weights;
  bool load_from_disk = false;
  TeacherViews teacher_views = TeacherViews::global;
  bool operator==(const DistillationSection&) const = default;
};

struct DatasetSection {
  std::string dataset_path;
  bool shuffle = true;
  NormalizeMode normalization = NormalizeMode::unit;
  std::vector<float> mean;
  std::vector<float> std;
  PolicyDomain augmentation = PolicyDomain::rgb;
  bool operator==(const DatasetSection&) const = default;
};

/// Optional explicit architecture; overrides fields of the model_type preset.
struct ModelOverrides {
  std::optional<int> patch_size, embed_dim, depth, num_heads, in_channels, base_grid;
  std::optional<double> mlp_ratio;
  bool operator==(const ModelOverrides&) const = default;
};

struct TrainSection {
  std::string model_name = "dino_run";
  std::string model_type = "facebook/dinov2-base";
  int global_batch_size = 16;
  std::int64_t max_iterations = 300;
  bool do_distillation = false;
  bool mixed_precision = false;  // recorded only; arithmetic stays float32
  bool use_lora = false;
  std::int64_t freeze_last_layer = 0;
  std::int64_t warmup_teacher_temp_iterations = 0;
  std::int64_t warmup_iterations = 10;
  double teacher_temp = 0.04;
  double warmup_teacher_temp = 0.04;
  int freeze_backbone_layers = 0;
  double momentum_teacher = 0.996;
  std::string centering = "centering";
  bool ibot_separate_head = false;
  bool use_pretrained = false;  // recorded only; no pretrained weights are bundled
  bool generate_samples = false;
  double lr = 5e-4;
  double min_lr = 1e-5;
  std::int64_t saveckp_freq = 250;
  std::uint64_t seed = 0;
  double weight_decay = 0.04;
  double weight_decay_end = 0.4;
  double clip_grad = 3.0;
  double student_temp = 0.1;
  double center_momentum = 0.9;
  std::int64_t log_freq = 10;
  bool operator==(const TrainSection&) const = default;
};

struct TrainConfig {
  DinoHeadSection dino_head;
  IbotConfig ibot;  // separate_head mirrors train.ibot_separate_head
  DistillationSection distillation;
  LoraConfig lora;
  CropConfig crops;
  DatasetSection dataset;
  TrainSection train;
  ModelOverrides model;

  /// Preset plus overrides. in_channels 0 means "take it from the data".
  ViTConfig vit() const;
  ScheduleConfig schedule() const;
  HeadConfig head_config(int in_dim) const;
  HeadConfig ibot_head_config(int in_dim) const;
  DinoLossState dino_loss_state() const;
  DinoLossState ibot_loss_state() const;
  AugmentationPolicy policy() const;
  bool ibot_enabled() const { return ibot.loss_weight > 0.0; }
  /// "dinov2" when the iBOT term is active, else "dinov1".
  std::string variant() const { return ibot_enabled() ? "dinov2" : "dinov1"; }

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

struct AccelConfig {
  DistributionType type = DistributionType::ddp;
  std::string mixed_precision = "no";
  std::string downcast_bf16 = "no";
  int num_workers = 1;

  void validate() const;
  bool operator==(const AccelConfig&) const = default;
};

TrainConfig parse_train_config(const std::string& yaml_text);
TrainConfig load_train_config(const std::filesystem::path& path);
std::string print_train_config(const TrainConfig& cfg);

AccelConfig parse_accel_config(const std::string& yaml_text);
AccelConfig load_accel_config(const std::filesystem::path& path);
std::string print_accel_config(const AccelConfig& cfg);

}  // namespace dinomx
