#include "dinomx/config.hpp"

#include <yaml-cpp/yaml.h>

#include <fstream>
#include <set>
#include <sstream>

namespace dinomx {

namespace {

ViTConfig tiny(int embed_dim) {
  ViTConfig v;
  v.embed_dim = embed_dim;
  v.depth = 4;
  v.num_heads = 4;
  v.patch_size = 4;
  v.base_grid = 8;
  v.in_channels = 0;
  return v;
}

template <typename T>
std::string type_label() {
  if constexpr (std::is_same_v<T, bool>) return "a boolean";
  else if constexpr (std::is_integral_v<T>) return "an integer";
  else if constexpr (std::is_floating_point_v<T>) return "a number";
  else return "a string";
}

/// Reads one mapping and rejects keys nobody asked for.
class Section {
 public:
  Section(const YAML::Node& node, std::string path) : node_(node), path_(std::move(path)) {
    if (node_ && !node_.IsNull() && !node_.IsMap()) throw ConfigError(path_ + ": expected a mapping");
  }

  bool has(const std::string& key) const { return node_ && node_.IsMap() && node_[key]; }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!has(key)) return;
    out = scalar<T>(node_[key], key);
  }

  template <typename T>
  void get(const std::string& key, std::optional<T>& out) {
    seen_.insert(key);
    if (!has(key)) return;
    out = scalar<T>(node_[key], key);
  }

  template <typename T>
  void get_list(const std::string& key, std::vector<T>& out) {
    seen_.insert(key);
    if (!has(key)) return;
    const YAML::Node n = node_[key];
    if (!n.IsSequence()) throw ConfigError(path_ + "." + key + ": expected a list");
    out.clear();
    for (std::size_t i = 0; i < n.size(); ++i) out.push_back(scalar<T>(n[i], key + "[" + std::to_string(i) + "]"));
  }

  void get_pair(const std::string& key, std::array<double, 2>& out) {
    std::vector<double> v;
    get_list(key, v);
    if (!has(key)) return;
    if (v.size() != 2) throw ConfigError(path_ + "." + key + ": expected exactly two values");
    out = {v[0], v[1]};
  }

  YAML::Node child(const std::string& key) {
    seen_.insert(key);
    return has(key) ? node_[key] : YAML::Node();
  }

  void finish() const {
    if (!node_ || node_.IsNull()) return;
    for (const auto& kv : node_) {
      const auto key = kv.first.as<std::string>();
      if (!seen_.count(key)) throw ConfigError("unknown key '" + (path_.empty() ? key : path_ + "." + key) + "'");
    }
  }

 private:
  template <typename T>
  T scalar(const YAML::Node& n, const std::string& key) const {
    const std::string where = path_.empty() ? key : path_ + "." + key;
    if (!n.IsScalar()) throw ConfigError(where + ": expected " + type_label<T>());
    try {
      return n.as<T>();
    } catch (const YAML::Exception&) {
      throw ConfigError(where + ": expected " + type_label<T>() + ", got '" + n.Scalar() + "'");
    }
  }

  YAML::Node node_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
void get_enum(Section& s, const std::string& path, const std::string& key, Enum& out, Parse parse) {
  std::optional<std::string> raw;
  s.get(key, raw);
  if (!raw) return;
  try {
    out = parse(*raw);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(path + "." + key + ": " + e.what());
  }
}

YAML::Node load_yaml(const std::string& text) {
  try {
    return YAML::Load(text);
  } catch (const YAML::Exception& e) {
    throw ConfigError(std::string("YAML syntax error: ") + e.what());
  }
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

template <typename Fn>
void rethrow_as_config(Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

}  // namespace

const std::vector<ModelPreset>& model_presets() {
  static const std::vector<ModelPreset> presets = {
      {"tiny-small", tiny(48)},
      {"tiny-base", tiny(64)},
      {"tiny-large", tiny(96)},
      {"tiny-giant", tiny(128)},
      {"facebook/dino-vits16", tiny(48)},
      {"facebook/dino-vits8", tiny(48)},
      {"facebook/dino-vitb16", tiny(64)},
      {"facebook/dino-vitb8", tiny(64)},
      {"facebook/dinov2-small", tiny(48)},
      {"facebook/dinov2-base", tiny(64)},
      {"facebook/dinov2-large", tiny(96)},
      {"facebook/dinov2-giant", tiny(128)},
  };
  return presets;
}

ViTConfig resolve_preset(const std::string& name) {
  for (const auto& p : model_presets()) {
    if (p.name == name) return p.vit;
  }
  std::string known;
  for (const auto& p : model_presets()) known += (known.empty() ? "" : ", ") + p.name;
  throw ConfigError("unknown model preset '" + name + "' (known: " + known + ")");
}

std::string teacher_views_name(TeacherViews v) {
  switch (v) {
    case TeacherViews::global: return "global";
    case TeacherViews::local: return "local";
    case TeacherViews::all: return "all";
  }
  return "?";
}

namespace {
TeacherViews parse_teacher_views(const std::string& s) {
  if (s == "global") return TeacherViews::global;
  if (s == "local") return TeacherViews::local;
  if (s == "all") return TeacherViews::all;
  throw std::invalid_argument("expected global, local or all, got '" + s + "'");
}

NormalizeMode parse_normalization(const std::string& s) {
  if (s == "unit") return NormalizeMode::unit;
  if (s == "standardize") return NormalizeMode::standardize;
  throw std::invalid_argument("expected unit or standardize, got '" + s + "'");
}
}  // namespace

ViTConfig TrainConfig::vit() const {
  ViTConfig v = resolve_preset(train.model_type);
  if (model.patch_size) v.patch_size = *model.patch_size;
  if (model.embed_dim) v.embed_dim = *model.embed_dim;
  if (model.depth) v.depth = *model.depth;
  if (model.num_heads) v.num_heads = *model.num_heads;
  if (model.mlp_ratio) v.mlp_ratio = *model.mlp_ratio;
  if (model.in_channels) v.in_channels = *model.in_channels;
  if (model.base_grid) v.base_grid = *model.base_grid;
  return v;
}

ScheduleConfig TrainConfig::schedule() const {
  ScheduleConfig s;
  s.max_iterations = train.max_iterations;
  s.warmup_iterations = train.warmup_iterations;
  s.lr = train.lr;
  s.min_lr = train.min_lr;
  s.weight_decay = train.weight_decay;
  s.weight_decay_end = train.weight_decay_end;
  s.momentum_teacher = train.momentum_teacher;
  return s;
}

HeadConfig TrainConfig::head_config(int in_dim) const {
  HeadConfig h;
  h.in_dim = in_dim;
  h.hidden_dim = dino_head.hidden_dim;
  h.bottleneck_dim = dino_head.bottleneck_dim;
  h.out_dim = dino_head.out_dim;
  h.norm_last_layer = dino_head.norm_last_layer;
  return h;
}

HeadConfig TrainConfig::ibot_head_config(int in_dim) const {
  HeadConfig h = head_config(in_dim);
  h.out_dim = ibot.out_dim;
  h.norm_last_layer = ibot.norm_last_layer;
  return h;
}

DinoLossState TrainConfig::dino_loss_state() const {
  DinoLossState s = DinoLossState::with_dim(dino_head.out_dim);
  s.center_momentum = train.center_momentum;
  s.student_temp = train.student_temp;
  s.warmup_teacher_temp = train.warmup_teacher_temp;
  s.teacher_temp = train.teacher_temp;
  s.warmup_teacher_temp_iterations = train.warmup_teacher_temp_iterations;
  return s;
}

DinoLossState TrainConfig::ibot_loss_state() const {
  DinoLossState s = dino_loss_state();
  const int k = ibot.separate_head ? ibot.out_dim : dino_head.out_dim;
  s.center = Tensor({k}, 0.0f);
  return s;
}

AugmentationPolicy TrainConfig::policy() const {
  return dataset.augmentation == PolicyDomain::rgb ? AugmentationPolicy::rgb() : AugmentationPolicy::medical();
}

void TrainConfig::validate() const {
  rethrow_as_config([&] {
    ViTConfig v = vit();
    if (v.in_channels == 0) v.in_channels = 1;
    v.validate();
    schedule().validate();
    head_config(v.embed_dim).validate();
    if (dino_head.loss_weight < 0.0) throw ConfigError("dino_head.loss_weight must be >= 0");
    ibot.validate();
    if (ibot.separate_head != train.ibot_separate_head) {
      throw ConfigError("ibot.separate_head must mirror train.ibot_separate_head");
    }
    if (!ibot.separate_head && ibot_enabled() && ibot.out_dim != dino_head.out_dim) {
      throw ConfigError("ibot.out_dim must equal dino_head.out_dim when the iBOT head is shared");
    }
    if (train.use_lora) lora.validate(v);
    crops.validate(v.patch_size);
    if (crops.global_crops_size % v.patch_size || crops.local_crops_size % v.patch_size) {
      throw ConfigError("crop sizes must be multiples of patch_size " + std::to_string(v.patch_size));
    }
    if (train.global_batch_size < 1) throw ConfigError("train.global_batch_size must be >= 1");
    if (train.freeze_backbone_layers < 0 || train.freeze_backbone_layers > v.depth) {
      throw ConfigError("train.freeze_backbone_layers must be in [0, " + std::to_string(v.depth) + "]");
    }
    if (train.freeze_last_layer < 0) throw ConfigError("train.freeze_last_layer must be >= 0");
    if (train.centering != "centering") {
      throw ConfigError("train.centering: only 'centering' is supported, got '" + train.centering + "'");
    }
    dino_loss_state().validate();
    if (train.saveckp_freq < 0) throw ConfigError("train.saveckp_freq must be >= 0");
    if (train.log_freq < 1) throw ConfigError("train.log_freq must be >= 1");
    if (train.clip_grad < 0.0) throw ConfigError("train.clip_grad must be >= 0");
    if (train.do_distillation && ibot_enabled()) {
      throw ConfigError("the iBOT objective cannot be combined with do_distillation");
    }
    if (train.do_distillation) resolve_preset(distillation.distilled_model_type);
    if (dataset.normalization == NormalizeMode::standardize) {
      if (dataset.mean.empty() || dataset.mean.size() != dataset.std.size()) {
        throw ConfigError("dataset.mean and dataset.std must be set with equal length for standardize");
      }
      for (float s : dataset.std) {
        if (!(s > 0.0f)) throw ConfigError("dataset.std entries must be > 0");
      }
    }
  });
}

void AccelConfig::validate() const {
  if (num_workers < 1) throw ConfigError("distribution.num_workers must be >= 1");
}

TrainConfig parse_train_config(const std::string& yaml_text) {
  const YAML::Node root = load_yaml(yaml_text);
  TrainConfig cfg;
  Section top(root, "");

  Section head(top.child("dino_head"), "dino_head");
  head.get("out_dim", cfg.dino_head.out_dim);
  head.get("norm_last_layer", cfg.dino_head.norm_last_layer);
  head.get("loss_weight", cfg.dino_head.loss_weight);
  head.get("hidden_dim", cfg.dino_head.hidden_dim);
  head.get("bottleneck_dim", cfg.dino_head.bottleneck_dim);
  head.finish();

  Section ibot(top.child("ibot"), "ibot");
  ibot.get("loss_weight", cfg.ibot.loss_weight);
  ibot.get("out_dim", cfg.ibot.out_dim);
  ibot.get("norm_last_layer", cfg.ibot.norm_last_layer);
  ibot.get("mask_sample_probability", cfg.ibot.mask_sample_probability);
  std::array<double, 2> ratio{cfg.ibot.mask_ratio_min, cfg.ibot.mask_ratio_max};
  ibot.get_pair("mask_ratio_min_max", ratio);
  cfg.ibot.mask_ratio_min = ratio[0];
  cfg.ibot.mask_ratio_max = ratio[1];
  ibot.finish();

  Section dist(top.child("distillation"), "distillation");
  dist.get("distilled_model_type", cfg.distillation.distilled_model_type);
  dist.get("distilled_model_weights", cfg.distillation.distilled_model_weights);
  dist.get("load_from_disk", cfg.distillation.load_from_disk);
  get_enum(dist, "distillation", "teacher_views", cfg.distillation.teacher_views, parse_teacher_views);
  dist.finish();

  Section lora(top.child("lora_config"), "lora_config");
  lora.get("lora_r", cfg.lora.r);
  lora.get("lora_alpha", cfg.lora.alpha);
  lora.get("lora_dropout", cfg.lora.dropout);
  std::vector<std::string> targets;
  lora.get_list("lora_targets", targets);
  if (lora.has("lora_targets")) {
    cfg.lora.targets.clear();
    for (const auto& t : targets) {
      try {
        cfg.lora.targets.push_back(parse_projection(t));
      } catch (const std::invalid_argument& e) {
        throw ConfigError(std::string("lora_config.lora_targets: ") + e.what());
      }
    }
  }
  lora.finish();

  Section crops(top.child("crops"), "crops");
  crops.get_pair("global_crops_scale", cfg.crops.global_crops_scale);
  crops.get_pair("local_crops_scale", cfg.crops.local_crops_scale);
  crops.get("global_crops_number", cfg.crops.global_crops_number);
  crops.get("local_crops_number", cfg.crops.local_crops_number);
  crops.get("global_crops_size", cfg.crops.global_crops_size);
  crops.get("local_crops_size", cfg.crops.local_crops_size);
  crops.get("guided_crops_number", cfg.crops.guided_crops_number);
  crops.finish();

  Section data(top.child("dataset"), "dataset");
  data.get("dataset_path", cfg.dataset.dataset_path);
  data.get("shuffle", cfg.dataset.shuffle);
  get_enum(data, "dataset", "normalization", cfg.dataset.normalization, parse_normalization);
  data.get_list("mean", cfg.dataset.mean);
  data.get_list("std", cfg.dataset.std);
  get_enum(data, "dataset", "augmentation", cfg.dataset.augmentation, parse_domain);
  data.finish();

  Section tr(top.child("train"), "train");
  auto& t = cfg.train;
  tr.get("model_name", t.model_name);
  tr.get("model_type", t.model_type);
  tr.get("global_batch_size", t.global_batch_size);
  tr.get("max_iterations", t.max_iterations);
  tr.get("do_distillation", t.do_distillation);
  tr.get("mixed_precision", t.mixed_precision);
  tr.get("use_lora", t.use_lora);
  tr.get("freeze_last_layer", t.freeze_last_layer);
  tr.get("warmup_teacher_temp_iterations", t.warmup_teacher_temp_iterations);
  tr.get("warmup_iterations", t.warmup_iterations);
  tr.get("teacher_temp", t.teacher_temp);
  t.warmup_teacher_temp = t.teacher_temp;
  tr.get("warmup_teacher_temp", t.warmup_teacher_temp);
  tr.get("freeze_backbone_layers", t.freeze_backbone_layers);
  tr.get("momentum_teacher", t.momentum_teacher);
  tr.get("centering", t.centering);
  tr.get("ibot_separate_head", t.ibot_separate_head);
  tr.get("use_pretrained", t.use_pretrained);
  tr.get("generate_samples", t.generate_samples);
  tr.get("lr", t.lr);
  tr.get("min_lr", t.min_lr);
  tr.get("saveckp_freq", t.saveckp_freq);
  tr.get("seed", t.seed);
  tr.get("weight_decay", t.weight_decay);
  tr.get("weight_decay_end", t.weight_decay_end);
  tr.get("clip_grad", t.clip_grad);
  tr.get("student_temp", t.student_temp);
  tr.get("center_momentum", t.center_momentum);
  tr.get("log_freq", t.log_freq);
  tr.finish();
  cfg.ibot.separate_head = t.ibot_separate_head;

  Section model(top.child("model"), "model");
  model.get("patch_size", cfg.model.patch_size);
  model.get("embed_dim", cfg.model.embed_dim);
  model.get("depth", cfg.model.depth);
  model.get("num_heads", cfg.model.num_heads);
  model.get("mlp_ratio", cfg.model.mlp_ratio);
  model.get("in_channels", cfg.model.in_channels);
  model.get("base_grid", cfg.model.base_grid);
  model.finish();

  top.finish();
  cfg.validate();
  return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path) {
  try {
    return parse_train_config(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

namespace {

template <typename T>
void emit_list(YAML::Emitter& out, const char* key, const std::vector<T>& v) {
  out << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq;
  for (const auto& x : v) out << x;
  out << YAML::EndSeq;
}

void emit_pair(YAML::Emitter& out, const char* key, std::array<double, 2> v) {
  out << YAML::Key << key << YAML::Value << YAML::Flow << YAML::BeginSeq << v[0] << v[1] << YAML::EndSeq;
}

template <typename T>
void kv(YAML::Emitter& out, const char* key, const T& value) {
  out << YAML::Key << key << YAML::Value << value;
}

template <typename T>
void kv_opt(YAML::Emitter& out, const char* key, const std::optional<T>& value) {
  if (value) kv(out, key, *value);
}

}  // namespace

std::string print_train_config(const TrainConfig& cfg) {
  YAML::Emitter out;
  out.SetDoublePrecision(17);
  out.SetFloatPrecision(9);
  out << YAML::BeginMap;

  out << YAML::Key << "dino_head" << YAML::Value << YAML::BeginMap;
  kv(out, "out_dim", cfg.dino_head.out_dim);
  kv(out, "norm_last_layer", cfg.dino_head.norm_last_layer);
  kv(out, "loss_weight", cfg.dino_head.loss_weight);
  kv(out, "hidden_dim", cfg.dino_head.hidden_dim);
  kv(out, "bottleneck_dim", cfg.dino_head.bottleneck_dim);
  out << YAML::EndMap;

  out << YAML::Key << "ibot" << YAML::Value << YAML::BeginMap;
  kv(out, "loss_weight", cfg.ibot.loss_weight);
  kv(out, "out_dim", cfg.ibot.out_dim);
  kv(out, "norm_last_layer", cfg.ibot.norm_last_layer);
  kv(out, "mask_sample_probability", cfg.ibot.mask_sample_probability);
  emit_pair(out, "mask_ratio_min_max", {cfg.ibot.mask_ratio_min, cfg.ibot.mask_ratio_max});
  out << YAML::EndMap;

  out << YAML::Key << "distillation" << YAML::Value << YAML::BeginMap;
  kv(out, "distilled_model_type", cfg.distillation.distilled_model_type);
  kv(out, "distilled_model_weights", cfg.distillation.distilled_model_weights);
  kv(out, "load_from_disk", cfg.distillation.load_from_disk);
  kv(out, "teacher_views", teacher_views_name(cfg.distillation.teacher_views));
  out << YAML::EndMap;

  out << YAML::Key << "lora_config" << YAML::Value << YAML::BeginMap;
  kv(out, "lora_r", cfg.lora.r);
  kv(out, "lora_alpha", cfg.lora.alpha);
  kv(out, "lora_dropout", cfg.lora.dropout);
  std::vector<std::string> targets;
  for (auto p : cfg.lora.targets) targets.push_back(projection_name(p));
  emit_list(out, "lora_targets", targets);
  out << YAML::EndMap;

  out << YAML::Key << "crops" << YAML::Value << YAML::BeginMap;
  emit_pair(out, "global_crops_scale", cfg.crops.global_crops_scale);
  emit_pair(out, "local_crops_scale", cfg.crops.local_crops_scale);
  kv(out, "global_crops_number", cfg.crops.global_crops_number);
  kv(out, "local_crops_number", cfg.crops.local_crops_number);
  kv(out, "global_crops_size", cfg.crops.global_crops_size);
  kv(out, "local_crops_size", cfg.crops.local_crops_size);
  kv(out, "guided_crops_number", cfg.crops.guided_crops_number);
  out << YAML::EndMap;

  out << YAML::Key << "dataset" << YAML::Value << YAML::BeginMap;
  kv(out, "dataset_path", cfg.dataset.dataset_path);
  kv(out, "shuffle", cfg.dataset.shuffle);
  kv(out, "normalization", std::string(cfg.dataset.normalization == NormalizeMode::unit ? "unit" : "standardize"));
  if (!cfg.dataset.mean.empty()) emit_list(out, "mean", cfg.dataset.mean);
  if (!cfg.dataset.std.empty()) emit_list(out, "std", cfg.dataset.std);
  kv(out, "augmentation", domain_name(cfg.dataset.augmentation));
  out << YAML::EndMap;

  const auto& t = cfg.train;
  out << YAML::Key << "train" << YAML::Value << YAML::BeginMap;
  kv(out, "model_name", t.model_name);
  kv(out, "model_type", t.model_type);
  kv(out, "global_batch_size", t.global_batch_size);
  kv(out, "max_iterations", t.max_iterations);
  kv(out, "do_distillation", t.do_distillation);
  kv(out, "mixed_precision", t.mixed_precision);
  kv(out, "use_lora", t.use_lora);
  kv(out, "freeze_last_layer", t.freeze_last_layer);
  kv(out, "warmup_teacher_temp_iterations", t.warmup_teacher_temp_iterations);
  kv(out, "warmup_iterations", t.warmup_iterations);
  kv(out, "teacher_temp", t.teacher_temp);
  kv(out, "warmup_teacher_temp", t.warmup_teacher_temp);
  kv(out, "freeze_backbone_layers", t.freeze_backbone_layers);
  kv(out, "momentum_teacher", t.momentum_teacher);
  kv(out, "centering", t.centering);
  kv(out, "ibot_separate_head", t.ibot_separate_head);
  kv(out, "use_pretrained", t.use_pretrained);
  kv(out, "generate_samples", t.generate_samples);
  kv(out, "lr", t.lr);
  kv(out, "min_lr", t.min_lr);
  kv(out, "saveckp_freq", t.saveckp_freq);
  kv(out, "seed", t.seed);
  kv(out, "weight_decay", t.weight_decay);
  kv(out, "weight_decay_end", t.weight_decay_end);
  kv(out, "clip_grad", t.clip_grad);
  kv(out, "student_temp", t.student_temp);
  kv(out, "center_momentum", t.center_momentum);
  kv(out, "log_freq", t.log_freq);
  out << YAML::EndMap;

  const auto& m = cfg.model;
  if (m != ModelOverrides{}) {
    out << YAML::Key << "model" << YAML::Value << YAML::BeginMap;
    kv_opt(out, "patch_size", m.patch_size);
    kv_opt(out, "embed_dim", m.embed_dim);
    kv_opt(out, "depth", m.depth);
    kv_opt(out, "num_heads", m.num_heads);
    kv_opt(out, "mlp_ratio", m.mlp_ratio);
    kv_opt(out, "in_channels", m.in_channels);
    kv_opt(out, "base_grid", m.base_grid);
    out << YAML::EndMap;
  }

  out << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

AccelConfig parse_accel_config(const std::string& yaml_text) {
  const YAML::Node root = load_yaml(yaml_text);
  AccelConfig cfg;
  Section top(root, "");
  Section dist(top.child("distribution"), "distribution");
  get_enum(dist, "distribution", "type", cfg.type, parse_distribution);
  dist.get("mixed_precision", cfg.mixed_precision);
  dist.get("downcast_bf16", cfg.downcast_bf16);
  dist.get("num_workers", cfg.num_workers);
  dist.finish();
  top.finish();
  cfg.validate();
  return cfg;
}

AccelConfig load_accel_config(const std::filesystem::path& path) {
  try {
    return parse_accel_config(read_file(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::string print_accel_config(const AccelConfig& cfg) {
  YAML::Emitter out;
  out << YAML::BeginMap << YAML::Key << "distribution" << YAML::Value << YAML::BeginMap;
  kv(out, "type", distribution_name(cfg.type));
  kv(out, "mixed_precision", cfg.mixed_precision);
  kv(out, "downcast_bf16", cfg.downcast_bf16);
  kv(out, "num_workers", cfg.num_workers);
  out << YAML::EndMap << YAML::EndMap;
  return std::string(out.c_str()) + "\n";
}

}  // namespace dinomx
