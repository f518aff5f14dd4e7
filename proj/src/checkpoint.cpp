#include <fmt/format.h>

#include <fstream>
#include <sstream>

#include "dinomx/trainer.hpp"

namespace dinomx {

namespace {

constexpr const char* kFormatLine = "format dinomx-checkpoint 1";

bool starts_with(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

void put_prefixed(ParameterSet& out, const std::string& prefix, const ParameterSet& in) {
  for (const auto& [name, t] : in) out.emplace(prefix + name, t);
}

ParameterSet take_prefixed(const ParameterSet& in, const std::string& prefix) {
  ParameterSet out;
  for (const auto& [name, t] : in) {
    if (starts_with(name, prefix)) out.emplace(name.substr(prefix.size()), t);
  }
  return out;
}

void require_same_layout(const ParameterSet& loaded, const ParameterSet& expected, const std::string& what) {
  for (const auto& [name, t] : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw std::runtime_error("checkpoint is missing " + what + " tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw std::runtime_error("checkpoint " + what + " tensor '" + name + "' has shape " + it->second.shape_string() +
                               ", model expects " + t.shape_string());
    }
  }
  if (loaded.size() != expected.size()) throw std::runtime_error("checkpoint holds extra " + what + " tensors");
}

template <typename T>
void compare_field(const std::string& key, const T& saved, const T& now) {
  if (!(saved == now)) throw ConfigError("resume config mismatch: '" + key + "' differs from the checkpoint");
}

/// Fields that determine tensor shapes or which tensors exist.
void check_structure(const TrainConfig& saved, const TrainConfig& now) {
  compare_field("model_type/model", saved.vit(), now.vit());
  compare_field("dino_head.out_dim", saved.dino_head.out_dim, now.dino_head.out_dim);
  compare_field("dino_head.hidden_dim", saved.dino_head.hidden_dim, now.dino_head.hidden_dim);
  compare_field("dino_head.bottleneck_dim", saved.dino_head.bottleneck_dim, now.dino_head.bottleneck_dim);
  compare_field("dino_head.norm_last_layer", saved.dino_head.norm_last_layer, now.dino_head.norm_last_layer);
  compare_field("ibot.loss_weight (enabled)", saved.ibot_enabled(), now.ibot_enabled());
  if (now.ibot_enabled()) {
    compare_field("ibot.separate_head", saved.ibot.separate_head, now.ibot.separate_head);
    compare_field("ibot.out_dim", saved.ibot.out_dim, now.ibot.out_dim);
    compare_field("ibot.norm_last_layer", saved.ibot.norm_last_layer, now.ibot.norm_last_layer);
  }
  compare_field("train.use_lora", saved.train.use_lora, now.train.use_lora);
  if (now.train.use_lora) compare_field("lora_config", saved.lora, now.lora);
  compare_field("train.freeze_backbone_layers", saved.train.freeze_backbone_layers, now.train.freeze_backbone_layers);
  compare_field("train.do_distillation", saved.train.do_distillation, now.train.do_distillation);
  if (now.train.do_distillation) {
    compare_field("distillation.distilled_model_type", saved.distillation.distilled_model_type,
                  now.distillation.distilled_model_type);
  }
}

}  // namespace

std::filesystem::path Trainer::save_checkpoint(const std::filesystem::path& dir) const {
  namespace fs = std::filesystem;
  if (next_ < 1) throw std::logic_error("no completed iteration to checkpoint");
  const std::int64_t completed = next_ - 1;
  const fs::path final_dir = dir / checkpoint_name(completed);
  const fs::path tmp = dir / (checkpoint_name(completed) + ".partial");
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  const Replica& r0 = replicas_.front();
  ParameterSet state;
  put_prefixed(state, "student/", r0.student);
  put_prefixed(state, "teacher/", r0.teacher);
  if (setup_.distillation) put_prefixed(state, "shadow/", r0.shadow);
  std::map<std::string, std::int64_t> steps;
  for (std::size_t w = 0; w < replicas_.size(); ++w) {
    const AdamState& opt = replicas_[w].optim;
    for (const auto& [name, m] : opt.m) {
      if (shards_ && shards_->owner_of(name) != static_cast<int>(w)) continue;
      state.emplace("optim.m/" + name, m);
      state.emplace("optim.v/" + name, opt.v.at(name));
      steps[name] = opt.steps.at(name);
    }
    if (!shards_) break;
  }
  for (const auto& [name, m] : r0.teacher_optim.m) {
    state.emplace("toptim.m/" + name, m);
    state.emplace("toptim.v/" + name, r0.teacher_optim.v.at(name));
  }
  state.emplace("center/dino", r0.dino.center);
  if (r0.ibot) state.emplace("center/ibot", r0.ibot->center);
  write_tensors(tmp / "state.dmxt", state);

  {
    std::ofstream cfg_out(tmp / "config.yaml");
    cfg_out << print_train_config(cfg_);
    if (!cfg_out) throw std::runtime_error("failed writing checkpoint config snapshot");
  }
  {
    std::ofstream meta(tmp / "meta.txt");
    meta << kFormatLine << '\n';
    meta << "iteration " << completed << '\n';
    meta << "seed " << cfg_.train.seed << '\n';
    meta << "workers " << accel_.num_workers << '\n';
    meta << "distribution " << distribution_name(accel_.type) << '\n';
    for (const auto& [name, n] : steps) meta << "adam_step " << name << ' ' << n << '\n';
    for (const auto& [name, n] : r0.teacher_optim.steps) meta << "teacher_adam_step " << name << ' ' << n << '\n';
    meta << "complete 1\n";
    if (!meta) throw std::runtime_error("failed writing checkpoint metadata");
  }
  fs::remove_all(final_dir);
  fs::rename(tmp, final_dir);
  return final_dir;
}

void Trainer::resume(const std::filesystem::path& bundle) {
  namespace fs = std::filesystem;
  for (const char* f : {"state.dmxt", "meta.txt", "config.yaml"}) {
    if (!fs::exists(bundle / f)) {
      throw std::runtime_error("partial checkpoint bundle " + bundle.string() + ": missing " + f);
    }
  }
  std::ifstream meta(bundle / "meta.txt");
  std::string line;
  std::getline(meta, line);
  if (line != kFormatLine) throw std::runtime_error("unrecognized checkpoint metadata in " + bundle.string());
  std::int64_t iteration = -1;
  bool complete = false;
  std::map<std::string, std::int64_t> steps;
  std::map<std::string, std::int64_t> tsteps;
  while (std::getline(meta, line)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key == "iteration") {
      ss >> iteration;
    } else if (key == "adam_step") {
      std::string name;
      std::int64_t n = 0;
      ss >> name >> n;
      steps[name] = n;
    } else if (key == "teacher_adam_step") {
      std::string name;
      std::int64_t n = 0;
      ss >> name >> n;
      tsteps[name] = n;
    } else if (key == "complete") {
      complete = true;
    }
  }
  if (!complete || iteration < 0) throw std::runtime_error("partial checkpoint bundle " + bundle.string());
  if (iteration + 1 > cfg_.train.max_iterations) {
    throw ConfigError(fmt::format("checkpoint iteration {} is beyond max_iterations {}", iteration,
                                  cfg_.train.max_iterations));
  }

  check_structure(load_train_config(bundle / "config.yaml"), cfg_);

  const ParameterSet state = read_parameter_set(bundle / "state.dmxt");
  const Replica& ref = replicas_.front();
  Replica loaded = ref;
  loaded.student = take_prefixed(state, "student/");
  loaded.teacher = take_prefixed(state, "teacher/");
  require_same_layout(loaded.student, ref.student, "student");
  require_same_layout(loaded.teacher, ref.teacher, "teacher");
  if (setup_.distillation) {
    loaded.shadow = take_prefixed(state, "shadow/");
    require_same_layout(loaded.shadow, ref.shadow, "shadow");
  }
  auto center = state.find("center/dino");
  if (center == state.end() || center->second.shape() != ref.dino.center.shape()) {
    throw std::runtime_error("checkpoint DINO center is missing or mis-shaped");
  }
  loaded.dino.center = center->second;
  if (ref.ibot) {
    auto ic = state.find("center/ibot");
    if (ic == state.end() || ic->second.shape() != ref.ibot->center.shape()) {
      throw std::runtime_error("checkpoint iBOT center is missing or mis-shaped");
    }
    loaded.ibot->center = ic->second;
  }
  AdamState full;
  full.m = take_prefixed(state, "optim.m/");
  full.v = take_prefixed(state, "optim.v/");
  for (const auto& [name, m] : full.m) {
    if (!setup_.trainable.count(name) || !full.v.count(name) || !steps.count(name)) {
      throw std::runtime_error("checkpoint optimizer state for '" + name + "' is inconsistent");
    }
    full.steps[name] = steps.at(name);
  }

  loaded.teacher_optim = AdamState{};
  loaded.teacher_optim.m = take_prefixed(state, "toptim.m/");
  loaded.teacher_optim.v = take_prefixed(state, "toptim.v/");
  for (const auto& [name, m] : loaded.teacher_optim.m) {
    if (!setup_.teacher_trainable.count(name) || !loaded.teacher_optim.v.count(name) || !tsteps.count(name)) {
      throw std::runtime_error("checkpoint teacher optimizer state for '" + name + "' is inconsistent");
    }
    loaded.teacher_optim.steps[name] = tsteps.at(name);
  }

  for (std::size_t w = 0; w < replicas_.size(); ++w) {
    Replica r = loaded;
    r.optim = AdamState{};
    for (const auto& [name, m] : full.m) {
      if (shards_ && shards_->owner_of(name) != static_cast<int>(w)) continue;
      r.optim.m.emplace(name, m);
      r.optim.v.emplace(name, full.v.at(name));
      r.optim.steps[name] = full.steps.at(name);
    }
    replicas_[w] = std::move(r);
  }
  if (setup_.distillation) setup_.teacher_hash = backbone_hash(replicas_.front().teacher);
  next_ = iteration + 1;
}

}  // namespace dinomx
