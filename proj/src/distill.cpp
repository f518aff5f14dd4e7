#include "dinomx/distill.hpp"

#include "dinomx/peft.hpp"

namespace dinomx {

namespace {
bool starts_with(const std::string& s, const std::string& p) { return s.compare(0, p.size(), p) == 0; }

void check_against_template(const ParameterSet& loaded, const ParameterSet& expected, const std::string& source) {
  for (const auto& [name, t] : expected) {
    auto it = loaded.find(name);
    if (it == loaded.end()) throw std::runtime_error(source + ": missing teacher tensor '" + name + "'");
    if (it->second.shape() != t.shape()) {
      throw std::runtime_error(source + ": teacher tensor '" + name + "' has shape " + it->second.shape_string() +
                               ", preset expects " + t.shape_string());
    }
  }
  if (loaded.size() != expected.size()) throw std::runtime_error(source + ": unexpected extra teacher tensors");
}
}  // namespace

std::uint64_t backbone_hash(const ParameterSet& params) {
  ParameterSet sub;
  for (const auto& [name, t] : params) {
    if (starts_with(name, "backbone.")) sub.emplace(name, t);
  }
  return parameter_hash(sub);
}

TeacherSpec load_teacher(const DistillationSection& cfg, int in_channels, std::uint64_t seed) {
  TeacherSpec out;
  out.preset = cfg.distilled_model_type;
  out.spec.vit = resolve_preset(cfg.distilled_model_type);
  if (out.spec.vit.in_channels == 0) out.spec.vit.in_channels = in_channels;
  Rng rng(derive_seed(seed, {0x7EAC4E5u}));
  const ParameterSet templ = init_backbone(out.spec.vit, rng);
  if (!cfg.load_from_disk) {
    out.params = templ;
    out.source = "synthetic";
  } else {
    const fs::path path = cfg.distilled_model_weights;
    if (path.empty()) throw std::runtime_error("distillation.load_from_disk is set but distilled_model_weights is empty");
    if (!fs::exists(path)) throw std::runtime_error("teacher weights not found: " + path.string());
    ParameterSet loaded;
    if (fs::is_directory(path)) {
      const ParameterSet state = read_parameter_set(path / "state.dmxt");
      BackboneSpec spec = out.spec;
      const fs::path snap = path / "config.yaml";
      if (fs::exists(snap)) {
        const TrainConfig tc = load_train_config(snap);
        if (tc.train.use_lora) spec.lora = tc.lora;
      }
      for (const auto& [name, t] : state) {
        const std::string prefix = "teacher/";
        if (!starts_with(name, prefix)) continue;
        const std::string inner = name.substr(prefix.size());
        if (starts_with(inner, "backbone.") || starts_with(inner, "lora.")) loaded.emplace(inner, t);
      }
      if (spec.lora) {
        merge_adapters(loaded, spec);
        std::erase_if(loaded, [](const auto& kv) { return starts_with(kv.first, "lora."); });
      }
    } else {
      loaded = read_parameter_set(path);
    }
    check_against_template(loaded, templ, path.string());
    out.params = std::move(loaded);
    out.source = path.string();
  }
  out.hash = backbone_hash(out.params);
  return out;
}

int sync_teacher_head(ParameterSet& teacher, const ParameterSet& shadow) {
  int copied = 0;
  for (auto& [name, t] : teacher) {
    if (!starts_with(name, "head.")) continue;
    auto it = shadow.find(name);
    if (it == shadow.end() || it->second.shape() != t.shape()) continue;
    t = it->second;
    ++copied;
  }
  return copied;
}

void verify_teacher(const ParameterSet& teacher, std::uint64_t expected) {
  if (backbone_hash(teacher) != expected) throw std::logic_error("frozen teacher backbone was modified");
}

}  // namespace dinomx
