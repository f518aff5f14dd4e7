#include "dinomx/peft.hpp"

#include <stdexcept>

namespace dinomx {

namespace {

void check_adapter(const LoraAdapter& a, const Tensor& w0) {
  if (w0.ndim() != 2 || a.A.ndim() != 2 || a.B.ndim() != 2) throw std::invalid_argument("lora tensors must be rank 2");
  if (a.A.dim(0) != a.B.dim(1) || a.B.dim(0) != w0.dim(0) || a.A.dim(1) != w0.dim(1)) {
    throw std::invalid_argument("lora shapes " + a.B.shape_string() + " x " + a.A.shape_string() +
                                " do not match base weight " + w0.shape_string());
  }
}

bool starts_with(const std::string& s, const std::string& prefix) { return s.compare(0, prefix.size(), prefix) == 0; }

Matrix<float> delta(const LoraAdapter& a) {
  return static_cast<float>(a.scaling) * (as_matrix(a.B) * as_matrix(a.A));
}

}  // namespace

LoraAdapter make_adapter(int d, int k, const LoraConfig& cfg, Rng& rng) {
  LoraAdapter a;
  a.A = Tensor({cfg.r, k}, 0.0f);
  for (float& v : a.A.data()) v = static_cast<float>(rng.normal(0.0, 0.02));
  a.B = Tensor({d, cfg.r}, 0.0f);
  a.scaling = cfg.scaling();
  a.dropout = cfg.dropout;
  return a;
}

Tensor lora_forward(const LoraAdapter& adapter, const Tensor& w0, const Tensor& x, Rng* rng) {
  check_adapter(adapter, w0);
  if (static_cast<std::int64_t>(x.numel()) != w0.dim(1)) {
    throw std::invalid_argument("input length " + std::to_string(x.numel()) + " does not match weight " +
                                w0.shape_string());
  }
  Eigen::VectorXf xv = Eigen::Map<const Eigen::VectorXf>(x.data().data(), static_cast<Eigen::Index>(x.numel()));
  Eigen::VectorXf h = as_matrix(w0) * xv;
  Eigen::VectorXf branch = xv;
  if (rng && adapter.dropout > 0.0) {
    const float keep_scale = static_cast<float>(1.0 / (1.0 - adapter.dropout));
    for (Eigen::Index i = 0; i < branch.size(); ++i) branch(i) = rng->bernoulli(adapter.dropout) ? 0.0f : branch(i) * keep_scale;
  }
  Eigen::VectorXf down = as_matrix(adapter.A) * branch;  // rank-r bottleneck first
  h.noalias() += static_cast<float>(adapter.scaling) * (as_matrix(adapter.B) * down);
  return Tensor({w0.dim(0)}, std::vector<float>(h.data(), h.data() + h.size()));
}

Tensor merge_lora(const LoraAdapter& adapter, const Tensor& w0) {
  check_adapter(adapter, w0);
  Matrix<float> w = as_matrix(w0) + delta(adapter);
  return Tensor(w0.shape(), std::vector<float>(w.data(), w.data() + w.size()));
}

Tensor unmerge_lora(const LoraAdapter& adapter, const Tensor& merged) {
  check_adapter(adapter, merged);
  Matrix<float> w = as_matrix(merged) - delta(adapter);
  return Tensor(merged.shape(), std::vector<float>(w.data(), w.data() + w.size()));
}

LoraConfig make_lora_config(int r, double alpha, double dropout, const std::vector<std::string>& targets) {
  LoraConfig cfg;
  cfg.r = r;
  cfg.alpha = alpha;
  cfg.dropout = dropout;
  cfg.targets.clear();
  for (const auto& t : targets) cfg.targets.push_back(parse_projection(t));
  return cfg;
}

TrainableSet inject_lora(ParameterSet& params, BackboneSpec& spec, const LoraConfig& cfg, Rng& rng) {
  if (spec.lora) throw std::logic_error("LoRA adapters already injected");
  cfg.validate(spec.vit);
  TrainableSet names;
  for (int l = 0; l < spec.vit.depth; ++l) {
    for (auto proj : cfg.targets) {
      const std::string base = block_prefix(l) + "attn." + projection_name(proj) + ".weight";
      const Tensor& w0 = param(params, base);
      LoraAdapter a = make_adapter(static_cast<int>(w0.dim(0)), static_cast<int>(w0.dim(1)), cfg, rng);
      const std::string lp = lora_prefix(l, proj);
      params[lp + "A"] = std::move(a.A);
      params[lp + "B"] = std::move(a.B);
      names.insert(lp + "A");
      names.insert(lp + "B");
    }
  }
  spec.lora = cfg;
  spec.lora_merged = false;
  return names;
}

namespace {
void fold_adapters(ParameterSet& params, const BackboneSpec& spec, bool merge) {
  for (int l = 0; l < spec.vit.depth; ++l) {
    for (auto proj : spec.lora->targets) {
      const std::string lp = lora_prefix(l, proj);
      LoraAdapter a{param(params, lp + "A"), param(params, lp + "B"), spec.lora->scaling(), spec.lora->dropout};
      Tensor& w = params.at(block_prefix(l) + "attn." + projection_name(proj) + ".weight");
      w = merge ? merge_lora(a, w) : unmerge_lora(a, w);
    }
  }
}
}  // namespace

void merge_adapters(ParameterSet& params, BackboneSpec& spec) {
  if (!spec.lora) throw std::logic_error("no LoRA adapters to merge");
  if (spec.lora_merged) throw std::logic_error("LoRA adapters are already merged");
  fold_adapters(params, spec, true);
  spec.lora_merged = true;
}

void unmerge_adapters(ParameterSet& params, BackboneSpec& spec) {
  if (!spec.lora) throw std::logic_error("no LoRA adapters to unmerge");
  if (!spec.lora_merged) throw std::logic_error("LoRA adapters are not merged");
  fold_adapters(params, spec, false);
  spec.lora_merged = false;
}

bool is_head_parameter(const std::string& name) {
  return starts_with(name, "head.") || starts_with(name, "ibot_head.");
}

TrainableSet freeze_backbone_layers(const ParameterSet& params, int depth, int n) {
  if (n < 0 || n > depth) {
    throw std::invalid_argument("freeze_backbone_layers=" + std::to_string(n) + " outside [0, " +
                                std::to_string(depth) + "]");
  }
  TrainableSet out;
  for (const auto& [name, t] : params) {
    if (n > 0) {
      if (starts_with(name, "backbone.patch_embed.") || name == "backbone.pos_embed" ||
          name == "backbone.cls_token" || name == "backbone.mask_token") {
        continue;
      }
      bool frozen_block = false;
      for (int l = 0; l < n && !frozen_block; ++l) {
        frozen_block = starts_with(name, block_prefix(l)) || starts_with(name, "lora." + std::to_string(l) + ".");
      }
      if (frozen_block) continue;
      if (n == depth && starts_with(name, "backbone.norm.")) continue;
    }
    out.insert(name);
  }
  return out;
}

void freeze_base_weights(TrainableSet& trainable) {
  std::erase_if(trainable, [](const std::string& n) { return starts_with(n, "backbone."); });
}

}  // namespace dinomx
