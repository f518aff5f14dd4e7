#include "dinomx/vit.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dinomx {

void ViTConfig::validate() const {
  if (patch_size < 1) throw std::invalid_argument("patch_size must be >= 1");
  if (depth < 1) throw std::invalid_argument("depth must be >= 1");
  if (embed_dim < 1 || num_heads < 1 || embed_dim % num_heads != 0) {
    throw std::invalid_argument("embed_dim must be a positive multiple of num_heads");
  }
  if (in_channels != 1 && in_channels != 3) throw std::invalid_argument("in_channels must be 1 or 3");
  if (base_grid < 1) throw std::invalid_argument("base_grid must be >= 1");
  if (!(mlp_ratio > 0.0) || mlp_hidden() < 1) throw std::invalid_argument("mlp_ratio must be positive");
}

std::string projection_name(Projection p) {
  switch (p) {
    case Projection::q: return "q";
    case Projection::k: return "k";
    case Projection::v: return "v";
    case Projection::o: return "o";
  }
  return "?";
}

Projection parse_projection(const std::string& name) {
  if (name == "q" || name == "Q") return Projection::q;
  if (name == "k" || name == "K") return Projection::k;
  if (name == "v" || name == "V") return Projection::v;
  if (name == "o" || name == "O") return Projection::o;
  throw std::invalid_argument("unknown LoRA target '" + name + "' (expected one of Q, K, V, O)");
}

bool LoraConfig::targets_projection(Projection p) const {
  return std::find(targets.begin(), targets.end(), p) != targets.end();
}

void LoraConfig::validate(const ViTConfig& vit) const {
  if (r < 1 || r > vit.embed_dim) throw std::invalid_argument("lora rank must be in [1, embed_dim]");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw std::invalid_argument("lora dropout must be in [0,1)");
  if (targets.empty()) throw std::invalid_argument("lora needs at least one target projection");
}

std::string block_prefix(int layer) { return "backbone.blocks." + std::to_string(layer) + "."; }

std::string lora_prefix(int layer, Projection p) {
  return "lora." + std::to_string(layer) + "." + projection_name(p) + ".";
}

PosInterpolation PosInterpolation::build(int source_grid, int target_h, int target_w) {
  if (source_grid < 1 || target_h < 1 || target_w < 1) throw std::invalid_argument("grid sizes must be >= 1");
  PosInterpolation p;
  p.source_grid = source_grid;
  p.target_h = target_h;
  p.target_w = target_w;
  auto axis = [&](int dst, int target, int& i0, int& i1, float& frac) {
    double src = (dst + 0.5) * static_cast<double>(source_grid) / target - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(source_grid - 1));
    i0 = static_cast<int>(std::floor(src));
    i1 = std::min(i0 + 1, source_grid - 1);
    frac = static_cast<float>(src - i0);
  };
  for (int y = 0; y < target_h; ++y) {
    int y0, y1;
    float fy;
    axis(y, target_h, y0, y1, fy);
    for (int x = 0; x < target_w; ++x) {
      int x0, x1;
      float fx;
      axis(x, target_w, x0, x1, fx);
      p.index.push_back({y0 * source_grid + x0, y0 * source_grid + x1, y1 * source_grid + x0, y1 * source_grid + x1});
      p.weight.push_back({(1 - fy) * (1 - fx), (1 - fy) * fx, fy * (1 - fx), fy * fx});
    }
  }
  return p;
}

namespace {

int square_grid(const Tensor& pos) {
  if (pos.ndim() != 2) throw std::invalid_argument("positional embedding must be [g*g, d]");
  const auto g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(pos.dim(0)))));
  if (static_cast<std::int64_t>(g) * g != pos.dim(0)) {
    throw std::invalid_argument("positional embedding grid is not square");
  }
  return g;
}

template <typename T>
Matrix<T> apply_interp(const PosInterpolation& interp, const Tensor& pos) {
  auto src = as_matrix(pos);
  if (interp.identity()) return src.template cast<T>();
  Matrix<T> out(static_cast<Eigen::Index>(interp.index.size()), src.cols());
  for (std::size_t i = 0; i < interp.index.size(); ++i) {
    const auto& idx = interp.index[i];
    const auto& w = interp.weight[i];
    out.row(static_cast<Eigen::Index>(i)) = T(w[0]) * src.row(idx[0]).template cast<T>() +
                                            T(w[1]) * src.row(idx[1]).template cast<T>() +
                                            T(w[2]) * src.row(idx[2]).template cast<T>() +
                                            T(w[3]) * src.row(idx[3]).template cast<T>();
  }
  return out;
}

/// Rows = patches in raster order; columns follow the [d, C, p, p] kernel layout.
template <typename T>
Matrix<T> patchify(std::span<const Tensor> images, const ViTConfig& cfg, int& grid_h, int& grid_w) {
  const int p = cfg.patch_size;
  const auto& first = images.front();
  if (first.ndim() != 3 || first.dim(0) != cfg.in_channels) {
    throw std::invalid_argument("image must be [" + std::to_string(cfg.in_channels) + ",H,W], got " +
                                first.shape_string());
  }
  const int c = cfg.in_channels;
  const int h = static_cast<int>(first.dim(1));
  const int w = static_cast<int>(first.dim(2));
  if (h % p != 0 || w % p != 0) {
    throw std::invalid_argument("image dims " + std::to_string(h) + "x" + std::to_string(w) +
                                " not divisible by patch size " + std::to_string(p));
  }
  grid_h = h / p;
  grid_w = w / p;
  const int n = grid_h * grid_w;
  Matrix<T> out(static_cast<Eigen::Index>(images.size()) * n, c * p * p);
  for (std::size_t b = 0; b < images.size(); ++b) {
    const auto& img = images[b];
    if (img.shape() != first.shape()) throw std::invalid_argument("batch images must share one shape");
    const float* px = img.data().data();
    for (int gy = 0; gy < grid_h; ++gy) {
      for (int gx = 0; gx < grid_w; ++gx) {
        const auto row = static_cast<Eigen::Index>(b) * n + gy * grid_w + gx;
        int col = 0;
        for (int ch = 0; ch < c; ++ch) {
          for (int py = 0; py < p; ++py) {
            const float* src = px + (static_cast<std::size_t>(ch) * h + gy * p + py) * w + gx * p;
            for (int pxi = 0; pxi < p; ++pxi) out(row, col++) = static_cast<T>(src[pxi]);
          }
        }
      }
    }
  }
  return out;
}

template <typename T>
Matrix<T> project(const Matrix<T>& x, const ParameterSet& params, const BackboneSpec& spec, int layer,
                  Projection proj, const ForwardOptions& opt, int tokens, LoraTape* tape) {
  const std::string base = block_prefix(layer) + "attn." + projection_name(proj);
  Matrix<T> y = linear<T>(x, params, base);
  if (!spec.lora || spec.lora_merged || !spec.lora->targets_projection(proj)) return y;

  const std::string lp = lora_prefix(layer, proj);
  const auto& A = param(params, lp + "A");
  const auto& B = param(params, lp + "B");
  const double p_drop = spec.lora->dropout;
  const bool drop = opt.training && p_drop > 0.0;

  Matrix<T> input = x;
  Matrix<float> keep;
  if (drop) {
    if (opt.dropout_seeds.size() * tokens != static_cast<std::size_t>(x.rows())) {
      throw std::invalid_argument("training forward needs one dropout seed per image");
    }
    keep.resize(x.rows(), x.cols());
    const float scale = static_cast<float>(1.0 / (1.0 - p_drop));
    for (std::size_t b = 0; b < opt.dropout_seeds.size(); ++b) {
      Rng rng(derive_seed(opt.dropout_seeds[b], {static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(proj)}));
      for (int r = 0; r < tokens; ++r) {
        for (Eigen::Index c = 0; c < x.cols(); ++c) {
          keep(static_cast<Eigen::Index>(b) * tokens + r, c) = rng.bernoulli(p_drop) ? 0.0f : scale;
        }
      }
    }
    input.array() *= keep.template cast<T>().array();
  }
  Matrix<T> down = input * as_matrix(A).template cast<T>().transpose();
  y.noalias() += T(spec.lora->scaling()) * (down * as_matrix(B).template cast<T>().transpose());
  if (tape) {
    if constexpr (std::is_same_v<T, float>) {
      tape->active = true;
      tape->input = std::move(input);
      tape->keep = std::move(keep);
      tape->down = std::move(down);
    }
  }
  return y;
}

bool block_has_trainable(const TrainableSet& trainable, int layer) {
  const std::string bp = block_prefix(layer);
  const std::string lp = "lora." + std::to_string(layer) + ".";
  for (const auto& name : trainable) {
    if (name.compare(0, bp.size(), bp) == 0 || name.compare(0, lp.size(), lp) == 0) return true;
  }
  return false;
}

bool embedding_has_trainable(const TrainableSet& trainable) {
  for (const char* n : {"backbone.patch_embed.weight", "backbone.patch_embed.bias", "backbone.pos_embed",
                        "backbone.cls_token", "backbone.mask_token"}) {
    if (trainable.count(n)) return true;
  }
  return false;
}

Matrix<float> project_backward(const Matrix<float>& x, const Matrix<float>& dy, const ParameterSet& params,
                               const BackboneSpec& spec, int layer, Projection proj, const LoraTape& lt,
                               const TrainableSet& trainable, ParameterSet& grads) {
  const std::string base = block_prefix(layer) + "attn." + projection_name(proj);
  Matrix<float> dx;
  linear_backward(x, dy, params, base, trainable, grads, &dx);
  if (!lt.active) return dx;
  const std::string lp = lora_prefix(layer, proj);
  const float s = static_cast<float>(spec.lora->scaling());
  const auto A = as_matrix(param(params, lp + "A"));
  const auto B = as_matrix(param(params, lp + "B"));
  if (trainable.count(lp + "B")) as_matrix(grad_slot(grads, params, lp + "B")).noalias() += s * dy.transpose() * lt.down;
  Matrix<float> d_down = s * (dy * B);
  if (trainable.count(lp + "A")) as_matrix(grad_slot(grads, params, lp + "A")).noalias() += d_down.transpose() * lt.input;
  Matrix<float> d_in = d_down * A;
  if (lt.keep.size() > 0) d_in.array() *= lt.keep.array();
  dx += d_in;
  return dx;
}

}  // namespace

Tensor interpolate_pos_embed(const Tensor& pos, int target_grid) {
  return interpolate_pos_embed(pos, target_grid, target_grid);
}

Tensor interpolate_pos_embed(const Tensor& pos, int target_h, int target_w) {
  const int g = square_grid(pos);
  auto interp = PosInterpolation::build(g, target_h, target_w);
  return to_tensor(apply_interp<float>(interp, pos));
}

ParameterSet init_backbone(const ViTConfig& cfg, Rng& rng) {
  cfg.validate();
  const std::int64_t d = cfg.embed_dim;
  const std::int64_t hidden = cfg.mlp_hidden();
  const std::int64_t patch_dim = static_cast<std::int64_t>(cfg.in_channels) * cfg.patch_size * cfg.patch_size;
  ParameterSet p;
  auto trunc = [&](Shape shape) {
    Tensor t(std::move(shape), 0.0f);
    for (float& v : t.data()) v = static_cast<float>(rng.truncated_normal(0.02));
    return t;
  };
  p["backbone.patch_embed.weight"] = trunc({d, patch_dim});
  p["backbone.patch_embed.bias"] = Tensor({d}, 0.0f);
  p["backbone.pos_embed"] = trunc({static_cast<std::int64_t>(cfg.base_grid) * cfg.base_grid, d});
  p["backbone.cls_token"] = Tensor({d}, 0.0f);
  p["backbone.mask_token"] = Tensor({d}, 0.0f);
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string bp = block_prefix(l);
    p[bp + "norm1.weight"] = Tensor({d}, 1.0f);
    p[bp + "norm1.bias"] = Tensor({d}, 0.0f);
    for (auto proj : {Projection::q, Projection::k, Projection::v, Projection::o}) {
      const std::string ap = bp + "attn." + projection_name(proj);
      p[ap + ".weight"] = trunc({d, d});
      p[ap + ".bias"] = Tensor({d}, 0.0f);
    }
    p[bp + "norm2.weight"] = Tensor({d}, 1.0f);
    p[bp + "norm2.bias"] = Tensor({d}, 0.0f);
    p[bp + "mlp.fc1.weight"] = trunc({hidden, d});
    p[bp + "mlp.fc1.bias"] = Tensor({hidden}, 0.0f);
    p[bp + "mlp.fc2.weight"] = trunc({d, hidden});
    p[bp + "mlp.fc2.bias"] = Tensor({d}, 0.0f);
  }
  p["backbone.norm.weight"] = Tensor({d}, 1.0f);
  p["backbone.norm.bias"] = Tensor({d}, 0.0f);
  return p;
}

template <typename T>
EncoderBatch<T> encode(const ParameterSet& params, const BackboneSpec& spec, std::span<const Tensor> images,
                       const ForwardOptions& opt, EncoderTape* tape) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  if constexpr (!std::is_same_v<T, float>) {
    if (tape) throw std::invalid_argument("tapes are recorded in float precision only");
  }
  if (images.empty()) throw std::invalid_argument("empty image batch");
  const ViTConfig& cfg = spec.vit;
  const int B = static_cast<int>(images.size());
  const int d = cfg.embed_dim;
  const int heads = cfg.num_heads;
  const int dk = cfg.head_dim();

  EncoderBatch<T> out;
  Matrix<T> patches = patchify<T>(images, cfg, out.grid_h, out.grid_w);
  const int N = out.grid_h * out.grid_w;
  const int n = N + 1;
  out.batch = B;
  out.num_patches = N;

  if (!opt.masks.empty() && opt.masks.size() != images.size()) {
    throw std::invalid_argument("mask list must have one entry per image");
  }
  for (const auto& m : opt.masks) {
    for (int idx : m) {
      if (idx < 0 || idx >= N) {
        throw std::out_of_range("mask index " + std::to_string(idx) + " out of range for " + std::to_string(N) +
                                " patches");
      }
    }
  }

  Matrix<T> emb = linear<T>(patches, params, "backbone.patch_embed");
  if (!opt.masks.empty()) {
    const auto mask_token = bias<T>(params, "backbone.mask_token");
    for (int b = 0; b < B; ++b) {
      for (int idx : opt.masks[b]) emb.row(static_cast<Eigen::Index>(b) * N + idx) = mask_token;
    }
  }
  const int g = square_grid(param(params, "backbone.pos_embed"));
  auto interp = PosInterpolation::build(g, out.grid_h, out.grid_w);
  const Matrix<T> pos = apply_interp<T>(interp, param(params, "backbone.pos_embed"));
  const auto cls_token = bias<T>(params, "backbone.cls_token");

  Matrix<T> x(static_cast<Eigen::Index>(B) * n, d);
  for (int b = 0; b < B; ++b) {
    x.row(static_cast<Eigen::Index>(b) * n) = cls_token;
    x.block(static_cast<Eigen::Index>(b) * n + 1, 0, N, d) = emb.block(static_cast<Eigen::Index>(b) * N, 0, N, d) + pos;
  }

  if (tape) {
    tape->recorded = true;
    tape->batch = B;
    tape->tokens = n;
    tape->grid_h = out.grid_h;
    tape->grid_w = out.grid_w;
    if constexpr (std::is_same_v<T, float>) tape->patches = std::move(patches);
    tape->masks = opt.masks;
    tape->interp = interp;
    tape->blocks.assign(cfg.depth, BlockTape{});
  }
  if (opt.capture_attention) {
    out.attention.assign(B, AttentionStack{cfg.depth, heads, n, {}});
    for (auto& st : out.attention) st.maps.reserve(static_cast<std::size_t>(cfg.depth) * heads);
  }

  const T scale = T(1) / std::sqrt(static_cast<T>(dk));
  for (int l = 0; l < cfg.depth; ++l) {
    const std::string bp = block_prefix(l);
    BlockTape* bt = tape ? &tape->blocks[l] : nullptr;
    LayerNormCache* ln1 = bt ? &bt->ln1 : nullptr;
    Matrix<T> h1 = layer_norm<T>(x, params, bp + "norm1", ln1);
    Matrix<T> q = project<T>(h1, params, spec, l, Projection::q, opt, n, bt ? &bt->lora[0] : nullptr);
    Matrix<T> k = project<T>(h1, params, spec, l, Projection::k, opt, n, bt ? &bt->lora[1] : nullptr);
    Matrix<T> v = project<T>(h1, params, spec, l, Projection::v, opt, n, bt ? &bt->lora[2] : nullptr);
    Matrix<T> ctx(x.rows(), d);
    if (bt) bt->probs.resize(static_cast<std::size_t>(B) * heads);
    for (int b = 0; b < B; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * n;
      for (int h = 0; h < heads; ++h) {
        Matrix<T> s = (q.block(r0, h * dk, n, dk) * k.block(r0, h * dk, n, dk).transpose()) * scale;
        softmax_rows_inplace(s);
        ctx.block(r0, h * dk, n, dk).noalias() = s * v.block(r0, h * dk, n, dk);
        if (opt.capture_attention) {
          Matrix<float> sf = s.template cast<float>();
          out.attention[b].maps.emplace_back(Shape{n, n}, std::vector<float>(sf.data(), sf.data() + sf.size()));
        }
        if (bt) {
          if constexpr (std::is_same_v<T, float>) bt->probs[static_cast<std::size_t>(b) * heads + h] = std::move(s);
        }
      }
    }
    Matrix<T> attn_out = project<T>(ctx, params, spec, l, Projection::o, opt, n, bt ? &bt->lora[3] : nullptr);
    if (bt) {
      if constexpr (std::is_same_v<T, float>) {
        bt->x_in = x;
        bt->h1 = std::move(h1);
        bt->q = std::move(q);
        bt->k = std::move(k);
        bt->v = std::move(v);
        bt->ctx = std::move(ctx);
      }
    }
    x += attn_out;
    Matrix<T> h2 = layer_norm<T>(x, params, bp + "norm2", bt ? &bt->ln2 : nullptr);
    Matrix<T> f1 = linear<T>(h2, params, bp + "mlp.fc1");
    Matrix<T> gact = f1.unaryExpr([](T a) { return gelu(a); });
    x += linear<T>(gact, params, bp + "mlp.fc2");
    if (bt) {
      if constexpr (std::is_same_v<T, float>) {
        bt->h2 = std::move(h2);
        bt->f1 = std::move(f1);
        bt->g = std::move(gact);
      }
    }
  }

  Matrix<T> y = layer_norm<T>(x, params, "backbone.norm", tape ? &tape->final_ln : nullptr);
  out.cls.resize(B, d);
  out.patches.resize(static_cast<Eigen::Index>(B) * N, d);
  for (int b = 0; b < B; ++b) {
    out.cls.row(b) = y.row(static_cast<Eigen::Index>(b) * n);
    out.patches.block(static_cast<Eigen::Index>(b) * N, 0, N, d) = y.block(static_cast<Eigen::Index>(b) * n + 1, 0, N, d);
  }
  return out;
}

template EncoderBatch<float> encode<float>(const ParameterSet&, const BackboneSpec&, std::span<const Tensor>,
                                           const ForwardOptions&, EncoderTape*);
template EncoderBatch<double> encode<double>(const ParameterSet&, const BackboneSpec&, std::span<const Tensor>,
                                             const ForwardOptions&, EncoderTape*);

void encode_backward(const ParameterSet& params, const BackboneSpec& spec, const EncoderTape& tape,
                     const Matrix<float>& d_cls, const Matrix<float>* d_patches, const TrainableSet& trainable,
                     ParameterSet& grads) {
  if (!tape.recorded) throw std::logic_error("backward called without a recorded forward");
  const ViTConfig& cfg = spec.vit;
  const int B = tape.batch;
  const int n = tape.tokens;
  const int N = n - 1;
  const int d = cfg.embed_dim;
  const int heads = cfg.num_heads;
  const int dk = cfg.head_dim();
  if (d_cls.rows() != B || d_cls.cols() != d) throw std::invalid_argument("d_cls shape mismatch");
  if (d_patches && (d_patches->rows() != static_cast<Eigen::Index>(B) * N || d_patches->cols() != d)) {
    throw std::invalid_argument("d_patches shape mismatch");
  }

  // Lowest block that must be visited; nothing below it (or the embeddings) trains.
  const bool embed_trains = embedding_has_trainable(trainable);
  int lowest = cfg.depth;
  if (embed_trains) {
    lowest = 0;
  } else {
    for (int l = 0; l < cfg.depth; ++l) {
      if (block_has_trainable(trainable, l)) {
        lowest = l;
        break;
      }
    }
  }

  Matrix<float> dy = Matrix<float>::Zero(static_cast<Eigen::Index>(B) * n, d);
  for (int b = 0; b < B; ++b) {
    dy.row(static_cast<Eigen::Index>(b) * n) = d_cls.row(b);
    if (d_patches) dy.block(static_cast<Eigen::Index>(b) * n + 1, 0, N, d) = d_patches->block(static_cast<Eigen::Index>(b) * N, 0, N, d);
  }
  Matrix<float> dx = layer_norm_backward(tape.final_ln, dy, params, "backbone.norm", trainable, grads);
  if (lowest == cfg.depth) return;

  const float scale = 1.0f / std::sqrt(static_cast<float>(dk));
  for (int l = cfg.depth - 1; l >= lowest; --l) {
    const BlockTape& bt = tape.blocks[l];
    const std::string bp = block_prefix(l);

    // MLP branch.
    Matrix<float> dg;
    linear_backward(bt.g, dx, params, bp + "mlp.fc2", trainable, grads, &dg);
    Matrix<float> df1 = dg.array() * bt.f1.unaryExpr([](float a) { return gelu_grad(a); }).array();
    Matrix<float> dh2;
    linear_backward(bt.h2, df1, params, bp + "mlp.fc1", trainable, grads, &dh2);
    dx += layer_norm_backward(bt.ln2, dh2, params, bp + "norm2", trainable, grads);

    // Attention branch.
    Matrix<float> dctx = project_backward(bt.ctx, dx, params, spec, l, Projection::o, bt.lora[3], trainable, grads);
    Matrix<float> dq(dctx.rows(), d), dk_m(dctx.rows(), d), dv(dctx.rows(), d);
    for (int b = 0; b < B; ++b) {
      const auto r0 = static_cast<Eigen::Index>(b) * n;
      for (int h = 0; h < heads; ++h) {
        const Matrix<float>& A = bt.probs[static_cast<std::size_t>(b) * heads + h];
        const auto dO = dctx.block(r0, h * dk, n, dk);
        Matrix<float> dA = dO * bt.v.block(r0, h * dk, n, dk).transpose();
        dv.block(r0, h * dk, n, dk).noalias() = A.transpose() * dO;
        Eigen::VectorXf rowdot = (dA.array() * A.array()).rowwise().sum();
        Matrix<float> dS = A.array() * (dA.colwise() - rowdot).array();
        dS *= scale;
        dq.block(r0, h * dk, n, dk).noalias() = dS * bt.k.block(r0, h * dk, n, dk);
        dk_m.block(r0, h * dk, n, dk).noalias() = dS.transpose() * bt.q.block(r0, h * dk, n, dk);
      }
    }
    Matrix<float> dh1 = project_backward(bt.h1, dq, params, spec, l, Projection::q, bt.lora[0], trainable, grads);
    dh1 += project_backward(bt.h1, dk_m, params, spec, l, Projection::k, bt.lora[1], trainable, grads);
    dh1 += project_backward(bt.h1, dv, params, spec, l, Projection::v, bt.lora[2], trainable, grads);
    dx += layer_norm_backward(bt.ln1, dh1, params, bp + "norm1", trainable, grads);
  }
  if (!embed_trains) return;

  // Token assembly: x[b*n] = cls, x[b*n+1+i] = emb[b*N+i] + pos[i].
  if (trainable.count("backbone.cls_token")) {
    auto g = as_matrix(grad_slot(grads, params, "backbone.cls_token"));
    for (int b = 0; b < B; ++b) g += dx.row(static_cast<Eigen::Index>(b) * n);
  }
  Matrix<float> demb(static_cast<Eigen::Index>(B) * N, d);
  for (int b = 0; b < B; ++b) {
    demb.block(static_cast<Eigen::Index>(b) * N, 0, N, d) = dx.block(static_cast<Eigen::Index>(b) * n + 1, 0, N, d);
  }
  if (trainable.count("backbone.pos_embed")) {
    Matrix<float> dpos = Matrix<float>::Zero(N, d);
    for (int b = 0; b < B; ++b) dpos += demb.block(static_cast<Eigen::Index>(b) * N, 0, N, d);
    auto g = as_matrix(grad_slot(grads, params, "backbone.pos_embed"));
    if (tape.interp.identity()) {
      g += dpos;
    } else {
      for (std::size_t i = 0; i < tape.interp.index.size(); ++i) {
        for (int c = 0; c < 4; ++c) {
          g.row(tape.interp.index[i][c]) += tape.interp.weight[i][c] * dpos.row(static_cast<Eigen::Index>(i));
        }
      }
    }
  }
  if (!tape.masks.empty()) {
    const bool mt = trainable.count("backbone.mask_token") > 0;
    for (int b = 0; b < B; ++b) {
      for (int idx : tape.masks[b]) {
        const auto r = static_cast<Eigen::Index>(b) * N + idx;
        if (mt) as_matrix(grad_slot(grads, params, "backbone.mask_token")) += demb.row(r);
        demb.row(r).setZero();
      }
    }
  }
  linear_backward(tape.patches, demb, params, "backbone.patch_embed", trainable, grads, nullptr);
}

std::vector<EncoderOutput> forward(const ParameterSet& params, const BackboneSpec& spec,
                                   std::span<const Tensor> images, const ForwardOptions& options) {
  auto batch = encode<float>(params, spec, images, options, nullptr);
  std::vector<EncoderOutput> outs(batch.batch);
  const int d = spec.vit.embed_dim;
  const int N = batch.num_patches;
  for (int b = 0; b < batch.batch; ++b) {
    outs[b].cls = Tensor({d}, std::vector<float>(batch.cls.row(b).data(), batch.cls.row(b).data() + d));
    const float* p0 = batch.patches.data() + static_cast<std::size_t>(b) * N * d;
    outs[b].patch_tokens = Tensor({N, d}, std::vector<float>(p0, p0 + static_cast<std::size_t>(N) * d));
    if (options.capture_attention) outs[b].attention = std::move(batch.attention[b]);
  }
  return outs;
}

}  // namespace dinomx
