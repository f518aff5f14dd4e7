#include "dinomx/augment.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace dinomx {

namespace {

constexpr Primitive kAllPrimitives[] = {
    Primitive::hflip,         Primitive::vflip,    Primitive::crop,
    Primitive::resized_crop,  Primitive::gaussian_blur, Primitive::solarize,
    Primitive::color_jitter,  Primitive::brightness_shift, Primitive::noise_addition,
};

struct Dims {
  int c, h, w;
};

Dims dims_of(const Tensor& img) {
  if (img.ndim() != 3) throw std::invalid_argument("augmentation expects a [C,H,W] image");
  return {static_cast<int>(img.dim(0)), static_cast<int>(img.dim(1)), static_cast<int>(img.dim(2))};
}

void clamp01(Tensor& t) {
  for (float& v : t.data()) v = std::clamp(v, 0.0f, 1.0f);
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

Tensor resize_bilinear(const Tensor& img, const CropRect& r, int out_h, int out_w) {
  const Dims d = dims_of(img);
  Tensor out({d.c, out_h, out_w}, 0.0f);
  const float* src = img.data().data();
  float* dst = out.data().data();
  for (int y = 0; y < out_h; ++y) {
    double sy = r.top + (y + 0.5) * r.height / static_cast<double>(out_h) - 0.5;
    sy = std::clamp(sy, static_cast<double>(r.top), static_cast<double>(r.top + r.height - 1));
    const int y0 = static_cast<int>(std::floor(sy));
    const int y1 = std::min(y0 + 1, r.top + r.height - 1);
    const float fy = static_cast<float>(sy - y0);
    for (int x = 0; x < out_w; ++x) {
      double sx = r.left + (x + 0.5) * r.width / static_cast<double>(out_w) - 0.5;
      sx = std::clamp(sx, static_cast<double>(r.left), static_cast<double>(r.left + r.width - 1));
      const int x0 = static_cast<int>(std::floor(sx));
      const int x1 = std::min(x0 + 1, r.left + r.width - 1);
      const float fx = static_cast<float>(sx - x0);
      for (int c = 0; c < d.c; ++c) {
        const float* p = src + static_cast<std::size_t>(c) * d.h * d.w;
        const float v = (1 - fy) * ((1 - fx) * p[y0 * d.w + x0] + fx * p[y0 * d.w + x1]) +
                        fy * ((1 - fx) * p[y1 * d.w + x0] + fx * p[y1 * d.w + x1]);
        dst[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = v;
      }
    }
  }
  return out;
}

Tensor flip(const Tensor& img, bool horizontal) {
  const Dims d = dims_of(img);
  Tensor out = img;
  const float* s = img.data().data();
  float* o = out.data().data();
  for (int c = 0; c < d.c; ++c) {
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        const int sy = horizontal ? y : d.h - 1 - y;
        const int sx = horizontal ? d.w - 1 - x : x;
        o[(static_cast<std::size_t>(c) * d.h + y) * d.w + x] = s[(static_cast<std::size_t>(c) * d.h + sy) * d.w + sx];
      }
    }
  }
  return out;
}

int reflect(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) i = i < 0 ? -i - 1 : 2 * n - i - 1;
  return i;
}

Tensor blur(const Tensor& img, double sigma) {
  const Dims d = dims_of(img);
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) sum += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& v : k) v /= sum;
  Tensor tmp = img;
  Tensor out = img;
  const float* s = img.data().data();
  float* t = tmp.data().data();
  float* o = out.data().data();
  for (int c = 0; c < d.c; ++c) {
    const std::size_t base = static_cast<std::size_t>(c) * d.h * d.w;
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * s[base + y * d.w + reflect(x + i, d.w)];
        t[base + y * d.w + x] = static_cast<float>(acc);
      }
    }
    for (int y = 0; y < d.h; ++y) {
      for (int x = 0; x < d.w; ++x) {
        double acc = 0.0;
        for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * t[base + reflect(y + i, d.h) * d.w + x];
        o[base + y * d.w + x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Tensor color_jitter(const Tensor& img, double brightness, double contrast, double saturation) {
  const Dims d = dims_of(img);
  Tensor out = img;
  const std::size_t plane = static_cast<std::size_t>(d.h) * d.w;
  for (float& v : out.data()) v = static_cast<float>(v * brightness);
  clamp01(out);
  // Contrast blends toward the mean luminance.
  double mean = 0.0;
  if (d.c == 3) {
    for (std::size_t i = 0; i < plane; ++i) mean += 0.299 * out[i] + 0.587 * out[plane + i] + 0.114 * out[2 * plane + i];
  } else {
    for (std::size_t i = 0; i < plane; ++i) mean += out[i];
  }
  mean /= static_cast<double>(plane);
  for (float& v : out.data()) v = static_cast<float>((v - mean) * contrast + mean);
  clamp01(out);
  if (d.c == 3) {
    for (std::size_t i = 0; i < plane; ++i) {
      const double gray = 0.299 * out[i] + 0.587 * out[plane + i] + 0.114 * out[2 * plane + i];
      for (int c = 0; c < 3; ++c) {
        float& v = out[c * plane + i];
        v = static_cast<float>(gray + saturation * (v - gray));
      }
    }
  }
  return out;
}

}  // namespace

std::string primitive_name(Primitive p) {
  switch (p) {
    case Primitive::hflip: return "hflip";
    case Primitive::vflip: return "vflip";
    case Primitive::crop: return "crop";
    case Primitive::resized_crop: return "resized_crop";
    case Primitive::gaussian_blur: return "gaussian_blur";
    case Primitive::solarize: return "solarize";
    case Primitive::color_jitter: return "color_jitter";
    case Primitive::brightness_shift: return "brightness_shift";
    case Primitive::noise_addition: return "noise_addition";
  }
  return "?";
}

Primitive parse_primitive(const std::string& name) {
  for (auto p : kAllPrimitives) {
    if (primitive_name(p) == name) return p;
  }
  throw std::invalid_argument("unknown augmentation primitive '" + name + "'");
}

std::string domain_name(PolicyDomain d) { return d == PolicyDomain::rgb ? "rgb" : "medical"; }

PolicyDomain parse_domain(const std::string& name) {
  if (name == "rgb") return PolicyDomain::rgb;
  if (name == "medical") return PolicyDomain::medical;
  throw std::invalid_argument("unknown augmentation domain '" + name + "' (expected rgb or medical)");
}

bool domain_allows(PolicyDomain domain, Primitive p) {
  switch (p) {
    case Primitive::solarize:
    case Primitive::color_jitter:
      return domain == PolicyDomain::rgb;
    case Primitive::brightness_shift:
    case Primitive::noise_addition:
      return domain == PolicyDomain::medical;
    default:
      return true;
  }
}

AugmentationPolicy AugmentationPolicy::rgb() {
  AugmentationPolicy p;
  p.domain = PolicyDomain::rgb;
  for (auto k : kAllPrimitives) {
    if (domain_allows(p.domain, k)) p.enabled.insert(k);
  }
  return p;
}

AugmentationPolicy AugmentationPolicy::medical() {
  AugmentationPolicy p = rgb();
  p.domain = PolicyDomain::medical;
  p.enabled.clear();
  for (auto k : kAllPrimitives) {
    if (domain_allows(p.domain, k)) p.enabled.insert(k);
  }
  p.extra_prob = {0.0, 0.2, 0.2};
  return p;
}

void AugmentationPolicy::validate() const {
  for (auto k : enabled) {
    if (!domain_allows(domain, k)) {
      throw std::invalid_argument(primitive_name(k) + " is not permitted by the " + domain_name(domain) + " policy");
    }
  }
  auto prob_ok = [](double p) { return p >= 0.0 && p <= 1.0; };
  bool ok = prob_ok(hflip_prob) && prob_ok(vflip_prob) && prob_ok(crop_prob);
  for (int i = 0; i < 3; ++i) ok = ok && prob_ok(blur_prob[i]) && prob_ok(intensity_prob[i]) && prob_ok(extra_prob[i]);
  if (!ok) throw std::invalid_argument("augmentation probabilities must be in [0,1]");
}

Tensor apply_primitive(const Tensor& image, Primitive kind, const PrimitiveParams& prm,
                       const AugmentationPolicy& policy, Rng& rng) {
  if (!policy.allows(kind)) {
    throw std::invalid_argument(primitive_name(kind) + " is disabled by the active " + domain_name(policy.domain) +
                                " policy");
  }
  const Dims d = dims_of(image);
  Tensor out;
  switch (kind) {
    case Primitive::hflip:
      out = flip(image, true);
      break;
    case Primitive::vflip:
      out = flip(image, false);
      break;
    case Primitive::crop: {
      require(prm.padding >= 0 && prm.padding <= std::min(d.h, d.w) / 2, "crop padding out of range");
      const int dy = static_cast<int>(rng.uniform_int(0, 2 * prm.padding)) - prm.padding;
      const int dx = static_cast<int>(rng.uniform_int(0, 2 * prm.padding)) - prm.padding;
      out = Tensor(image.shape(), 0.0f);
      for (int c = 0; c < d.c; ++c) {
        for (int y = 0; y < d.h; ++y) {
          for (int x = 0; x < d.w; ++x) {
            const int sy = y + dy;
            const int sx = x + dx;
            if (sy < 0 || sy >= d.h || sx < 0 || sx >= d.w) continue;
            out[(static_cast<std::size_t>(c) * d.h + y) * d.w + x] = image[(static_cast<std::size_t>(c) * d.h + sy) * d.w + sx];
          }
        }
      }
      break;
    }
    case Primitive::resized_crop: {
      const CropRect& r = prm.rect;
      require(r.height > 0 && r.width > 0 && r.top >= 0 && r.left >= 0 && r.top + r.height <= d.h &&
                  r.left + r.width <= d.w,
              "resized_crop window outside the image");
      require(prm.out_h > 0 && prm.out_w > 0, "resized_crop output size must be positive");
      out = resize_bilinear(image, r, prm.out_h, prm.out_w);
      break;
    }
    case Primitive::gaussian_blur:
      require(prm.sigma >= 0.1 && prm.sigma <= 2.0, "gaussian_blur sigma outside [0.1, 2.0]");
      out = blur(image, prm.sigma);
      break;
    case Primitive::solarize:
      require(prm.threshold >= 0.0 && prm.threshold <= 1.0, "solarize threshold outside [0, 1]");
      out = image;
      for (float& v : out.data()) {
        if (v >= prm.threshold) v = 1.0f - v;
      }
      break;
    case Primitive::color_jitter:
      require(prm.brightness >= 0.6 && prm.brightness <= 1.4 && prm.contrast >= 0.6 && prm.contrast <= 1.4 &&
                  prm.saturation >= 0.8 && prm.saturation <= 1.2,
              "color_jitter factors out of range");
      out = color_jitter(image, prm.brightness, prm.contrast, prm.saturation);
      break;
    case Primitive::brightness_shift:
      require(prm.shift >= -0.2 && prm.shift <= 0.2, "brightness_shift outside [-0.2, 0.2]");
      out = image;
      for (float& v : out.data()) v = static_cast<float>(v + prm.shift);
      break;
    case Primitive::noise_addition:
      require(prm.noise_sigma >= 0.01 && prm.noise_sigma <= 0.1, "noise sigma outside [0.01, 0.1]");
      out = image;
      for (float& v : out.data()) v = static_cast<float>(v + rng.normal(0.0, prm.noise_sigma));
      break;
  }
  clamp01(out);
  return out;
}

void CropConfig::validate(int patch_size) const {
  for (const auto& s : {global_crops_scale, local_crops_scale}) {
    if (!(s[0] > 0.0 && s[0] <= s[1] && s[1] <= 1.0)) {
      throw std::invalid_argument("crop scale ranges must satisfy 0 < lo <= hi <= 1");
    }
  }
  if (global_crops_number < 1) throw std::invalid_argument("global_crops_number must be >= 1");
  if (local_crops_number < 0 || guided_crops_number < 0) throw std::invalid_argument("crop counts must be >= 0");
  if (global_crops_size < patch_size || local_crops_size < patch_size) {
    throw std::invalid_argument("crop sizes must be >= patch_size");
  }
}

std::pair<int, int> pick_focus_center(const RoiMask& roi, Rng& rng) {
  const std::size_t count = roi.positive_count();
  if (count == 0) throw std::invalid_argument("pick_focus_center: ROI has no nonzero pixels");
  auto target = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(count) - 1));
  for (std::size_t i = 0; i < roi.mask.size(); ++i) {
    if (roi.mask[i] && target-- == 0) {
      return {static_cast<int>(i / roi.width), static_cast<int>(i % roi.width)};
    }
  }
  throw std::logic_error("unreachable");
}

CropRect sample_crop_window(int height, int width, std::array<double, 2> scale, Rng& rng) {
  const double area = static_cast<double>(height) * width;
  const double log_lo = std::log(3.0 / 4.0);
  const double log_hi = std::log(4.0 / 3.0);
  for (int attempt = 0; attempt < 10; ++attempt) {
    const double target = rng.uniform(scale[0], scale[1]) * area;
    const double ratio = std::exp(rng.uniform(log_lo, log_hi));
    const int w = static_cast<int>(std::lround(std::sqrt(target * ratio)));
    const int h = static_cast<int>(std::lround(std::sqrt(target / ratio)));
    if (w < 1 || h < 1 || w > width || h > height) continue;
    const double frac = h * static_cast<double>(w) / area;
    if (frac < scale[0] || frac > scale[1]) continue;
    CropRect r{static_cast<int>(rng.uniform_int(0, height - h)), static_cast<int>(rng.uniform_int(0, width - w)), h, w};
    return r;
  }
  // Square fallback: any side in [ceil(sqrt(lo*A)), floor(sqrt(hi*A))] honors the interval.
  const int side_lo = std::max(1, static_cast<int>(std::ceil(std::sqrt(scale[0] * area) - 1e-9)));
  const int side_hi = std::min({static_cast<int>(std::floor(std::sqrt(scale[1] * area) + 1e-9)), height, width});
  if (side_lo > side_hi) {
    throw std::invalid_argument("degenerate crop window for a " + std::to_string(height) + "x" + std::to_string(width) +
                                " image");
  }
  const int side = static_cast<int>(rng.uniform_int(side_lo, side_hi));
  return {static_cast<int>(rng.uniform_int(0, height - side)), static_cast<int>(rng.uniform_int(0, width - side)), side,
          side};
}

CropRect sample_guided_window(int height, int width, std::array<double, 2> scale, int row, int col, Rng& rng) {
  if (row < 0 || row >= height || col < 0 || col >= width) throw std::invalid_argument("focus pixel outside image");
  const double frac = rng.uniform(scale[0], scale[1]);
  int side = static_cast<int>(std::lround(std::sqrt(frac * height * width)));
  side = std::clamp(side, 1, std::min(height, width));
  const int top_lo = std::max(0, row - side + 1);
  const int top_hi = std::min(row, height - side);
  const int left_lo = std::max(0, col - side + 1);
  const int left_hi = std::min(col, width - side);
  return {static_cast<int>(rng.uniform_int(top_lo, top_hi)), static_cast<int>(rng.uniform_int(left_lo, left_hi)), side,
          side};
}

namespace {

/// Role index into the policy's probability arrays.
int prob_slot(ViewRole role, int view_index) {
  if (role == ViewRole::global) return view_index == 0 ? 0 : 1;
  return 2;
}

Tensor run_chain(const Tensor& image, const CropRect& rect, int out_size, ViewRole role, int view_index,
                 const AugmentationPolicy& policy, Rng& rng, std::vector<Primitive>& log) {
  auto apply = [&](Tensor& img, Primitive p, const PrimitiveParams& prm) {
    img = apply_primitive(img, p, prm, policy, rng);
    log.push_back(p);
  };
  PrimitiveParams geom;
  geom.rect = rect;
  geom.out_h = geom.out_w = out_size;
  Tensor view = image;
  apply(view, Primitive::resized_crop, geom);

  // Guided crops take the medical chain; primitives outside the active policy are skipped.
  const AugmentationPolicy chain = role == ViewRole::guided ? AugmentationPolicy::medical() : policy;
  const int slot = prob_slot(role, view_index);
  auto maybe = [&](Primitive p, double prob, auto make_params) {
    const bool fire = rng.bernoulli(prob);
    if (fire && policy.allows(p) && chain.allows(p)) apply(view, p, make_params());
  };
  maybe(Primitive::hflip, chain.hflip_prob, [] { return PrimitiveParams{}; });
  maybe(Primitive::vflip, chain.vflip_prob, [] { return PrimitiveParams{}; });
  maybe(Primitive::crop, chain.crop_prob, [&] {
    PrimitiveParams p;
    p.padding = std::max(1, out_size / 8);
    return p;
  });
  if (chain.domain == PolicyDomain::rgb) {
    maybe(Primitive::color_jitter, chain.intensity_prob[slot], [&] {
      PrimitiveParams p;
      p.brightness = rng.uniform(0.6, 1.4);
      p.contrast = rng.uniform(0.6, 1.4);
      p.saturation = rng.uniform(0.8, 1.2);
      return p;
    });
  } else {
    maybe(Primitive::brightness_shift, chain.intensity_prob[slot], [&] {
      PrimitiveParams p;
      p.shift = rng.uniform(-0.2, 0.2);
      return p;
    });
  }
  maybe(Primitive::gaussian_blur, chain.blur_prob[slot], [&] {
    PrimitiveParams p;
    p.sigma = rng.uniform(0.1, 2.0);
    return p;
  });
  if (chain.domain == PolicyDomain::rgb) {
    maybe(Primitive::solarize, chain.extra_prob[slot], [] {
      PrimitiveParams p;
      p.threshold = 0.5;
      return p;
    });
  } else {
    maybe(Primitive::noise_addition, chain.extra_prob[slot], [&] {
      PrimitiveParams p;
      p.noise_sigma = rng.uniform(0.01, 0.1);
      return p;
    });
  }
  return view;
}

}  // namespace

ViewSet make_views(const Tensor& image, const CropConfig& crops, const AugmentationPolicy& policy,
                   const RoiMask* roi, std::uint64_t seed) {
  const Dims d = dims_of(image);
  if (roi && (roi->height != d.h || roi->width != d.w)) throw std::invalid_argument("ROI size does not match image");
  Rng rng(seed);
  ViewSet vs;
  vs.rng_seed = seed;
  for (int i = 0; i < crops.global_crops_number; ++i) {
    ViewProvenance pv;
    pv.role = ViewRole::global;
    pv.rect = sample_crop_window(d.h, d.w, crops.global_crops_scale, rng);
    vs.global_views.push_back(run_chain(image, pv.rect, crops.global_crops_size, pv.role, i, policy, rng, pv.applied));
    vs.provenance.push_back(std::move(pv));
  }
  for (int i = 0; i < crops.local_crops_number; ++i) {
    ViewProvenance pv;
    pv.role = ViewRole::local;
    pv.rect = sample_crop_window(d.h, d.w, crops.local_crops_scale, rng);
    vs.local_views.push_back(run_chain(image, pv.rect, crops.local_crops_size, pv.role, i, policy, rng, pv.applied));
    vs.provenance.push_back(std::move(pv));
  }
  if (roi && crops.guided_crops_number > 0) {
    const bool empty = roi->positive_count() == 0;
    for (int i = 0; i < crops.guided_crops_number; ++i) {
      ViewProvenance pv;
      pv.role = ViewRole::guided;
      if (empty) {
        pv.fallback = true;
        pv.rect = sample_crop_window(d.h, d.w, crops.local_crops_scale, rng);
      } else {
        auto focus = pick_focus_center(*roi, rng);
        pv.focus = focus;
        pv.rect = sample_guided_window(d.h, d.w, crops.local_crops_scale, focus.first, focus.second, rng);
      }
      vs.guided_views.push_back(run_chain(image, pv.rect, crops.local_crops_size, pv.role, i, policy, rng, pv.applied));
      vs.provenance.push_back(std::move(pv));
    }
  }
  return vs;
}

}  // namespace dinomx
