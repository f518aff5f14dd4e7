#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "dinomx/io.hpp"
#include "dinomx/rng.hpp"
#include "dinomx/tensor.hpp"

namespace dinomx {

enum class Primitive {
  hflip,
  vflip,
  crop,
  resized_crop,
  gaussian_blur,
  solarize,
  color_jitter,
  brightness_shift,
  noise_addition,
};

std::string primitive_name(Primitive p);
Primitive parse_primitive(const std::string& name);

enum class PolicyDomain { rgb, medical };

std::string domain_name(PolicyDomain d);
PolicyDomain parse_domain(const std::string& name);

/// Whether the domain admits the primitive at all (the RGB / medical table).
bool domain_allows(PolicyDomain domain, Primitive p);

/// Which primitives may run and how often. Probabilities per view role:
/// [0] first global view, [1] remaining global views, [2] local and guided views.
struct AugmentationPolicy {
  PolicyDomain domain = PolicyDomain::rgb;
  std::set<Primitive> enabled;
  double hflip_prob = 0.5;
  double vflip_prob = 0.1;
  double crop_prob = 0.1;
  std::array<double, 3> blur_prob{1.0, 0.1, 0.5};
  std::array<double, 3> intensity_prob{0.8, 0.8, 0.8};  // color_jitter (rgb) / brightness_shift (medical)
  std::array<double, 3> extra_prob{0.0, 0.2, 0.0};      // solarize (rgb) / noise_addition (medical)

  static AugmentationPolicy rgb();
  static AugmentationPolicy medical();
  bool allows(Primitive p) const { return enabled.count(p) > 0 && domain_allows(domain, p); }
  void validate() const;
};

struct CropRect {
  int top = 0;
  int left = 0;
  int height = 0;
  int width = 0;

  bool contains(int row, int col) const {
    return row >= top && row < top + height && col >= left && col < left + width;
  }
};

/// Parameter bundle; each primitive reads only its own fields.
struct PrimitiveParams {
  CropRect rect;        // resized_crop source window
  int out_h = 0;        // resized_crop output size
  int out_w = 0;
  int padding = 0;      // crop: zero-pad then take a random window of the input size
  double sigma = 1.0;   // gaussian_blur, in [0.1, 2.0]
  double threshold = 0.5;        // solarize, in [0, 1]
  double brightness = 1.0;       // color_jitter factors
  double contrast = 1.0;
  double saturation = 1.0;
  double shift = 0.0;            // brightness_shift, in [-0.2, 0.2]
  double noise_sigma = 0.05;     // noise_addition, in [0.01, 0.1]
};

/// Applies one primitive to a [C,H,W] image; result is clamped to [0,1].
/// Throws when the policy disables `kind` or a parameter is out of range.
Tensor apply_primitive(const Tensor& image, Primitive kind, const PrimitiveParams& params,
                       const AugmentationPolicy& policy, Rng& rng);

struct CropConfig {
  std::array<double, 2> global_crops_scale{0.4, 1.0};
  std::array<double, 2> local_crops_scale{0.1, 0.4};
  int global_crops_number = 2;
  int local_crops_number = 8;
  int global_crops_size = 224;
  int local_crops_size = 96;
  int guided_crops_number = 2;

  void validate(int patch_size) const;
  bool operator==(const CropConfig&) const = default;
};

enum class ViewRole { global, local, guided };

struct ViewProvenance {
  ViewRole role = ViewRole::global;
  CropRect rect;
  std::optional<std::pair<int, int>> focus;  // guided views: (row, col)
  bool fallback = false;                     // guided slot filled by a random crop (empty ROI)
  std::vector<Primitive> applied;
};

struct ViewSet {
  std::vector<Tensor> global_views;
  std::vector<Tensor> local_views;
  std::vector<Tensor> guided_views;
  std::vector<ViewProvenance> provenance;  // globals, then locals, then guided
  std::uint64_t rng_seed = 0;
};

/// Uniform draw over the nonzero pixels of `roi`.
std::pair<int, int> pick_focus_center(const RoiMask& roi, Rng& rng);

/// Random window whose area fraction lies in [scale[0], scale[1]].
CropRect sample_crop_window(int height, int width, std::array<double, 2> scale, Rng& rng);

/// Square window with side from `scale` (area fraction) that contains (row, col),
/// placed uniformly among all such positions.
CropRect sample_guided_window(int height, int width, std::array<double, 2> scale, int row, int col, Rng& rng);

/// Multi-crop generation. Guided views are produced only when `roi` is given;
/// an all-zero ROI fills the guided slots with random local crops flagged as fallback.
ViewSet make_views(const Tensor& image, const CropConfig& crops, const AugmentationPolicy& policy,
                   const RoiMask* roi, std::uint64_t seed);

}  // namespace dinomx
