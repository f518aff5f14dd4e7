#include <doctest.h>

#include "dinomx/augment.hpp"
#include "support.hpp"

using namespace dinomx;

namespace {

Tensor ramp_image(int c, int h, int w) {
  Tensor t({c, h, w});
  for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(i % 97) / 97.0f;
  return t;
}

RoiMask single_pixel_roi(int h, int w, int r, int c) {
  RoiMask m{h, w, std::vector<std::uint8_t>(static_cast<std::size_t>(h) * w, 0)};
  m.mask[static_cast<std::size_t>(r) * w + c] = 1;
  return m;
}

bool forbidden(PolicyDomain d, Primitive p) {
  if (d == PolicyDomain::medical) return p == Primitive::solarize || p == Primitive::color_jitter;
  return p == Primitive::brightness_shift || p == Primitive::noise_addition;
}

}  // namespace

TEST_CASE("policy table") {
  for (auto d : {PolicyDomain::rgb, PolicyDomain::medical}) {
    for (auto p : {Primitive::hflip, Primitive::vflip, Primitive::crop, Primitive::resized_crop,
                   Primitive::gaussian_blur, Primitive::solarize, Primitive::color_jitter,
                   Primitive::brightness_shift, Primitive::noise_addition}) {
      CHECK(domain_allows(d, p) == !forbidden(d, p));
      CHECK(parse_primitive(primitive_name(p)) == p);
    }
  }
  CHECK_THROWS(parse_primitive("elastic"));
}

TEST_CASE("primitive definitions") {
  Rng rng(1);
  const auto rgb = AugmentationPolicy::rgb();
  const auto med = AugmentationPolicy::medical();
  const Tensor img = ramp_image(3, 6, 5);
  PrimitiveParams pp;

  const Tensor twice = apply_primitive(apply_primitive(img, Primitive::hflip, pp, rgb, rng), Primitive::hflip, pp, rgb, rng);
  CHECK(bit_equal(twice, img));
  const Tensor v2 = apply_primitive(apply_primitive(img, Primitive::vflip, pp, rgb, rng), Primitive::vflip, pp, rgb, rng);
  CHECK(bit_equal(v2, img));

  const Tensor constant({1, 9, 9}, 0.3f);
  pp.sigma = 1.7;
  const Tensor blurred = apply_primitive(constant, Primitive::gaussian_blur, pp, rgb, rng);
  for (float v : blurred.data()) {
    CHECK(v == doctest::Approx(0.3f).epsilon(1e-6));
  }

  Tensor px({1, 1, 1}, 0.8f);
  pp.threshold = 0.5;
  CHECK(apply_primitive(px, Primitive::solarize, pp, rgb, rng)[0] == doctest::Approx(0.2f));

  // Gating and ranges.
  CHECK_THROWS(apply_primitive(img, Primitive::solarize, pp, med, rng));
  CHECK_THROWS(apply_primitive(img, Primitive::noise_addition, pp, rgb, rng));
  PrimitiveParams bad;
  bad.sigma = 5.0;
  CHECK_THROWS(apply_primitive(img, Primitive::gaussian_blur, bad, rgb, rng));
  bad = {};
  bad.shift = 0.5;
  CHECK_THROWS(apply_primitive(img, Primitive::brightness_shift, bad, med, rng));

  // Clamping.
  PrimitiveParams up;
  up.shift = 0.2;
  const Tensor bright = apply_primitive(Tensor({1, 2, 2}, 0.95f), Primitive::brightness_shift, up, med, rng);
  for (float v : bright.data()) CHECK(v == 1.0f);
  up = {};
  up.noise_sigma = 0.1;
  const Tensor noisy = apply_primitive(ramp_image(1, 8, 8), Primitive::noise_addition, up, med, rng);
  for (float v : noisy.data()) {
    CHECK((v >= 0.0f && v <= 1.0f));
  }

  PrimitiveParams rc;
  rc.rect = CropRect{1, 1, 4, 3};
  rc.out_h = 8;
  rc.out_w = 8;
  const Tensor resized = apply_primitive(img, Primitive::resized_crop, rc, rgb, rng);
  CHECK(resized.shape() == Shape{3, 8, 8});
}

TEST_CASE("standard multi-crop config yields 2 + 8 views of the stated sizes") {
  CropConfig c;  // 224 / 96, scales [0.4,1] and [0.1,0.4]
  const ViewSet vs = make_views(ramp_image(3, 256, 256), c, AugmentationPolicy::rgb(), nullptr, 4);
  REQUIRE(vs.global_views.size() == 2);
  REQUIRE(vs.local_views.size() == 8);
  CHECK(vs.guided_views.empty());
  CHECK(vs.global_views[0].shape() == Shape{3, 224, 224});
  CHECK(vs.local_views[7].shape() == Shape{3, 96, 96});
}

TEST_CASE("crop windows respect their scale interval") {
  Rng rng(2);
  for (int i = 0; i < 2000; ++i) {
    const CropRect r = sample_crop_window(40, 30, {0.1, 0.4}, rng);
    const double frac = static_cast<double>(r.height) * r.width / (40.0 * 30.0);
    CHECK(r.top >= 0);
    CHECK(r.left >= 0);
    CHECK(r.top + r.height <= 40);
    CHECK(r.left + r.width <= 30);
    // Integer rounding of the sides moves the area by at most one row/column.
    CHECK(frac >= 0.1 - (r.height + r.width + 1) / 1200.0);
    CHECK(frac <= 0.4 + (r.height + r.width + 1) / 1200.0);
  }
}

TEST_CASE("guided crops contain their focus pixel") {
  CropConfig c;
  c.global_crops_size = 32;
  c.local_crops_size = 16;
  c.local_crops_number = 0;
  c.guided_crops_number = 4;
  const RoiMask roi = single_pixel_roi(64, 64, 40, 17);
  const Tensor img = ramp_image(1, 64, 64);
  for (std::uint64_t s = 0; s < 500; ++s) {
    const ViewSet vs = make_views(img, c, AugmentationPolicy::medical(), &roi, s);
    REQUIRE(vs.guided_views.size() == 4);
    for (const auto& pv : vs.provenance) {
      if (pv.role != ViewRole::guided) continue;
      REQUIRE(pv.focus.has_value());
      CHECK(pv.focus->first == 40);
      CHECK(pv.focus->second == 17);
      CHECK(pv.rect.contains(40, 17));
    }
  }
  c.guided_crops_number = 0;
  CHECK(make_views(img, c, AugmentationPolicy::medical(), &roi, 1).guided_views.empty());
}

TEST_CASE("empty ROI falls back to random crops flagged in provenance") {
  CropConfig c;
  c.global_crops_size = 16;
  c.local_crops_size = 8;
  c.local_crops_number = 1;
  RoiMask empty{32, 32, std::vector<std::uint8_t>(32 * 32, 0)};
  const ViewSet vs = make_views(ramp_image(1, 32, 32), c, AugmentationPolicy::medical(), &empty, 3);
  CHECK(vs.guided_views.size() == 2);
  for (const auto& pv : vs.provenance) {
    if (pv.role == ViewRole::guided) {
      CHECK(pv.fallback);
      CHECK_FALSE(pv.focus.has_value());
    }
  }
}

TEST_CASE("focus center sampling") {
  Rng rng(5);
  const RoiMask one = single_pixel_roi(8, 8, 3, 6);
  for (int i = 0; i < 50; ++i) CHECK(pick_focus_center(one, rng) == std::make_pair(3, 6));

  RoiMask two = one;
  two.mask[1 * 8 + 2] = 1;
  int first = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) first += pick_focus_center(two, rng) == std::make_pair(1, 2) ? 1 : 0;
  CHECK(std::abs(first / static_cast<double>(n) - 0.5) <= 0.02);

  RoiMask none{4, 4, std::vector<std::uint8_t>(16, 0)};
  CHECK_THROWS(pick_focus_center(none, rng));
}

TEST_CASE("view generation is deterministic and policy-gated") {
  CropConfig c;
  c.global_crops_size = 16;
  c.local_crops_size = 8;
  c.local_crops_number = 4;
  const Tensor img = ramp_image(3, 32, 32);
  const RoiMask roi = single_pixel_roi(32, 32, 10, 10);
  const ViewSet a = make_views(img, c, AugmentationPolicy::rgb(), &roi, 77);
  const ViewSet b = make_views(img, c, AugmentationPolicy::rgb(), &roi, 77);
  REQUIRE(a.global_views.size() == b.global_views.size());
  for (std::size_t i = 0; i < a.local_views.size(); ++i) CHECK(bit_equal(a.local_views[i], b.local_views[i]));
  for (std::size_t i = 0; i < a.guided_views.size(); ++i) CHECK(bit_equal(a.guided_views[i], b.guided_views[i]));

  for (auto domain : {PolicyDomain::rgb, PolicyDomain::medical}) {
    const auto pol = domain == PolicyDomain::rgb ? AugmentationPolicy::rgb() : AugmentationPolicy::medical();
    for (std::uint64_t s = 0; s < 300; ++s) {
      const ViewSet vs = make_views(img, c, pol, &roi, s);
      for (const auto& pv : vs.provenance) {
        for (Primitive p : pv.applied) CHECK_FALSE(forbidden(domain, p));
      }
    }
  }
}

TEST_CASE("crop config validation") {
  CropConfig c;
  CHECK_NOTHROW(c.validate(16));
  c.local_crops_scale = {0.5, 0.4};
  CHECK_THROWS(c.validate(16));
  c = CropConfig{};
  c.local_crops_size = 2;
  CHECK_THROWS(c.validate(4));
}
