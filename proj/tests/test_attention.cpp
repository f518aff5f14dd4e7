#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include <fmt/core.h>

#include "dinomx/attention.hpp"
#include "support.hpp"

using namespace dinomx;
using testutil::random_tensor;
using testutil::TempDir;

namespace {

AttentionStack uniform_stack(int layers, int heads, int tokens) {
  AttentionStack s;
  s.layers = layers;
  s.heads = heads;
  s.tokens = tokens;
  for (int i = 0; i < layers * heads; ++i) s.maps.emplace_back(Shape{tokens, tokens}, 1.0f / static_cast<float>(tokens));
  return s;
}

ClsAttentionMaps random_maps(int heads, int g, Rng& rng) {
  ClsAttentionMaps m;
  m.grid_h = m.grid_w = g;
  for (int h = 0; h < heads; ++h) m.maps.push_back(random_tensor({g, g}, rng, 0, 1));
  return m;
}

RoiMask grid_mask(int h, int w, std::initializer_list<int> on) {
  RoiMask m;
  m.height = h;
  m.width = w;
  m.mask.assign(static_cast<std::size_t>(h) * w, 0);
  for (int q : on) m.mask[static_cast<std::size_t>(q)] = 1;
  return m;
}

DetectionResult with_clusters(int h, int w, std::vector<std::vector<int>> sets) {
  DetectionResult d;
  d.grid_h = h;
  d.grid_w = w;
  for (auto& s : sets) {
    Cluster c;
    c.patches = std::move(s);
    c.peak = 1.0f;
    d.clusters.push_back(std::move(c));
  }
  return d;
}

}  // namespace

TEST_CASE("cls attention shapes") {
  const ClsAttentionMaps big = cls_attention(uniform_stack(1, 12, 1 + 32 * 32));
  CHECK(big.heads() == 12);
  CHECK(big.maps[0].shape() == Shape{32, 32});
  for (float v : big.maps[5].data()) CHECK(v == doctest::Approx(1.0 / 1025.0));

  CHECK_THROWS(cls_attention(uniform_stack(2, 2, 17), 2));
  CHECK_THROWS(cls_attention(uniform_stack(2, 2, 17), -3));
  CHECK_NOTHROW(cls_attention(uniform_stack(2, 2, 17), -2));
  CHECK_THROWS(cls_attention(uniform_stack(1, 1, 7)));  // 6 patches, not square
  CHECK(cls_attention(uniform_stack(1, 1, 7), 0, 2, 3).maps[0].shape() == Shape{2, 3});

  // Desk model, 32 x 32 input at patch 4.
  Rng rng(1);
  BackboneSpec spec;
  spec.vit = ViTConfig{4, 64, 4, 4, 4.0, 1, 8};
  const ParameterSet p = init_backbone(spec.vit, rng);
  const std::vector<Tensor> imgs{random_tensor({1, 32, 32}, rng, 0, 1)};
  ForwardOptions opts;
  opts.capture_attention = true;
  const auto enc = encode<float>(p, spec, imgs, opts);
  REQUIRE(enc.attention.size() == 1);
  const ClsAttentionMaps m = cls_attention(enc.attention[0]);
  CHECK(m.heads() == 4);
  CHECK(m.maps[0].shape() == Shape{8, 8});
  for (const Tensor& t : m.maps) {
    double sum = 0.0;
    for (float v : t.data()) {
      CHECK(v >= 0.0f);
      sum += v;
    }
    CHECK(sum <= 1.0 + 1e-6);
  }
}

TEST_CASE("pca on collinear heads") {
  Rng rng(2);
  ClsAttentionMaps m = random_maps(1, 6, rng);
  Tensor twice = m.maps[0];
  for (float& v : twice.data()) v *= 2.0f;
  m.maps.push_back(twice);
  const PcaResult r = pca_reduce(m, 1);
  CHECK(r.explained_variance_ratio[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(r.loadings(1, 0) > 0.0);
  const auto& src = m.maps[0].data();
  const auto [lo, hi] = std::minmax_element(src.begin(), src.end());
  for (std::size_t i = 0; i < src.size(); ++i) {
    CHECK(r.components[0][i] == doctest::Approx((src[i] - *lo) / (*hi - *lo)).epsilon(1e-5));
  }
}

TEST_CASE("pca with all components reconstructs the centred data") {
  Rng rng(3);
  const ClsAttentionMaps m = random_maps(4, 8, rng);
  const PcaResult r = pca_reduce(m, 4);
  const Matrix<double> recon = r.scores * r.loadings.transpose();
  for (int h = 0; h < 4; ++h) {
    for (int i = 0; i < 64; ++i) {
      const double centred = m.maps[static_cast<std::size_t>(h)][static_cast<std::size_t>(i)] - r.mean(h);
      CHECK(std::abs(recon(i, h) - centred) <= 1e-5);
    }
  }
  CHECK(std::accumulate(r.explained_variance_ratio.begin(), r.explained_variance_ratio.end(), 0.0) ==
        doctest::Approx(1.0));
  CHECK_THROWS(pca_reduce(m, 0));
  CHECK_THROWS(pca_reduce(m, 5));
}

TEST_CASE("pca properties on random maps") {
  Rng rng(4);
  for (int trial = 0; trial < 20; ++trial) {
    const ClsAttentionMaps m = random_maps(4, 6, rng);
    const PcaResult r = pca_reduce(m, 1);
    CHECK(r.explained_variance_ratio[0] > 0.0);
    CHECK(r.explained_variance_ratio[0] <= 1.0 + 1e-12);
    for (float v : r.components[0].data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
    Eigen::Index arg = 0;
    r.loadings.col(0).cwiseAbs().maxCoeff(&arg);
    CHECK(r.loadings(arg, 0) > 0.0);

    // Reversing the head order permutes the loading but leaves the component map.
    ClsAttentionMaps rev = m;
    std::reverse(rev.maps.begin(), rev.maps.end());
    const PcaResult rr = pca_reduce(rev, 1);
    for (std::size_t i = 0; i < 36; ++i) CHECK(rr.components[0][i] == doctest::Approx(r.components[0][i]).epsilon(1e-4));
  }

  ClsAttentionMaps flat;
  flat.grid_h = flat.grid_w = 4;
  flat.maps = {Tensor({4, 4}, 0.3f), Tensor({4, 4}, 0.3f)};
  const PcaResult z = pca_reduce(flat, 2);
  CHECK(z.zero_variance);
  for (const Tensor& c : z.components) {
    for (float v : c.data()) CHECK(v == 0.0f);
  }
}

TEST_CASE("detect_regions examples") {
  CHECK(detect_regions(Tensor({5, 5}, 0.2f)).clusters.empty());

  Tensor single({5, 5}, 0.0f);
  single[2 * 5 + 3] = 0.9f;
  const DetectionResult one = detect_regions(single);
  REQUIRE(one.clusters.size() == 1);
  CHECK(one.clusters[0].patches == std::vector<int>{13});
  CHECK(one.clusters[0].centroid_row == 2.0);
  CHECK(one.clusters[0].centroid_col == 3.0);
  CHECK(one.clusters[0].peak == 0.9f);

  Tensor plus({5, 5}, 0.0f);
  plus[12] = 0.8f;
  plus[7] = plus[11] = plus[13] = plus[17] = 0.5f;
  const DetectionResult p = detect_regions(plus);
  REQUIRE(p.clusters.size() == 1);
  CHECK(p.clusters[0].patches.size() == 5);
  CHECK(p.clusters[0].centroid_row == doctest::Approx(2.0));

  // Support without a seed is discarded; diagonal neighbours do not join.
  Tensor diag({3, 3}, 0.0f);
  diag[0] = 0.9f;
  diag[4] = 0.5f;
  CHECK(detect_regions(diag).clusters[0].patches.size() == 1);

  CHECK_THROWS(detect_regions(plus, 0.8, 0.7));
  CHECK_THROWS(detect_regions(plus, -0.1, 0.7));
  CHECK_THROWS(detect_regions(plus, 0.3, 1.2));
}

TEST_CASE("detect_regions invariants on random maps") {
  Rng rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor map = random_tensor({10, 10}, rng, 0, 1);
    std::size_t prev = std::numeric_limits<std::size_t>::max();
    for (double th : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
      const DetectionResult d = detect_regions(map, 0.4, th);
      std::set<int> seen;
      for (const Cluster& c : d.clusters) {
        bool seeded = false;
        for (int q : c.patches) {
          CHECK(seen.insert(q).second);
          CHECK(map[static_cast<std::size_t>(q)] >= 0.4f);
          seeded = seeded || map[static_cast<std::size_t>(q)] >= th;
        }
        CHECK(seeded);
      }
      CHECK(d.clusters.size() <= prev);
      prev = d.clusters.size();
    }
  }
}

TEST_CASE("detection scoring") {
  std::vector<DetectionResult> dets;
  std::vector<RoiMask> masks;
  auto add = [&](int n, DetectionResult d, RoiMask m) {
    for (int i = 0; i < n; ++i) {
      dets.push_back(d);
      masks.push_back(m);
    }
  };
  add(1674, with_clusters(4, 4, {{0}}), grid_mask(4, 4, {0}));
  add(628, with_clusters(4, 4, {{5}}), grid_mask(4, 4, {}));
  add(685, with_clusters(4, 4, {}), grid_mask(4, 4, {10}));
  const DetectionScore s = score_detections(dets, masks);
  CHECK(s.tp == 1674);
  CHECK(s.fp == 628);
  CHECK(s.fn == 685);
  CHECK(fmt::format("{:.4f}", s.precision) == "0.7272");
  CHECK(fmt::format("{:.4f}", s.recall) == "0.7096");
  CHECK(fmt::format("{:.4f}", s.f1) == "0.7183");

  const std::vector<DetectionResult> perfect{with_clusters(4, 4, {{1, 2}})};
  const std::vector<RoiMask> pm{grid_mask(4, 4, {1, 2})};
  const DetectionScore ps = score_detections(perfect, pm);
  CHECK(ps.tp == 1);
  CHECK(ps.localization == 1.0);

  const std::vector<DetectionResult> miss{with_clusters(4, 4, {{15}})};
  const std::vector<RoiMask> mm{grid_mask(4, 4, {0})};
  const DetectionScore ms = score_detections(miss, mm);
  CHECK(ms.fp == 1);
  CHECK(ms.fn == 1);
  CHECK(ms.precision == 0.0);

  // Two clusters on one component: the larger overlap matches, the other is a false positive.
  const std::vector<DetectionResult> dup{with_clusters(4, 4, {{0}, {1, 2, 5}})};
  const std::vector<RoiMask> dm{grid_mask(4, 4, {0, 1, 2})};
  const DetectionScore ds = score_detections(dup, dm);
  CHECK(ds.tp == 1);
  CHECK(ds.fp == 1);
  CHECK(ds.localization == doctest::Approx(2.0 / 3.0));

  const std::vector<RoiMask> wrong{grid_mask(5, 4, {0})};
  CHECK_THROWS(score_detections(perfect, wrong));
}

TEST_CASE("per-image scoring identities") {
  Rng rng(6);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor map = random_tensor({8, 8}, rng, 0, 1);
    const DetectionResult d = detect_regions(map, 0.5, 0.8);
    RoiMask m = grid_mask(8, 8, {});
    for (auto& v : m.mask) v = rng.bernoulli(0.2) ? 1 : 0;
    const std::vector<DetectionResult> ds{d};
    const std::vector<RoiMask> ms{m};
    const DetectionScore s = score_detections(ds, ms);
    const auto comps = detect_regions(
        [&] {
          Tensor t({8, 8}, 0.0f);
          for (std::size_t i = 0; i < 64; ++i) t[i] = m.mask[i];
          return t;
        }(),
        1.0, 1.0);
    CHECK(s.tp + s.fn == static_cast<std::int64_t>(comps.clusters.size()));
    CHECK(s.tp + s.fp == static_cast<std::int64_t>(d.clusters.size()));
  }
}

TEST_CASE("roi downsampling and outputs") {
  RoiMask roi = grid_mask(8, 8, {9, 63});
  const RoiMask g = downsample_roi(roi, 4);
  CHECK(g.height == 2);
  CHECK(g.mask == std::vector<std::uint8_t>{1, 0, 0, 1});
  CHECK_THROWS(downsample_roi(roi, 3));

  TempDir dir("attn");
  Tensor map({2, 3}, std::vector<float>{0, 1, 2, 3, 4, 5});
  write_heatmap(dir / "m.pgm", map);
  std::ifstream in(dir / "m.pgm", std::ios::binary);
  std::string magic;
  int w = 0, h = 0, maxv = 0;
  in >> magic >> w >> h >> maxv;
  in.get();
  std::vector<unsigned char> px(6);
  in.read(reinterpret_cast<char*>(px.data()), 6);
  CHECK(magic == "P5");
  CHECK(w == 3);
  CHECK(h == 2);
  CHECK(maxv == 255);
  CHECK(px.front() == 0);
  CHECK(px.back() == 255);

  Tensor single({5, 5}, 0.0f);
  single[13] = 0.9f;
  append_detections_csv(dir / "d.csv", "img_a", detect_regions(single));
  std::ifstream csv(dir / "d.csv");
  std::string header, row;
  std::getline(csv, header);
  std::getline(csv, row);
  CHECK(header == "image_id,cluster_id,centroid_row,centroid_col,size,peak");
  CHECK(row.rfind("img_a,0,2", 0) == 0);
}
