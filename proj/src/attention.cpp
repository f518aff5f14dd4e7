#include "dinomx/attention.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>
#include <tuple>

namespace dinomx {

namespace {

/// 4-connected components over `inside`, each grown from a seed passing `seed`.
template <typename Inside, typename Seed>
std::vector<std::vector<int>> components(int h, int w, Inside inside, Seed seed) {
  std::vector<char> seen(static_cast<std::size_t>(h) * w, 0);
  std::vector<std::vector<int>> out;
  for (int s = 0; s < h * w; ++s) {
    if (seen[static_cast<std::size_t>(s)] || !seed(s)) continue;
    std::vector<int> comp;
    std::vector<int> stack{s};
    seen[static_cast<std::size_t>(s)] = 1;
    while (!stack.empty()) {
      const int p = stack.back();
      stack.pop_back();
      comp.push_back(p);
      const int r = p / w;
      const int c = p % w;
      const int nb[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
      for (const auto& n : nb) {
        if (n[0] < 0 || n[0] >= h || n[1] < 0 || n[1] >= w) continue;
        const int q = n[0] * w + n[1];
        if (seen[static_cast<std::size_t>(q)] || !inside(q)) continue;
        seen[static_cast<std::size_t>(q)] = 1;
        stack.push_back(q);
      }
    }
    std::sort(comp.begin(), comp.end());
    out.push_back(std::move(comp));
  }
  return out;
}

double safe_div(double a, double b) { return b > 0.0 ? a / b : 0.0; }
double f1_of(double p, double r) { return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0; }

}  // namespace

ClsAttentionMaps cls_attention(const AttentionStack& stack, int layer, int grid_h, int grid_w) {
  if (stack.layers < 1 || stack.heads < 1) throw std::invalid_argument("empty attention stack");
  if (layer < 0) layer += stack.layers;
  if (layer < 0 || layer >= stack.layers) throw std::out_of_range("attention layer out of range");
  const int patches = stack.tokens - 1;
  if (grid_h <= 0 || grid_w <= 0) {
    const int g = static_cast<int>(std::lround(std::sqrt(static_cast<double>(patches))));
    if (g * g != patches) throw std::invalid_argument("non-square patch grid; pass grid_h and grid_w");
    grid_h = grid_w = g;
  }
  if (grid_h * grid_w != patches) throw std::invalid_argument("grid does not match the token count");
  ClsAttentionMaps out;
  out.grid_h = grid_h;
  out.grid_w = grid_w;
  for (int h = 0; h < stack.heads; ++h) {
    const Tensor& a = stack.at(layer, h);
    std::vector<float> row(a.data().begin() + 1, a.data().begin() + stack.tokens);
    out.maps.emplace_back(Shape{grid_h, grid_w}, std::move(row));
  }
  return out;
}

PcaResult pca_reduce(const ClsAttentionMaps& maps, int n_components) {
  const int heads = maps.heads();
  if (heads < 1) throw std::invalid_argument("pca: no attention maps");
  if (n_components < 1 || n_components > heads) throw std::invalid_argument("pca: n_components must be in [1, heads]");
  const int p = maps.grid_h * maps.grid_w;
  Matrix<double> x(p, heads);
  for (int h = 0; h < heads; ++h) {
    const auto& d = maps.maps[static_cast<std::size_t>(h)].data();
    for (int i = 0; i < p; ++i) x(i, h) = d[static_cast<std::size_t>(i)];
  }
  PcaResult r;
  r.grid_h = maps.grid_h;
  r.grid_w = maps.grid_w;
  r.mean = x.colwise().mean().transpose();
  const Matrix<double> xc = x.rowwise() - r.mean.transpose();
  const Matrix<double> cov = (xc.transpose() * xc) / static_cast<double>(p);
  Eigen::SelfAdjointEigenSolver<Matrix<double>> eig(cov);
  const double total = std::max(0.0, eig.eigenvalues().sum());
  r.zero_variance = total <= 1e-30;
  r.loadings.resize(heads, n_components);
  for (int c = 0; c < n_components; ++c) {
    Eigen::VectorXd v = eig.eigenvectors().col(heads - 1 - c);
    Eigen::Index arg = 0;
    v.cwiseAbs().maxCoeff(&arg);
    if (v(arg) < 0.0) v = -v;
    r.loadings.col(c) = v;
    r.explained_variance_ratio.push_back(r.zero_variance ? 0.0 : std::max(0.0, eig.eigenvalues()(heads - 1 - c)) / total);
  }
  r.scores = xc * r.loadings;
  for (int c = 0; c < n_components; ++c) {
    std::vector<float> vals(static_cast<std::size_t>(p), 0.0f);
    const double lo = r.scores.col(c).minCoeff();
    const double hi = r.scores.col(c).maxCoeff();
    if (!r.zero_variance && hi - lo > 1e-12) {
      for (int i = 0; i < p; ++i) vals[static_cast<std::size_t>(i)] = static_cast<float>((r.scores(i, c) - lo) / (hi - lo));
    }
    r.components.emplace_back(Shape{maps.grid_h, maps.grid_w}, std::move(vals));
  }
  return r;
}

DetectionResult detect_regions(const Tensor& map, double t_low, double t_high) {
  if (map.ndim() != 2) throw std::invalid_argument("detect_regions expects a 2-D map");
  if (!(0.0 <= t_low && t_low <= t_high && t_high <= 1.0)) {
    throw std::invalid_argument("thresholds must satisfy 0 <= t_low <= t_high <= 1");
  }
  DetectionResult out;
  out.grid_h = static_cast<int>(map.dim(0));
  out.grid_w = static_cast<int>(map.dim(1));
  const auto& v = map.data();
  auto val = [&](int i) { return static_cast<double>(v[static_cast<std::size_t>(i)]); };
  for (auto& comp : components(out.grid_h, out.grid_w, [&](int i) { return val(i) >= t_low; },
                               [&](int i) { return val(i) >= t_high; })) {
    Cluster c;
    double wsum = 0.0;
    for (int i : comp) {
      const double w = val(i);
      wsum += w;
      c.centroid_row += w * (i / out.grid_w);
      c.centroid_col += w * (i % out.grid_w);
      c.peak = std::max(c.peak, static_cast<float>(w));
    }
    c.centroid_row /= wsum;
    c.centroid_col /= wsum;
    c.patches = std::move(comp);
    out.clusters.push_back(std::move(c));
  }
  return out;
}

DetectionScore score_detections(std::span<const DetectionResult> detections, std::span<const RoiMask> masks) {
  if (detections.size() != masks.size()) throw std::invalid_argument("one mask per detection result is required");
  DetectionScore s;
  s.images = detections.size();
  double loc_sum = 0.0;
  double macro_p = 0.0, macro_r = 0.0, macro_f = 0.0;
  std::size_t n_p = 0, n_r = 0, n_f = 0;
  for (std::size_t i = 0; i < detections.size(); ++i) {
    const DetectionResult& d = detections[i];
    const RoiMask& m = masks[i];
    if (m.height != d.grid_h || m.width != d.grid_w) throw std::invalid_argument("mask is not on the detection grid");
    const auto gt = components(m.height, m.width, [&](int q) { return m.mask[static_cast<std::size_t>(q)] != 0; },
                               [&](int q) { return m.mask[static_cast<std::size_t>(q)] != 0; });
    std::vector<int> comp_of(static_cast<std::size_t>(m.height) * m.width, -1);
    for (std::size_t g = 0; g < gt.size(); ++g) {
      for (int q : gt[g]) comp_of[static_cast<std::size_t>(q)] = static_cast<int>(g);
    }
    // (overlap, cluster, component), matched greedily by descending overlap.
    std::vector<std::tuple<int, int, int>> pairs;
    for (std::size_t c = 0; c < d.clusters.size(); ++c) {
      std::vector<int> overlap(gt.size(), 0);
      for (int q : d.clusters[c].patches) {
        const int g = comp_of[static_cast<std::size_t>(q)];
        if (g >= 0) overlap[static_cast<std::size_t>(g)] += 1;
      }
      for (std::size_t g = 0; g < gt.size(); ++g) {
        if (overlap[g] > 0) pairs.emplace_back(overlap[g], static_cast<int>(c), static_cast<int>(g));
      }
    }
    std::sort(pairs.begin(), pairs.end(), [](const auto& a, const auto& b) {
      if (std::get<0>(a) != std::get<0>(b)) return std::get<0>(a) > std::get<0>(b);
      return std::make_pair(std::get<1>(a), std::get<2>(a)) < std::make_pair(std::get<1>(b), std::get<2>(b));
    });
    std::vector<char> cl_used(d.clusters.size(), 0), gt_used(gt.size(), 0);
    std::int64_t tp = 0;
    for (const auto& [ov, c, g] : pairs) {
      if (cl_used[static_cast<std::size_t>(c)] || gt_used[static_cast<std::size_t>(g)]) continue;
      cl_used[static_cast<std::size_t>(c)] = gt_used[static_cast<std::size_t>(g)] = 1;
      ++tp;
      loc_sum += static_cast<double>(ov) / static_cast<double>(d.clusters[static_cast<std::size_t>(c)].patches.size());
    }
    const std::int64_t fp = static_cast<std::int64_t>(d.clusters.size()) - tp;
    const std::int64_t fn = static_cast<std::int64_t>(gt.size()) - tp;
    s.tp += tp;
    s.fp += fp;
    s.fn += fn;
    const double p = safe_div(static_cast<double>(tp), static_cast<double>(tp + fp));
    const double r = safe_div(static_cast<double>(tp), static_cast<double>(tp + fn));
    if (tp + fp > 0) macro_p += p, ++n_p;
    if (tp + fn > 0) macro_r += r, ++n_r;
    if (tp + fp + fn > 0) macro_f += f1_of(p, r), ++n_f;
  }
  s.precision = safe_div(static_cast<double>(s.tp), static_cast<double>(s.tp + s.fp));
  s.recall = safe_div(static_cast<double>(s.tp), static_cast<double>(s.tp + s.fn));
  s.f1 = f1_of(s.precision, s.recall);
  s.macro_precision = safe_div(macro_p, static_cast<double>(n_p));
  s.macro_recall = safe_div(macro_r, static_cast<double>(n_r));
  s.macro_f1 = safe_div(macro_f, static_cast<double>(n_f));
  s.localization = safe_div(loc_sum, static_cast<double>(s.tp));
  return s;
}

RoiMask downsample_roi(const RoiMask& roi, int patch) {
  if (patch < 1 || roi.height % patch || roi.width % patch) {
    throw std::invalid_argument("ROI size must be a multiple of the patch size");
  }
  RoiMask out;
  out.height = roi.height / patch;
  out.width = roi.width / patch;
  out.mask.assign(static_cast<std::size_t>(out.height) * out.width, 0);
  for (int r = 0; r < roi.height; ++r) {
    for (int c = 0; c < roi.width; ++c) {
      if (roi.at(r, c)) out.mask[static_cast<std::size_t>(r / patch) * out.width + c / patch] = 1;
    }
  }
  return out;
}

AnalysisOutput analyze_attention(const AttentionStack& stack, int layer, int n_components, double t_low, double t_high) {
  AnalysisOutput out;
  out.attention = cls_attention(stack, layer);
  out.pca = pca_reduce(out.attention, std::min(n_components, out.attention.heads()));
  out.detection = detect_regions(out.pca.components.front(), t_low, t_high);
  return out;
}

void write_heatmap(const std::filesystem::path& path, const Tensor& map) {
  if (map.ndim() != 2) throw std::invalid_argument("heatmap expects a 2-D map");
  const auto& v = map.data();
  const auto [lo, hi] = std::minmax_element(v.begin(), v.end());
  std::vector<float> scaled(v.size(), 0.0f);
  if (*hi > *lo) {
    for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = (v[i] - *lo) / (*hi - *lo);
  }
  write_pgm(path, static_cast<int>(map.dim(0)), static_cast<int>(map.dim(1)), scaled);
}

void append_detections_csv(const std::filesystem::path& path, const std::string& image_id, const DetectionResult& d) {
  const bool fresh = !std::filesystem::exists(path);
  std::ofstream out(path, std::ios::app);
  if (fresh) out << "image_id,cluster_id,centroid_row,centroid_col,size,peak\n";
  for (std::size_t c = 0; c < d.clusters.size(); ++c) {
    const Cluster& k = d.clusters[c];
    out << image_id << ',' << c << ',' << k.centroid_row << ',' << k.centroid_col << ',' << k.patches.size() << ','
        << k.peak << '\n';
  }
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace dinomx
