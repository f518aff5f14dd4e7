#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dinomx/io.hpp"
#include "dinomx/matrix.hpp"
#include "dinomx/vit.hpp"

namespace dinomx {

/// CLS-to-patch attention of one layer, one [grid_h, grid_w] map per head.
struct ClsAttentionMaps {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<Tensor> maps;

  int heads() const { return static_cast<int>(maps.size()); }
};

/// `layer` < 0 counts from the end (-1 = last). A square grid is assumed
/// unless grid_h/grid_w are given.
ClsAttentionMaps cls_attention(const AttentionStack& stack, int layer = -1, int grid_h = 0, int grid_w = 0);

struct PcaResult {
  int grid_h = 0;
  int grid_w = 0;
  Matrix<double> scores;     // [P, n] projections of the centred data
  Matrix<double> loadings;   // [H, n] unit columns; largest-magnitude entry positive
  Eigen::VectorXd mean;      // [H]
  std::vector<double> explained_variance_ratio;
  std::vector<Tensor> components;  // min-max normalised scores, [grid_h, grid_w] each
  bool zero_variance = false;
};

/// Treats patches as observations and heads as features.
PcaResult pca_reduce(const ClsAttentionMaps& maps, int n_components);

struct Cluster {
  std::vector<int> patches;  // row-major indices, sorted
  double centroid_row = 0.0;
  double centroid_col = 0.0;
  float peak = 0.0f;
};

struct DetectionResult {
  int grid_h = 0;
  int grid_w = 0;
  std::vector<Cluster> clusters;
};

/// Hysteresis thresholding: clusters grow from patches >= t_high through
/// 4-connected patches >= t_low.
DetectionResult detect_regions(const Tensor& map, double t_low = 0.3, double t_high = 0.7);

struct DetectionScore {
  std::int64_t tp = 0;
  std::int64_t fp = 0;
  std::int64_t fn = 0;
  double precision = 0.0;  // micro
  double recall = 0.0;
  double f1 = 0.0;
  double macro_precision = 0.0;
  double macro_recall = 0.0;
  double macro_f1 = 0.0;
  double localization = 0.0;  // mean |cluster ∩ component| / |cluster| over TPs
  std::size_t images = 0;
};

/// Masks must already be on the patch grid of the matching detection.
DetectionScore score_detections(std::span<const DetectionResult> detections, std::span<const RoiMask> masks);

/// A patch is positive when any pixel inside it is.
RoiMask downsample_roi(const RoiMask& roi, int patch);

struct AnalysisOutput {
  ClsAttentionMaps attention;
  PcaResult pca;
  DetectionResult detection;  // on the first principal component
};

AnalysisOutput analyze_attention(const AttentionStack& stack, int layer = -1, int n_components = 3,
                                 double t_low = 0.3, double t_high = 0.7);

/// Min-max rescaled 8-bit PGM.
void write_heatmap(const std::filesystem::path& path, const Tensor& map);
/// Appends one row per cluster: image_id,cluster_id,centroid_row,centroid_col,size,peak.
void append_detections_csv(const std::filesystem::path& path, const std::string& image_id, const DetectionResult& d);

}  // namespace dinomx
