#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dinomx/io.hpp"

namespace dinomx {

/// In-memory training/eval images, [C,H,W] in [0,1].
struct TrainingData {
  std::vector<Tensor> images;
  std::vector<int> labels;
  std::vector<std::string> ids;
  std::vector<std::optional<RoiMask>> rois;
  int num_classes = 0;

  std::size_t size() const { return images.size(); }
  int channels() const { return images.empty() ? 0 : static_cast<int>(images.front().dim(0)); }
  void validate() const;
};

TrainingData load_training_data(const fs::path& manifest_path);

/// Writes PGM images (and ROI masks when present) plus manifest.csv into `dir`.
void write_dataset(const fs::path& dir, const TrainingData& data);

/// Two-class single-channel set: class 0 holds Gaussian blobs, class 1
/// sinusoidal stripes, both standardized to the same mean and variance.
/// Level, contrast, a linear ramp and pixel noise vary per image.
/// Blob images carry an ROI covering the blob cores.
TrainingData make_blobs_stripes(int count, int size, std::uint64_t seed);

/// Subset by index list (order preserved).
TrainingData subset(const TrainingData& data, const std::vector<std::size_t>& indices);

}  // namespace dinomx
