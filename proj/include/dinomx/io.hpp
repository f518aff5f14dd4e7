#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "dinomx/tensor.hpp"

namespace dinomx {

namespace fs = std::filesystem;

/// Decoded image, channel-major [C,H,W] with values in [0,1].
struct ImageSample {
  int channels = 0;
  int height = 0;
  int width = 0;
  Tensor pixels;
  std::string source_id;
};

/// Binary region-of-interest grid; nonzero marks the region.
struct RoiMask {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> mask;

  bool at(int row, int col) const { return mask[static_cast<std::size_t>(row) * width + col] != 0; }
  std::size_t positive_count() const;
};

struct ManifestEntry {
  fs::path image_path;
  int class_label = 0;
  std::optional<fs::path> roi_path;
};

struct DatasetManifest {
  fs::path root;
  std::vector<ManifestEntry> entries;
  int num_classes = 0;
};

// DMXT tensor container. Little-endian throughout:
//   "DMXT" | u32 count | { u16 name_len | name | u8 dtype(1=f32) | u8 ndim | u32 dims[ndim] | f32 payload }*
void write_tensors(const fs::path& path, const NamedTensors& tensors);
void write_tensors(const fs::path& path, const ParameterSet& tensors);
NamedTensors read_tensors(const fs::path& path);
ParameterSet read_parameter_set(const fs::path& path);

/// Loads P5 (PGM), P6 (PPM) or a DMXT file holding one [C,H,W] or [H,W] tensor.
ImageSample load_image(const fs::path& path);

/// Loads a single-channel mask image; any nonzero sample is part of the ROI.
RoiMask load_roi(const fs::path& path);

/// Writes an 8-bit P5 image, values clamped to [0,1] and scaled by 255.
void write_pgm(const fs::path& path, int height, int width, std::span<const float> values);

/// Reads `image,label[,roi]` CSV; relative paths resolve against the CSV's directory.
/// A directory argument resolves to `<dir>/manifest.csv`.
DatasetManifest read_manifest(const fs::path& path);

enum class NormalizeMode { unit, standardize };

struct NormalizeParams {
  std::vector<float> mean;
  std::vector<float> std;
};

Tensor normalize(const ImageSample& image, NormalizeMode mode, const NormalizeParams& params = {});
/// Same on a bare [C,H,W] tensor.
Tensor normalize(const Tensor& chw, NormalizeMode mode, const NormalizeParams& params = {});

}  // namespace dinomx
