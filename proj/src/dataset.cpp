#include "dinomx/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "dinomx/rng.hpp"

namespace dinomx {

void TrainingData::validate() const {
  if (images.empty()) throw std::invalid_argument("dataset is empty");
  if (labels.size() != images.size() || ids.size() != images.size() || rois.size() != images.size()) {
    throw std::invalid_argument("dataset columns have different lengths");
  }
  const auto c = images.front().dim(0);
  for (std::size_t i = 0; i < images.size(); ++i) {
    const Tensor& im = images[i];
    if (im.ndim() != 3 || im.dim(0) != c) {
      throw std::invalid_argument("image '" + ids[i] + "' has shape " + im.shape_string() +
                                  "; all images need the same channel count");
    }
    if (rois[i] && (rois[i]->height != im.dim(1) || rois[i]->width != im.dim(2))) {
      throw std::invalid_argument("ROI of '" + ids[i] + "' does not match its image size");
    }
  }
}

TrainingData load_training_data(const fs::path& manifest_path) {
  const DatasetManifest m = read_manifest(manifest_path);
  TrainingData d;
  d.num_classes = m.num_classes;
  for (const auto& e : m.entries) {
    ImageSample s = load_image(e.image_path);
    d.images.push_back(std::move(s.pixels));
    d.labels.push_back(e.class_label);
    d.ids.push_back(fs::relative(e.image_path, m.root).generic_string());
    if (e.roi_path) {
      RoiMask r = load_roi(*e.roi_path);
      if (r.height != s.height || r.width != s.width) {
        throw std::invalid_argument("ROI " + e.roi_path->string() + " does not match image size");
      }
      d.rois.emplace_back(std::move(r));
    } else {
      d.rois.emplace_back(std::nullopt);
    }
  }
  d.validate();
  return d;
}

void write_dataset(const fs::path& dir, const TrainingData& data) {
  data.validate();
  if (data.channels() != 1) throw std::invalid_argument("write_dataset writes single-channel PGM only");
  fs::create_directories(dir / "images");
  std::ofstream csv(dir / "manifest.csv");
  const bool any_roi = std::any_of(data.rois.begin(), data.rois.end(), [](const auto& r) { return r.has_value(); });
  csv << (any_roi ? "image,label,roi\n" : "image,label\n");
  for (std::size_t i = 0; i < data.size(); ++i) {
    const Tensor& im = data.images[i];
    const std::string stem = "img_" + std::to_string(i);
    const auto h = static_cast<int>(im.dim(1));
    const auto w = static_cast<int>(im.dim(2));
    write_pgm(dir / "images" / (stem + ".pgm"), h, w, im.data());
    csv << "images/" << stem << ".pgm," << data.labels[i];
    if (any_roi) {
      csv << ',';
      if (data.rois[i]) {
        std::vector<float> v(data.rois[i]->mask.begin(), data.rois[i]->mask.end());
        write_pgm(dir / "images" / (stem + "_roi.pgm"), h, w, v);
        csv << "images/" << stem << "_roi.pgm";
      }
    }
    csv << '\n';
  }
  if (!csv) throw std::runtime_error("failed writing " + (dir / "manifest.csv").string());
}

TrainingData make_blobs_stripes(int count, int size, std::uint64_t seed) {
  if (count < 2 || size < 4) throw std::invalid_argument("make_blobs_stripes: need count >= 2 and size >= 4");
  TrainingData d;
  d.num_classes = 2;
  const auto n = static_cast<std::size_t>(size) * size;
  for (int i = 0; i < count; ++i) {
    Rng rng(derive_seed(seed, {0xB10Bu, static_cast<std::uint64_t>(i)}));
    const int label = i % 2;
    RoiMask roi{size, size, std::vector<std::uint8_t>(n, 0)};
    std::vector<double> field(n, 0.0);
    if (label == 0) {
      const int blobs = static_cast<int>(rng.uniform_int(2, 4));
      for (int b = 0; b < blobs; ++b) {
        const double cy = rng.uniform(0.15, 0.85) * size;
        const double cx = rng.uniform(0.15, 0.85) * size;
        const double sigma = rng.uniform(0.08, 0.14) * size;
        for (int y = 0; y < size; ++y) {
          for (int x = 0; x < size; ++x) {
            const double r2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
            const double v = std::exp(-0.5 * r2 / (sigma * sigma));
            auto& f = field[static_cast<std::size_t>(y) * size + x];
            f = std::max(f, v);
            if (v > 0.5) roi.mask[static_cast<std::size_t>(y) * size + x] = 1;
          }
        }
      }
    } else {
      const double theta = rng.uniform(0.0, std::numbers::pi);
      const double period = rng.uniform(0.3, 0.5) * size;
      const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
          const double u = x * std::cos(theta) + y * std::sin(theta);
          field[static_cast<std::size_t>(y) * size + x] = std::sin(2.0 * std::numbers::pi * u / period + phase);
        }
      }
    }
    // Both classes get zero-mean, unit-variance structure so only its shape
    // tells them apart; level, ramp and contrast are nuisance.
    double mean = 0.0, var = 0.0;
    for (double f : field) mean += f;
    mean /= static_cast<double>(n);
    for (double f : field) var += (f - mean) * (f - mean);
    const double sd = std::sqrt(var / static_cast<double>(n));
    const double level = rng.uniform(0.3, 0.7);
    const double contrast = rng.uniform(0.06, 0.14);
    const double ramp_x = rng.uniform(-0.2, 0.2);
    const double ramp_y = rng.uniform(-0.2, 0.2);
    Tensor img({1, size, size}, 0.0f);
    for (int y = 0; y < size; ++y) {
      for (int x = 0; x < size; ++x) {
        const auto k = static_cast<std::size_t>(y) * size + x;
        const double ramp = (ramp_x * (x - 0.5 * size) + ramp_y * (y - 0.5 * size)) / size;
        const double v = level + ramp + contrast * (field[k] - mean) / sd + rng.normal(0.0, 0.02);
        img[k] = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
    d.images.push_back(std::move(img));
    d.labels.push_back(label);
    d.ids.push_back("synthetic_" + std::to_string(i));
    if (label == 0) {
      d.rois.emplace_back(std::move(roi));
    } else {
      d.rois.emplace_back(std::nullopt);
    }
  }
  return d;
}

TrainingData subset(const TrainingData& data, const std::vector<std::size_t>& indices) {
  TrainingData out;
  out.num_classes = data.num_classes;
  for (auto i : indices) {
    out.images.push_back(data.images.at(i));
    out.labels.push_back(data.labels.at(i));
    out.ids.push_back(data.ids.at(i));
    out.rois.push_back(data.rois.at(i));
  }
  return out;
}

}  // namespace dinomx
