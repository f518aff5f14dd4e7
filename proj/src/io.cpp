#include "dinomx/io.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>
#include <sstream>
#include <stdexcept>

namespace dinomx {

namespace {

static_assert(std::endian::native == std::endian::little,
              "DMXT I/O assumes a little-endian host");

constexpr char kMagic[4] = {'D', 'M', 'X', 'T'};
constexpr std::uint8_t kDtypeF32 = 1;

std::vector<unsigned char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::string what)
      : bytes_(bytes), what_(std::move(what)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T value;
    std::memcpy(&value, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return value;
  }

  const unsigned char* take(std::size_t n) {
    need(n);
    const unsigned char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw std::runtime_error("truncated payload in " + what_);
  }

  const std::vector<unsigned char>& bytes_;
  std::string what_;
  std::size_t pos_ = 0;
};

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

struct PnmHeader {
  char kind = 0;  // '5' or '6'
  int width = 0;
  int height = 0;
  int maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm_header(const std::vector<unsigned char>& bytes, const fs::path& path) {
  PnmHeader h;
  h.kind = static_cast<char>(bytes[1]);
  std::size_t pos = 2;
  auto next_int = [&]() -> long long {
    for (;;) {
      while (pos < bytes.size() && std::isspace(bytes[pos])) ++pos;
      if (pos < bytes.size() && bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        continue;
      }
      break;
    }
    if (pos >= bytes.size() || !std::isdigit(bytes[pos])) {
      throw std::runtime_error("malformed netpbm header in " + path.string());
    }
    long long v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1ll << 31)) throw std::runtime_error("dimension overflow in " + path.string());
      ++pos;
    }
    return v;
  };
  long long w = next_int();
  long long hgt = next_int();
  long long maxval = next_int();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    throw std::runtime_error("malformed netpbm header in " + path.string());
  }
  ++pos;  // single whitespace before raster
  if (w <= 0 || hgt <= 0 || w > 65536 || hgt > 65536) {
    throw std::runtime_error("dimension overflow in " + path.string());
  }
  if (maxval <= 0 || maxval > 65535) throw std::runtime_error("invalid maxval in " + path.string());
  h.width = static_cast<int>(w);
  h.height = static_cast<int>(hgt);
  h.maxval = static_cast<int>(maxval);
  h.data_offset = pos;
  return h;
}

ImageSample decode_pnm(const std::vector<unsigned char>& bytes, const fs::path& path) {
  PnmHeader h = parse_pnm_header(bytes, path);
  const int channels = h.kind == '5' ? 1 : 3;
  const std::size_t bytes_per_sample = h.maxval > 255 ? 2 : 1;
  const std::size_t plane = static_cast<std::size_t>(h.width) * h.height;
  const std::size_t need = plane * channels * bytes_per_sample;
  if (bytes.size() - h.data_offset < need) {
    throw std::runtime_error("truncated payload in " + path.string());
  }
  // Scaling follows the sample width, not maxval: 8-bit by 1/255, 16-bit by 1/65535.
  const float scale = bytes_per_sample == 2 ? 1.0f / 65535.0f : 1.0f / 255.0f;
  std::vector<float> values(plane * channels);
  const unsigned char* raster = bytes.data() + h.data_offset;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < channels; ++c) {
      const std::size_t s = i * channels + c;
      unsigned v = bytes_per_sample == 2 ? (unsigned(raster[2 * s]) << 8) | raster[2 * s + 1]
                                         : raster[s];
      values[c * plane + i] = std::clamp(static_cast<float>(v) * scale, 0.0f, 1.0f);
    }
  }
  ImageSample img;
  img.channels = channels;
  img.height = h.height;
  img.width = h.width;
  img.pixels = Tensor({channels, h.height, h.width}, std::move(values));
  img.source_id = path.filename().string();
  return img;
}

ImageSample decode_dmxt_image(const fs::path& path) {
  NamedTensors tensors = read_tensors(path);
  if (tensors.size() != 1) throw std::runtime_error("image container must hold one tensor: " + path.string());
  Tensor t = std::move(tensors.front().second);
  if (t.ndim() == 2) t = t.reshaped({1, t.dim(0), t.dim(1)});
  if (t.ndim() != 3 || (t.dim(0) != 1 && t.dim(0) != 3)) {
    throw std::runtime_error("image tensor must be [C,H,W] with C in {1,3}: " + path.string());
  }
  for (float& v : t.data()) v = std::clamp(v, 0.0f, 1.0f);
  ImageSample img;
  img.channels = static_cast<int>(t.dim(0));
  img.height = static_cast<int>(t.dim(1));
  img.width = static_cast<int>(t.dim(2));
  img.pixels = std::move(t);
  img.source_id = path.filename().string();
  return img;
}

}  // namespace

std::size_t RoiMask::positive_count() const {
  return static_cast<std::size_t>(std::count_if(mask.begin(), mask.end(), [](auto v) { return v != 0; }));
}

void write_tensors(const fs::path& path, const NamedTensors& tensors) {
  std::set<std::string> seen;
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.empty()) throw std::invalid_argument("tensor name must be non-empty");
    if (name.size() > 0xFFFF) throw std::invalid_argument("tensor name too long: " + name);
    if (!seen.insert(name).second) throw std::invalid_argument("duplicate tensor name: " + name);
    if (t.ndim() == 0 || t.ndim() > 255) throw std::invalid_argument("bad rank for tensor " + name);
    put<std::uint16_t>(out, static_cast<std::uint16_t>(name.size()));
    out.append(name);
    put<std::uint8_t>(out, kDtypeF32);
    put<std::uint8_t>(out, static_cast<std::uint8_t>(t.ndim()));
    for (auto d : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(float));
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f.write(out.data(), static_cast<std::streamsize>(out.size()));
  if (!f) throw std::runtime_error("write failed for " + path.string());
}

void write_tensors(const fs::path& path, const ParameterSet& tensors) {
  NamedTensors named(tensors.begin(), tensors.end());
  write_tensors(path, named);
}

NamedTensors read_tensors(const fs::path& path) {
  const auto bytes = read_file(path);
  ByteReader r(bytes, path.string());
  const unsigned char* magic = r.take(4);
  if (std::memcmp(magic, kMagic, 4) != 0) throw std::runtime_error("bad magic in " + path.string());
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const unsigned char* name_bytes = r.take(len);
    std::string name(reinterpret_cast<const char*>(name_bytes), len);
    if (r.get<std::uint8_t>() != kDtypeF32) throw std::runtime_error("unsupported dtype for " + name);
    const auto ndim = r.get<std::uint8_t>();
    if (ndim == 0) throw std::runtime_error("zero-rank tensor " + name);
    Shape shape;
    std::uint64_t elems = 1;
    for (int d = 0; d < ndim; ++d) {
      const auto dim = r.get<std::uint32_t>();
      if (dim == 0) throw std::runtime_error("zero dimension in " + name);
      elems *= dim;
      if (elems > r.remaining() / sizeof(float)) {
        throw std::runtime_error("dimension overflow for tensor " + name + " in " + path.string());
      }
      shape.push_back(dim);
    }
    std::vector<float> values(elems);
    const unsigned char* payload = r.take(elems * sizeof(float));
    std::memcpy(values.data(), payload, elems * sizeof(float));
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  return out;
}

ParameterSet read_parameter_set(const fs::path& path) {
  ParameterSet out;
  for (auto& [name, t] : read_tensors(path)) {
    if (!out.emplace(name, std::move(t)).second) {
      throw std::runtime_error("duplicate tensor name " + name + " in " + path.string());
    }
  }
  return out;
}

ImageSample load_image(const fs::path& path) {
  const auto bytes = read_file(path);
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kMagic, 4) == 0) return decode_dmxt_image(path);
  if (bytes.size() >= 2 && bytes[0] == 'P' && (bytes[1] == '5' || bytes[1] == '6')) {
    return decode_pnm(bytes, path);
  }
  throw std::runtime_error("unsupported image format (magic bytes) in " + path.string());
}

RoiMask load_roi(const fs::path& path) {
  ImageSample img = load_image(path);
  RoiMask roi;
  roi.height = img.height;
  roi.width = img.width;
  roi.mask.assign(static_cast<std::size_t>(img.height) * img.width, 0);
  const std::size_t plane = roi.mask.size();
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t i = 0; i < plane; ++i) {
      if (img.pixels[c * plane + i] > 0.0f) roi.mask[i] = 1;
    }
  }
  return roi;
}

void write_pgm(const fs::path& path, int height, int width, std::span<const float> values) {
  if (values.size() != static_cast<std::size_t>(height) * width) {
    throw std::invalid_argument("pgm payload does not match dimensions");
  }
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw std::runtime_error("cannot write " + path.string());
  f << "P5\n" << width << ' ' << height << "\n255\n";
  std::string raster(values.size(), '\0');
  for (std::size_t i = 0; i < values.size(); ++i) {
    raster[i] = static_cast<char>(static_cast<unsigned char>(std::lround(std::clamp(values[i], 0.0f, 1.0f) * 255.0f)));
  }
  f.write(raster.data(), static_cast<std::streamsize>(raster.size()));
}

DatasetManifest read_manifest(const fs::path& path) {
  fs::path csv = fs::is_directory(path) ? path / "manifest.csv" : path;
  std::ifstream in(csv);
  if (!in) throw std::runtime_error("cannot open manifest " + csv.string());
  DatasetManifest m;
  m.root = csv.parent_path();

  std::string line;
  std::size_t row = 0;
  bool has_roi_column = false;
  bool header_seen = false;
  std::set<int> labels;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    auto cells = split_csv(line);
    if (!header_seen) {
      header_seen = true;
      if (cells.size() < 2 || cells[0] != "image" || cells[1] != "label" ||
          (cells.size() == 3 && cells[2] != "roi") || cells.size() > 3) {
        throw std::runtime_error("manifest row " + std::to_string(row) +
                                 ": header must be image,label[,roi]");
      }
      has_roi_column = cells.size() == 3;
      continue;
    }
    const std::size_t expected = has_roi_column ? 3 : 2;
    if (cells.size() != expected && !(has_roi_column && cells.size() == 2)) {
      throw std::runtime_error("manifest row " + std::to_string(row) + ": expected " +
                               std::to_string(expected) + " columns");
    }
    ManifestEntry e;
    if (cells[0].empty()) throw std::runtime_error("manifest row " + std::to_string(row) + ": empty image path");
    e.image_path = m.root / cells[0];
    try {
      std::size_t used = 0;
      e.class_label = std::stoi(cells[1], &used);
      if (used != cells[1].size()) throw std::invalid_argument("trailing");
    } catch (const std::exception&) {
      throw std::runtime_error("manifest row " + std::to_string(row) + ": label '" + cells[1] +
                               "' is not an integer");
    }
    if (e.class_label < 0) throw std::runtime_error("manifest row " + std::to_string(row) + ": negative label");
    if (has_roi_column && cells.size() == 3 && !cells[2].empty()) e.roi_path = m.root / cells[2];
    if (!fs::exists(e.image_path)) {
      throw std::runtime_error("manifest row " + std::to_string(row) + ": missing file " + e.image_path.string());
    }
    if (e.roi_path && !fs::exists(*e.roi_path)) {
      throw std::runtime_error("manifest row " + std::to_string(row) + ": missing file " + e.roi_path->string());
    }
    labels.insert(e.class_label);
    m.entries.push_back(std::move(e));
  }
  if (!header_seen) throw std::runtime_error("manifest " + csv.string() + " is empty");
  if (!labels.empty()) {
    m.num_classes = *labels.rbegin() + 1;
    if (static_cast<int>(labels.size()) != m.num_classes) {
      throw std::runtime_error("manifest labels are not contiguous 0..K-1 in " + csv.string());
    }
  }
  return m;
}

Tensor normalize(const Tensor& chw, NormalizeMode mode, const NormalizeParams& params) {
  if (mode == NormalizeMode::unit) return chw;
  if (chw.ndim() != 3) throw std::invalid_argument("normalize expects a [C,H,W] tensor");
  const auto c = static_cast<std::size_t>(chw.dim(0));
  if (params.mean.size() != c || params.std.size() != c) {
    throw std::invalid_argument("normalization params have " + std::to_string(params.mean.size()) +
                                " channels, image has " + std::to_string(c));
  }
  Tensor out = chw;
  const std::size_t plane = static_cast<std::size_t>(chw.dim(1) * chw.dim(2));
  for (std::size_t ch = 0; ch < c; ++ch) {
    if (!(params.std[ch] > 0.0f)) throw std::invalid_argument("normalization std must be > 0");
    for (std::size_t i = 0; i < plane; ++i) {
      float& v = out[ch * plane + i];
      v = (v - params.mean[ch]) / params.std[ch];
    }
  }
  return out;
}

Tensor normalize(const ImageSample& image, NormalizeMode mode, const NormalizeParams& params) {
  return normalize(image.pixels, mode, params);
}

}  // namespace dinomx
