#include "dinomx/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>
#include <stdexcept>

namespace dinomx {

std::int64_t shape_product(const Shape& shape) {
  if (shape.empty()) return 0;
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d <= 0) throw std::invalid_argument("tensor dimensions must be positive");
    n *= d;
  }
  return n;
}

bool all_finite(std::span<const float> values) {
  for (float v : values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)) {
  if (shape_.empty()) throw std::invalid_argument("tensor shape must be non-empty");
  if (!std::isfinite(fill)) throw std::invalid_argument("tensor fill value is not finite");
  data_.assign(static_cast<std::size_t>(shape_product(shape_)), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(std::move(shape)), data_(values.begin(), values.end()) {
  if (shape_.empty()) throw std::invalid_argument("tensor shape must be non-empty");
  if (static_cast<std::size_t>(shape_product(shape_)) != data_.size()) {
    throw std::invalid_argument("tensor payload of " + std::to_string(data_.size()) +
                                " values does not match shape " + shape_string());
  }
  if (!all_finite(data_)) throw std::invalid_argument("tensor payload contains non-finite values");
}

Tensor Tensor::reshaped(Shape shape) const {
  if (static_cast<std::size_t>(shape_product(shape)) != data_.size()) {
    throw std::invalid_argument("reshape changes element count");
  }
  Tensor out;
  out.shape_ = std::move(shape);
  out.data_ = data_;
  return out;
}

std::string Tensor::shape_string() const {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape_.size(); ++i) {
    if (i) os << ',';
    os << shape_[i];
  }
  os << ']';
  return os.str();
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.numel() != b.numel()) return false;
  return a.numel() == 0 ||
         std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(float)) == 0;
}

std::size_t parameter_count(const ParameterSet& params) {
  std::size_t n = 0;
  for (const auto& [name, t] : params) n += t.numel();
  return n;
}

namespace {
constexpr std::uint64_t kFnvOffset = 1469598103934665603ull;
constexpr std::uint64_t kFnvPrime = 1099511628211ull;

void fnv_mix(std::uint64_t& h, const void* bytes, std::size_t n) {
  const auto* p = static_cast<const unsigned char*>(bytes);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= kFnvPrime;
  }
}
}  // namespace

std::uint64_t parameter_hash(const ParameterSet& params) {
  std::uint64_t h = kFnvOffset;
  for (const auto& [name, t] : params) {
    fnv_mix(h, name.data(), name.size());
    for (auto d : t.shape()) fnv_mix(h, &d, sizeof d);
    fnv_mix(h, t.data().data(), t.numel() * sizeof(float));
  }
  return h;
}

}  // namespace dinomx
