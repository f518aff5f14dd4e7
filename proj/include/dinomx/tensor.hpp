#pragma once

#include <cstdint>
#include <cstdlib>
#include <map>
#include <new>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dinomx {

using Shape = std::vector<std::int64_t>;

/// 64-byte aligned storage. Vectorized reductions peel a prefix that depends
/// on the address, so unaligned buffers would make sums run-dependent.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::size_t kAlign = 64;
  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) {
    const std::size_t bytes = (n * sizeof(T) + kAlign - 1) / kAlign * kAlign;
    void* p = std::aligned_alloc(kAlign, bytes == 0 ? kAlign : bytes);
    if (!p) throw std::bad_alloc();
    return static_cast<T*>(p);
  }
  void deallocate(T* p, std::size_t) { std::free(p); }
  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

/// Dense row-major float32 array. Constructors reject non-positive dims,
/// size mismatches and non-finite values; a default-constructed tensor is
/// an empty placeholder with no shape.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  std::size_t ndim() const { return shape_.size(); }
  std::int64_t dim(std::size_t i) const { return shape_.at(i); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Reinterprets the payload under a new shape of equal element count.
  Tensor reshaped(Shape shape) const;

  std::string shape_string() const;

 private:
  Shape shape_;
  FloatBuffer data_;
};

std::int64_t shape_product(const Shape& shape);

/// Bitwise comparison of shape and payload (distinguishes -0.0 from 0.0).
bool bit_equal(const Tensor& a, const Tensor& b);

bool all_finite(std::span<const float> values);

/// Ordered name -> tensor map. Iteration order is lexicographic and therefore
/// deterministic, which the gradient reducer and the checkpoint writer rely on.
using ParameterSet = std::map<std::string, Tensor>;

/// Name/tensor pairs in file order; may carry duplicates (rejected on write).
using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

std::size_t parameter_count(const ParameterSet& params);

/// 64-bit FNV-1a over names, shapes and payload bytes.
std::uint64_t parameter_hash(const ParameterSet& params);

}  // namespace dinomx
