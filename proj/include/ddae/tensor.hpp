#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace ddae {

using Shape = std::vector<int>;

// 64-byte aligned storage, so vectorized kernels take the same code path
// (and produce the same bits) wherever a buffer lands on the heap.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAllocator() noexcept = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept { return true; }
};

using FloatBuffer = std::vector<float, AlignedAllocator<float>>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major float32 array. Image batches are laid out NCHW.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor from_buffer(Shape shape, FloatBuffer values);
  static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape_); }

  const Shape& shape() const noexcept { return shape_; }
  int ndim() const noexcept { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? ndim() + i : i)); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  float* data() noexcept { return data_.data(); }
  const float* data() const noexcept { return data_.data(); }
  std::span<float> values() noexcept { return data_; }
  std::span<const float> values() const noexcept { return data_; }
  FloatBuffer& storage() noexcept { return data_; }
  const FloatBuffer& storage() const noexcept { return data_; }

  float& operator[](std::size_t i) noexcept { return data_[i]; }
  float operator[](std::size_t i) const noexcept { return data_[i]; }

  // 4-D accessor (n, c, y, x) for NCHW tensors.
  float& at(int r, int c) { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  float at(int r, int c) const { return data_[static_cast<std::size_t>(r) * shape_[1] + c]; }
  float& at(int n, int c, int y, int x);
  float at(int n, int c, int y, int x) const;

  // Same storage, new shape; element count must match.
  Tensor reshaped(Shape shape) const;

  void fill(float v);
  // Leading-dimension slice [begin, end).
  Tensor rows(int begin, int end) const;
  // Gathers leading-dimension entries by index.
  Tensor gather_rows(std::span<const int> idx) const;

  bool all_finite() const noexcept;
  bool bitwise_equal(const Tensor& other) const noexcept;

 private:
  Shape shape_;
  FloatBuffer data_;
};

// Concatenates along the leading dimension; trailing shapes must agree.
Tensor concat_rows(std::span<const Tensor> parts);

// Stable 64-bit content hash (shape + raw bytes), used for weight-purity checks.
std::uint64_t content_hash(const Tensor& t, std::uint64_t seed = 0xcbf29ce484222325ULL);

}  // namespace ddae
