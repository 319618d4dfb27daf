#include "ddae/tensor.hpp"

#include <cmath>
#include <cstring>

#include "ddae/error.hpp"

namespace ddae {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ContractError("negative dimension in shape " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : Tensor(from_buffer(std::move(shape), FloatBuffer(values.begin(), values.end()))) {}

Tensor Tensor::from_buffer(Shape shape, FloatBuffer values) {
  if (values.size() != shape_numel(shape))
    throw ContractError("tensor value count " + std::to_string(values.size()) + " does not match shape " +
                        shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = std::move(values);
  return t;
}

float& Tensor::at(int n, int c, int y, int x) {
  const std::size_t idx = ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  return data_[idx];
}

float Tensor::at(int n, int c, int y, int x) const {
  const std::size_t idx = ((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x;
  return data_[idx];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size())
    throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return from_buffer(std::move(shape), data_);
}

void Tensor::fill(float v) {
  for (auto& x : data_) x = v;
}

Tensor Tensor::rows(int begin, int end) const {
  if (shape_.empty() || begin < 0 || end > shape_[0] || begin > end)
    throw ContractError("row slice out of range for shape " + shape_str(shape_));
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t stride = shape_[0] ? data_.size() / static_cast<std::size_t>(shape_[0]) : 0;
  FloatBuffer v(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                data_.begin() + static_cast<std::ptrdiff_t>(end * stride));
  return Tensor::from_buffer(std::move(s), std::move(v));
}

Tensor Tensor::gather_rows(std::span<const int> idx) const {
  Shape s = shape_;
  s[0] = static_cast<int>(idx.size());
  Tensor out(s);
  const std::size_t stride = shape_[0] ? data_.size() / static_cast<std::size_t>(shape_[0]) : 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= shape_[0]) throw ContractError("gather index out of range");
    std::memcpy(out.data() + i * stride, data_.data() + static_cast<std::size_t>(idx[i]) * stride,
                stride * sizeof(float));
  }
  return out;
}

bool Tensor::all_finite() const noexcept {
  for (float v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

bool Tensor::bitwise_equal(const Tensor& other) const noexcept {
  return shape_ == other.shape_ &&
         (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  Shape s = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape a = p.shape(), b = s;
    a[0] = b[0] = 0;
    if (a != b) throw ContractError("concat_rows trailing shape mismatch");
    total += p.dim(0);
  }
  s[0] = total;
  FloatBuffer v;
  v.reserve(shape_numel(s));
  for (const auto& p : parts) v.insert(v.end(), p.storage().begin(), p.storage().end());
  return Tensor::from_buffer(std::move(s), std::move(v));
}

std::uint64_t content_hash(const Tensor& t, std::uint64_t h) {
  auto mix = [&h](const unsigned char* p, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (int d : t.shape()) mix(reinterpret_cast<const unsigned char*>(&d), sizeof d);
  mix(reinterpret_cast<const unsigned char*>(t.data()), t.numel() * sizeof(float));
  return h;
}

}  // namespace ddae
