#pragma once

#include <algorithm>
#include <cmath>
#include <cassert>
#include <cstddef>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "doam/errors.hpp"

namespace doam {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

// Dense row-major array. Image-like data is channels-first: [C,H,W] for a
// single image, [N,C,H,W] for a batch.
template <class T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T{0})
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_dims();
  }
  Tensor(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_dims();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor data size " + std::to_string(data_.size()) +
                       " does not match shape " + shape_str(shape_));
  }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::vector<T>& vec() & { return data_; }
  const std::vector<T>& vec() const& { return data_; }
  // by value on temporaries, so range-for over f().vec() does not dangle
  std::vector<T> vec() && { return std::move(data_); }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  T& at(int c, int h, int w) {
    assert(rank() == 3);
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  const T& at(int c, int h, int w) const {
    assert(rank() == 3);
    return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w];
  }
  T& at(int n, int c, int h, int w) {
    assert(rank() == 4);
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }
  const T& at(int n, int c, int h, int w) const {
    assert(rank() == 4);
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w];
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Tensor(std::move(s), data_);
  }

  template <class U>
  Tensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor<U>(shape_, std::move(out));
  }

  Tensor& operator+=(const Tensor& o) {
    assert(o.size() == size());
    for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += o.data_[i];
    return *this;
  }

  bool operator==(const Tensor& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  void check_dims() const {
    for (int d : shape_)
      if (d < 0) throw ShapeError("negative dimension in shape " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<T> data_;
};

// Image [C,H,W] with values in [0,1]; C is 3 for colour images, 1 for
// grayscale and edge images.
template <class T>
using ImageTensor = Tensor<T>;
// Activations [C',H,W].
template <class T>
using FeatureMap = Tensor<T>;
// Sigmoid attention [H,W], values in (0,1).
template <class T>
using AttentionMap = Tensor<T>;

// True iff `t` is [C,H,W] with the expected channel count and spatial extent.
template <class T>
bool validate_shapes(const Tensor<T>& t, int expected_channels, std::pair<int, int> expected_spatial) {
  return t.rank() == 3 && t.dim(0) == expected_channels && t.dim(1) == expected_spatial.first &&
         t.dim(2) == expected_spatial.second;
}

template <class T>
void require_shape(const Tensor<T>& t, int channels, std::pair<int, int> spatial, const char* what) {
  if (!validate_shapes(t, channels, spatial))
    throw ShapeError(std::string(what) + ": expected [" + std::to_string(channels) + "," +
                     std::to_string(spatial.first) + "," + std::to_string(spatial.second) + "], got " +
                     shape_str(t.shape()));
}

// Channel slice [c0,c1) of a [C,H,W] tensor.
template <class T>
Tensor<T> slice_channels(const Tensor<T>& t, int c0, int c1) {
  if (t.rank() != 3 || c0 < 0 || c1 > t.dim(0) || c0 >= c1)
    throw ShapeError("slice_channels: bad range for " + shape_str(t.shape()));
  const std::size_t plane = static_cast<std::size_t>(t.dim(1)) * t.dim(2);
  std::vector<T> out(t.data() + c0 * plane, t.data() + c1 * plane);
  return Tensor<T>({c1 - c0, t.dim(1), t.dim(2)}, std::move(out));
}

// Stacks equally shaped [C,H,W] tensors into [N,C,H,W].
template <class T>
Tensor<T> stack(std::span<const Tensor<T>> items) {
  if (items.empty()) throw ShapeError("stack: no tensors");
  Shape s = items[0].shape();
  std::vector<T> out;
  out.reserve(items.size() * items[0].size());
  for (const auto& t : items) {
    if (t.shape() != s) throw ShapeError("stack: mismatched shapes");
    out.insert(out.end(), t.vec().begin(), t.vec().end());
  }
  s.insert(s.begin(), static_cast<int>(items.size()));
  return Tensor<T>(std::move(s), std::move(out));
}

// Item n of a batch [N,...] as a tensor of rank one lower.
template <class T>
Tensor<T> unstack(const Tensor<T>& batch, int n) {
  Shape s(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t per = shape_numel(s);
  std::vector<T> out(batch.data() + n * per, batch.data() + (n + 1) * per);
  return Tensor<T>(std::move(s), std::move(out));
}

template <class T>
bool all_finite(const Tensor<T>& t) {
  return std::all_of(t.vec().begin(), t.vec().end(), [](T v) { return std::isfinite(v); });
}

}  // namespace doam
