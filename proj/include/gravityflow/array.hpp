#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gravityflow/errors.hpp"

namespace gravityflow {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// Row-major strides: stride[k] = prod(shape[k+1..]).
inline std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> s(shape.size(), 1);
  for (std::size_t k = shape.size(); k-- > 1;) s[k - 1] = s[k] * shape[k];
  return s;
}

// Numpy-style broadcast of two shapes (trailing alignment, extent 1 stretches).
inline Shape broadcast_shapes(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t ea = k < r - a.size() ? 1 : a[k - (r - a.size())];
    const std::size_t eb = k < r - b.size() ? 1 : b[k - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1)
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[k] = std::max(ea, eb);
  }
  return out;
}

// Strides of `src` viewed inside `dst` under broadcasting; stretched axes get 0.
inline std::vector<std::size_t> broadcast_strides(const Shape& src, const Shape& dst) {
  std::vector<std::size_t> out(dst.size(), 0);
  const auto s = strides_of(src);
  const std::size_t off = dst.size() - src.size();
  for (std::size_t k = 0; k < src.size(); ++k) {
    if (src[k] == dst[k + off]) {
      out[k + off] = src[k] == 1 ? 0 : s[k];
    } else if (src[k] != 1) {
      throw DimensionError("cannot broadcast " + shape_str(src) + " to " + shape_str(dst));
    }
  }
  return out;
}

// Walks `shape` in row-major order and calls fn(flat_index, mapped_offset),
// where mapped_offset follows `mapped_strides` (used for broadcast/reduce maps).
template <class Fn>
void for_each_mapped(const Shape& shape, const std::vector<std::size_t>& mapped_strides, Fn&& fn) {
  const std::size_t n = numel(shape);
  if (n == 0) return;
  const std::size_t r = shape.size();
  if (r == 0) {
    fn(std::size_t{0}, std::size_t{0});
    return;
  }
  std::vector<std::size_t> idx(r, 0);
  std::size_t off = 0;
  const std::size_t inner = shape[r - 1];
  const std::size_t inner_stride = mapped_strides[r - 1];
  for (std::size_t flat = 0; flat < n; flat += inner) {
    for (std::size_t j = 0; j < inner; ++j) fn(flat + j, off + j * inner_stride);
    for (std::size_t k = r - 1; k-- > 0;) {
      ++idx[k];
      off += mapped_strides[k];
      if (idx[k] < shape[k]) break;
      off -= mapped_strides[k] * shape[k];
      idx[k] = 0;
    }
  }
}

// Dense row-major array. The value carrier for every tensor in the model.
template <class T>
class Array {
 public:
  using value_type = T;

  Array() : shape_{0} {}
  explicit Array(Shape shape, T fill = T{0}) : shape_(std::move(shape)), data_(numel(shape_), fill) {}
  Array(Shape shape, std::vector<T> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (numel(shape_) != data_.size())
      throw DimensionError("data length " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }

  static Array scalar(T v) { return Array(Shape{}, std::vector<T>{v}); }
  static Array zeros(const Shape& s) { return Array(s, T{0}); }
  static Array ones(const Shape& s) { return Array(s, T{1}); }
  static Array from(std::initializer_list<std::size_t> shape, std::initializer_list<T> values) {
    return Array(Shape(shape), std::vector<T>(values));
  }
  static Array identity(std::size_t n) {
    Array a({n, n});
    for (std::size_t i = 0; i < n; ++i) a.data_[i * n + i] = T{1};
    return a;
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t extent(std::size_t axis) const { return shape_.at(axis); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> values() { return data_; }
  std::span<const T> values() const { return data_; }
  std::vector<T>& storage() { return data_; }
  const std::vector<T>& storage() const { return data_; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  std::size_t offset(std::initializer_list<std::size_t> index) const {
    if (index.size() != shape_.size())
      throw DimensionError("index rank " + std::to_string(index.size()) + " for shape " + shape_str(shape_));
    std::size_t off = 0;
    std::size_t k = 0;
    for (std::size_t i : index) {
      if (i >= shape_[k]) throw RangeError("index out of range for shape " + shape_str(shape_));
      off = off * shape_[k] + i;
      ++k;
    }
    return off;
  }
  T& at(std::initializer_list<std::size_t> index) { return data_[offset(index)]; }
  const T& at(std::initializer_list<std::size_t> index) const { return data_[offset(index)]; }

  Array reshaped(Shape s) const {
    if (numel(s) != size())
      throw DimensionError("cannot reshape " + shape_str(shape_) + " to " + shape_str(s));
    return Array(std::move(s), data_);
  }

  template <class U>
  Array<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Array<U>(shape_, std::move(out));
  }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  bool operator==(const Array&) const = default;

 private:
  Shape shape_;
  std::vector<T> data_;
};

template <class T>
T max_abs_diff(const Array<T>& a, const Array<T>& b) {
  if (a.shape() != b.shape()) throw DimensionError("max_abs_diff " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  T m{0};
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, static_cast<T>(std::abs(a[i] - b[i])));
  return m;
}

}  // namespace gravityflow
