#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace barl {

using Real = double;
using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline Index shape_numel(const Shape& s) {
  Index n = 1;
  for (Index e : s) n *= e;
  return n;
}

/// Dense N-dimensional array in row-major order, backed by an Eigen array.
/// The last axis is fastest-varying.
template <typename T>
class NdArray {
 public:
  using Storage = Eigen::Array<T, Eigen::Dynamic, 1>;

  NdArray() = default;

  explicit NdArray(Shape shape) : shape_(std::move(shape)) {
    for (Index e : shape_)
      if (e <= 0) throw std::invalid_argument("NdArray: nonpositive extent in " + shape_str(shape_));
    data_ = Storage::Zero(shape_numel(shape_));
  }

  NdArray(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != shape_numel(shape_))
      throw std::invalid_argument("NdArray: data size does not match " + shape_str(shape_));
  }

  static NdArray zeros(Shape shape) { return NdArray(std::move(shape)); }

  static NdArray full(Shape shape, T v) {
    NdArray a(std::move(shape));
    a.data_.setConstant(v);
    return a;
  }

  static NdArray from(Shape shape, std::initializer_list<T> vals) {
    NdArray a(std::move(shape));
    if (static_cast<Index>(vals.size()) != a.size())
      throw std::invalid_argument("NdArray::from: value count does not match shape");
    Index i = 0;
    for (T v : vals) a.data_(i++) = v;
    return a;
  }

  static NdArray scalar(T v) { return full({1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index extent(Index axis) const { return shape_.at(static_cast<size_t>(axis)); }
  Index size() const { return data_.size(); }
  bool same_shape(const NdArray& o) const { return shape_ == o.shape_; }

  Storage& flat() { return data_; }
  const Storage& flat() const { return data_; }
  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](Index i) { return data_(i); }
  const T& operator[](Index i) const { return data_(i); }

  /// Linear offset of a multi-index (row-major).
  Index offset(std::initializer_list<Index> idx) const {
    Index off = 0;
    size_t d = 0;
    for (Index i : idx) {
      off = off * shape_[d] + i;
      ++d;
    }
    return off;
  }

  T& at(std::initializer_list<Index> idx) { return data_(offset(idx)); }
  const T& at(std::initializer_list<Index> idx) const { return data_(offset(idx)); }

  /// Same data, new shape; element count must match.
  NdArray reshaped(Shape shape) const {
    if (shape_numel(shape) != size())
      throw std::invalid_argument("NdArray::reshaped: element count mismatch for " + shape_str(shape));
    return NdArray(std::move(shape), data_);
  }

  bool all_finite() const {
    return data_.isFinite().all();
  }

  template <typename U>
  NdArray<U> cast() const {
    return NdArray<U>(shape_, data_.template cast<U>());
  }

 private:
  Shape shape_;
  Storage data_;
};

using Tensor = NdArray<Real>;
using IntVolume = NdArray<int32_t>;
using ByteMask = NdArray<uint8_t>;

}  // namespace barl
