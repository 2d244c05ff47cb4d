#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "cvm/error.hpp"

namespace cvm {

// Dense row-major array. Most of the library works on rank-2 tensors
// ([rows, cols]); higher ranks are only carried through (e.g. image shapes).
template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  explicit BasicTensor(std::vector<std::size_t> shape, T fill = T{})
      : shape_(std::move(shape)), data_(element_count(shape_), fill) {}

  BasicTensor(std::vector<std::size_t> shape, std::vector<T> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (element_count(shape_) != data_.size()) {
      throw DimensionError("tensor data length " + std::to_string(data_.size()) +
                           " does not match shape product " +
                           std::to_string(element_count(shape_)));
    }
  }

  // Rank-2 tensor from nested rows.
  static BasicTensor from_rows(std::initializer_list<std::initializer_list<T>> rows) {
    const std::size_t r = rows.size();
    const std::size_t c = r == 0 ? 0 : rows.begin()->size();
    std::vector<T> data;
    data.reserve(r * c);
    for (const auto& row : rows) {
      if (row.size() != c) throw DimensionError("ragged rows in from_rows");
      data.insert(data.end(), row.begin(), row.end());
    }
    return BasicTensor({r, c}, std::move(data));
  }

  static std::size_t element_count(const std::vector<std::size_t>& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
  }

  const std::vector<std::size_t>& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  // Leading dimension and the product of the rest.
  std::size_t rows() const noexcept { return shape_.empty() ? 0 : shape_[0]; }
  std::size_t cols() const noexcept { return rows() == 0 ? 0 : data_.size() / rows(); }

  std::span<T> data() noexcept { return data_; }
  std::span<const T> data() const noexcept { return data_; }
  const std::vector<T>& values() const noexcept { return data_; }

  std::span<T> row(std::size_t i) noexcept { return {data_.data() + i * cols(), cols()}; }
  std::span<const T> row(std::size_t i) const noexcept {
    return {data_.data() + i * cols(), cols()};
  }

  T& operator()(std::size_t i, std::size_t j) noexcept { return data_[i * cols() + j]; }
  const T& operator()(std::size_t i, std::size_t j) const noexcept {
    return data_[i * cols() + j];
  }

  T& operator[](std::size_t i) noexcept { return data_[i]; }
  const T& operator[](std::size_t i) const noexcept { return data_[i]; }

  template <class U>
  BasicTensor<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return BasicTensor<U>(shape_, std::move(out));
  }

  // Reinterpret with a new shape of the same element count.
  BasicTensor reshaped(std::vector<std::size_t> shape) const {
    return BasicTensor(std::move(shape), data_);
  }

  // Rows [begin, end) of a rank-2 view.
  BasicTensor slice_rows(std::size_t begin, std::size_t end) const {
    const std::size_t c = cols();
    std::vector<T> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                       data_.begin() + static_cast<std::ptrdiff_t>(end * c));
    return BasicTensor({end - begin, c}, std::move(out));
  }

  BasicTensor gather_rows(std::span<const std::size_t> idx) const {
    const std::size_t c = cols();
    BasicTensor out({idx.size(), c});
    for (std::size_t k = 0; k < idx.size(); ++k) {
      auto src = row(idx[k]);
      std::copy(src.begin(), src.end(), out.row(k).begin());
    }
    return out;
  }

  bool all_finite() const {
    for (T v : data_) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  }

  friend bool operator==(const BasicTensor&, const BasicTensor&) = default;

 private:
  std::vector<std::size_t> shape_;
  std::vector<T> data_;
};

using Tensor = BasicTensor<float>;

// Vertical concatenation of two rank-2 tensors with equal column counts.
template <class T>
BasicTensor<T> concat_rows(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.rows() == 0) return b;
  if (b.rows() == 0) return a;
  if (a.cols() != b.cols()) throw DimensionError("concat_rows: column mismatch");
  std::vector<T> data(a.values());
  data.insert(data.end(), b.values().begin(), b.values().end());
  return BasicTensor<T>({a.rows() + b.rows(), a.cols()}, std::move(data));
}

template <class T>
T dot(std::span<const T> a, std::span<const T> b) {
  T acc{};
  for (std::size_t i = 0; i < a.size(); ++i) acc += a[i] * b[i];
  return acc;
}

template <class T>
T norm2(std::span<const T> a) {
  return std::sqrt(dot(a, a));
}

}  // namespace cvm
