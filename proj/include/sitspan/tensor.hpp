#pragma once

#include <cstdint>
#include <cstring>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "sitspan/common.hpp"

namespace sitspan {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s);

// Dense row-major tensor. Copies are shallow (shared storage); use clone()
// for a deep copy. All layouts in this codebase are contiguous.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape)
      : shape_(std::move(shape)),
        store_(std::make_shared<std::vector<T>>(shape_numel(shape_))) {}

  Tensor(Shape shape, T fill)
      : shape_(std::move(shape)),
        store_(std::make_shared<std::vector<T>>(shape_numel(shape_), fill)) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, T v) { return Tensor(std::move(shape), v); }

  static Tensor from(Shape shape, std::vector<T> data) {
    check(shape_numel(shape) == int64_t(data.size()), ErrorCode::ShapeMismatch,
          "tensor data size does not match shape " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = std::make_shared<std::vector<T>>(std::move(data));
    return t;
  }

  static Tensor scalar(T v) { return full({}, v); }

  bool defined() const { return store_ != nullptr; }
  const Shape& shape() const { return shape_; }
  int ndim() const { return int(shape_.size()); }
  int64_t dim(int i) const { return shape_[size_t(i < 0 ? i + ndim() : i)]; }
  int64_t numel() const { return store_ ? int64_t(store_->size()) : 0; }

  T* data() { return store_->data(); }
  const T* data() const { return store_->data(); }
  T& operator[](int64_t i) { return (*store_)[size_t(i)]; }
  const T& operator[](int64_t i) const { return (*store_)[size_t(i)]; }

  template <typename... Ix>
  T& at(Ix... ix) {
    return (*store_)[size_t(offset_of({int64_t(ix)...}))];
  }
  template <typename... Ix>
  const T& at(Ix... ix) const {
    return (*store_)[size_t(offset_of({int64_t(ix)...}))];
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    if (store_) t.store_ = std::make_shared<std::vector<T>>(*store_);
    return t;
  }

  // Shares storage; -1 infers one dimension.
  Tensor reshaped(Shape shape) const {
    int64_t known = 1, infer = -1;
    for (size_t i = 0; i < shape.size(); ++i) {
      if (shape[i] == -1) {
        check(infer < 0, ErrorCode::ShapeError, "multiple -1 in reshape");
        infer = int64_t(i);
      } else {
        known *= shape[i];
      }
    }
    if (infer >= 0) shape[size_t(infer)] = numel() / known;
    check(shape_numel(shape) == numel(), ErrorCode::ShapeError,
          "reshape " + shape_str(shape_) + " -> " + shape_str(shape));
    Tensor t;
    t.shape_ = std::move(shape);
    t.store_ = store_;
    return t;
  }

  void fill(T v) { std::fill(store_->begin(), store_->end(), v); }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out{shape_};
    const T* src = data();
    U* dst = out.data();
    for (int64_t i = 0; i < numel(); ++i) dst[i] = U(src[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  int64_t offset_of(std::initializer_list<int64_t> ix) const {
    int64_t off = 0;
    size_t k = 0;
    for (int64_t i : ix) {
      off = off * shape_[k] + i;
      ++k;
    }
    for (; k < shape_.size(); ++k) off *= shape_[k];
    return off;
  }

  Shape shape_;
  std::shared_ptr<std::vector<T>> store_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;
using TensorI = Tensor<int32_t>;

}  // namespace sitspan
