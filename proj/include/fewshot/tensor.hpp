#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace fewshot {

/// Thrown when tensor extents do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<std::size_t>;

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t element_count(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

/**
 * Dense row-major array of doubles with an optional gradient buffer.
 *
 * A rank-0 tensor (empty shape) holds one element and is used for scalar
 * losses. Every extent must be positive.
 */
class Tensor {
 public:
  Tensor() : Tensor(Shape{}, 0.0) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)), data_(checked_count(shape_), fill) {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (data_.size() != checked_count(shape_)) {
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + to_string(shape_));
    }
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, v); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
      throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                       to_string(shape_));
    }
    return shape_[axis];
  }
  std::size_t size() const noexcept { return data_.size(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double item() const {
    if (data_.size() != 1) {
      throw ShapeError("item() on tensor of shape " + to_string(shape_));
    }
    return data_[0];
  }

  bool is_scalar() const noexcept { return data_.size() == 1; }

  bool has_grad() const noexcept { return grad_.has_value(); }

  std::span<double> grad() {
    if (!grad_) throw std::logic_error("tensor has no gradient buffer");
    return *grad_;
  }
  std::span<const double> grad() const {
    if (!grad_) throw std::logic_error("tensor has no gradient buffer");
    return *grad_;
  }

  /// Returns the gradient buffer, allocating it zero-filled on first use.
  std::span<double> ensure_grad() {
    if (!grad_) grad_.emplace(data_.size(), 0.0);
    return *grad_;
  }

  void zero_grad() {
    if (grad_) std::fill(grad_->begin(), grad_->end(), 0.0);
  }
  void clear_grad() noexcept { grad_.reset(); }

  /// Same shape, new data; the gradient buffer is not carried over.
  Tensor reshaped(Shape shape) const {
    return Tensor(std::move(shape), data_);
  }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  static std::size_t checked_count(const Shape& shape) {
    for (std::size_t e : shape) {
      if (e == 0) throw ShapeError("zero extent in shape " + to_string(shape));
    }
    return element_count(shape);
  }

  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

inline void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " +
                     std::to_string(rank) + ", got shape " +
                     to_string(t.shape()));
  }
}

}  // namespace fewshot
