#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

namespace gnflow {

/// Dense row-major tensor of 64-bit floats. Cheap to copy (shared storage);
/// treated as immutable once built, so copies are safe to share across threads.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<std::int64_t> shape);
  Tensor(std::vector<std::int64_t> shape, std::vector<double> values);

  static Tensor scalar(double v);
  static Tensor zeros(std::vector<std::int64_t> shape);
  static Tensor full(std::vector<std::int64_t> shape, double v);
  static Tensor eye(std::int64_t n);

  const std::vector<std::int64_t>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t size() const { return size_; }
  bool defined() const { return data_ != nullptr; }

  const double* data() const { return data_->data(); }
  double* data() { return data_->data(); }

  double& at(std::int64_t i) { return (*data_)[static_cast<std::size_t>(i)]; }
  double at(std::int64_t i) const { return (*data_)[static_cast<std::size_t>(i)]; }
  double& at(std::int64_t i, std::int64_t j) { return (*data_)[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double at(std::int64_t i, std::int64_t j) const { return (*data_)[static_cast<std::size_t>(i * shape_[1] + j)]; }
  double& at(std::int64_t i, std::int64_t j, std::int64_t k) {
    return (*data_)[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }
  double at(std::int64_t i, std::int64_t j, std::int64_t k) const {
    return (*data_)[static_cast<std::size_t>((i * shape_[1] + j) * shape_[2] + k)];
  }

  /// Value of a rank-0 (or single-element) tensor.
  double item() const;

  /// Same data, new shape; element count must match. O(1), shares storage.
  Tensor reshape(std::vector<std::int64_t> shape) const;

  /// Deep copy with private storage (copies are shallow otherwise).
  Tensor clone() const;

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;

  std::string shape_str() const;

 private:
  std::vector<std::int64_t> shape_;
  std::int64_t size_ = 0;
  std::shared_ptr<std::vector<double>> data_;
};

std::string shape_str(const std::vector<std::int64_t>& shape);

/// Throws std::invalid_argument mentioning both shapes.
void check_same_shape(const Tensor& a, const Tensor& b, const char* op);

}  // namespace gnflow
