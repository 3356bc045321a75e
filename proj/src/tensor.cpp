#include "gnflow/tensor.hpp"

#include <cmath>
#include <numeric>
#include <stdexcept>

namespace gnflow {

namespace {
std::int64_t shape_size(const std::vector<std::int64_t>& shape) {
  std::int64_t s = 1;
  for (std::int64_t d : shape) {
    if (d < 0) throw std::invalid_argument("tensor: negative dimension in " + shape_str(shape));
    s *= d;
  }
  return s;
}
}  // namespace

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)),
      size_(shape_size(shape_)),
      data_(std::make_shared<std::vector<double>>(static_cast<std::size_t>(size_), 0.0)) {}

Tensor::Tensor(std::vector<std::int64_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), size_(shape_size(shape_)) {
  if (static_cast<std::int64_t>(values.size()) != size_) {
    throw std::invalid_argument("tensor: " + std::to_string(values.size()) + " values for shape " +
                                gnflow::shape_str(shape_));
  }
  data_ = std::make_shared<std::vector<double>>(std::move(values));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::int64_t> shape, double v) {
  Tensor t(std::move(shape));
  std::fill(t.data_->begin(), t.data_->end(), v);
  return t;
}

Tensor Tensor::eye(std::int64_t n) {
  Tensor t({n, n});
  for (std::int64_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

double Tensor::item() const {
  if (size_ != 1) throw std::invalid_argument("item: tensor has " + std::to_string(size_) + " elements");
  return (*data_)[0];
}

Tensor Tensor::reshape(std::vector<std::int64_t> shape) const {
  if (shape_size(shape) != size_) {
    throw std::invalid_argument("reshape: " + gnflow::shape_str(shape_) + " -> " + gnflow::shape_str(shape) +
                                " changes element count");
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.size_ = size_;
  t.data_ = data_;
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.shape_ = shape_;
  t.size_ = size_;
  t.data_ = std::make_shared<std::vector<double>>(*data_);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : *data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const { return gnflow::shape_str(shape_); }

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (!a.same_shape(b)) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                                b.shape_str());
  }
}

}  // namespace gnflow
