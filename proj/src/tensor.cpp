#include "moodnet/tensor.hpp"

#include <cmath>
#include <sstream>

#include "moodnet/common/error.hpp"

namespace moodnet {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

bool is_shape_suffix(const std::vector<std::size_t>& suffix,
                     const std::vector<std::size_t>& shape) {
  if (suffix.size() > shape.size()) return false;
  std::size_t off = shape.size() - suffix.size();
  for (std::size_t i = 0; i < suffix.size(); ++i) {
    if (suffix[i] != shape[off + i]) return false;
  }
  return true;
}

namespace {
void validate_shape(const std::vector<std::size_t>& shape) {
  if (shape.empty()) {
    throw Error(errc::shape_mismatch, "tensor shape must not be empty");
  }
  for (std::size_t d : shape) {
    if (d == 0) {
      throw Error(errc::shape_mismatch,
                  "tensor dimensions must be positive, got " + Tensor::shape_str(shape));
    }
  }
}
}  // namespace

Tensor::Tensor() : shape_{1}, data_(1, 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
  validate_shape(shape_);
  data_.assign(shape_product(shape_), 0.0);
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  validate_shape(shape_);
  if (shape_product(shape_) != data_.size()) {
    throw Error(errc::shape_mismatch,
                "data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_str());
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) { return Tensor({1}, {value}); }

Tensor Tensor::row(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

void Tensor::fill(double value) { data_.assign(data_.size(), value); }

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  if (shape_product(new_shape) != data_.size()) {
    throw Error(errc::shape_mismatch,
                "cannot reshape " + shape_str() + " to " + shape_str(new_shape));
  }
  return Tensor(std::move(new_shape), data_);
}

std::string Tensor::shape_str() const { return shape_str(shape_); }

std::string Tensor::shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

}  // namespace moodnet
