#include "lwd/tensor.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "lwd/errors.hpp"

namespace lwd {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw ContractError("negative tensor dimension in " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ContractError("tensor data size " + std::to_string(data_.size()) + " does not match shape " +
                        shape_str(shape_));
  }
}

std::size_t Tensor::row_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / static_cast<std::size_t>(shape_[0]);
}

std::span<const double> Tensor::row(int i) const {
  const std::size_t n = row_size();
  return {data_.data() + static_cast<std::size_t>(i) * n, n};
}

std::span<double> Tensor::row(int i) {
  const std::size_t n = row_size();
  return {data_.data() + static_cast<std::size_t>(i) * n, n};
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ContractError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

Tensor Tensor::slice_rows(int begin, int end) const {
  if (begin < 0 || end > dim(0) || begin > end) throw ContractError("slice_rows out of range");
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t n = row_size();
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                        data_.begin() + static_cast<std::ptrdiff_t>(end * n));
  return Tensor(std::move(s), std::move(d));
}

Tensor Tensor::gather_rows(std::span<const int> rows) const {
  Shape s = shape_;
  s[0] = static_cast<int>(rows.size());
  const std::size_t n = row_size();
  std::vector<double> d(rows.size() * n);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= dim(0)) throw ContractError("gather_rows index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(rows[r]) * n), n,
                d.begin() + static_cast<std::ptrdiff_t>(r * n));
  }
  return Tensor(std::move(s), std::move(d));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor stack_rows(const std::vector<Tensor>& rows) {
  if (rows.empty()) throw ContractError("stack_rows of empty list");
  Shape s = rows.front().shape();
  s.insert(s.begin(), static_cast<int>(rows.size()));
  std::vector<double> d;
  d.reserve(shape_numel(s));
  for (const auto& r : rows) {
    if (r.shape() != rows.front().shape()) throw ContractError("stack_rows shape mismatch");
    d.insert(d.end(), r.vec().begin(), r.vec().end());
  }
  return Tensor(std::move(s), std::move(d));
}

}  // namespace lwd
