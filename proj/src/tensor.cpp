#include "robustkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

namespace robustkd {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto d : shape_)
    if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) throw ValidationError("tensor dimensions must be positive, got " + shape_str(shape_));
  if (shape_size(shape_) != data_.size())
    throw ValidationError("tensor shape " + shape_str(shape_) + " does not match " +
                          std::to_string(data_.size()) + " elements");
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, std::vector<double>(values));
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

std::size_t Tensor::row_size() const {
  if (shape_.empty()) return 1;
  return data_.size() / shape_[0];
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin >= end || end > shape_[0])
    throw ValidationError("slice_rows: bad range on shape " + shape_str(shape_));
  Shape s = shape_;
  s[0] = end - begin;
  const auto rs = row_size();
  return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * rs),
                                                  data_.begin() + static_cast<std::ptrdiff_t>(end * rs)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw ValidationError("gather_rows: empty row set");
  Shape s = shape_;
  s[0] = rows.size();
  const auto rs = row_size();
  std::vector<double> out;
  out.reserve(rows.size() * rs);
  for (auto r : rows) {
    if (r >= shape_[0]) throw ValidationError("gather_rows: row out of range");
    out.insert(out.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * rs),
               data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * rs));
  }
  return Tensor(std::move(s), std::move(out));
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  if (other.shape_ != shape_)
    throw ValidationError("tensor add: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Tensor& Tensor::operator*=(double s) {
  for (auto& v : data_) v *= s;
  return *this;
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor stack(std::span<const Tensor> items) {
  if (items.empty()) throw ValidationError("stack: no tensors");
  Shape s{items.size()};
  s.insert(s.end(), items[0].shape().begin(), items[0].shape().end());
  std::vector<double> out;
  out.reserve(shape_size(s));
  for (const auto& t : items) {
    if (t.shape() != items[0].shape()) throw ValidationError("stack: shape mismatch");
    out.insert(out.end(), t.values().begin(), t.values().end());
  }
  return Tensor(std::move(s), std::move(out));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ValidationError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace robustkd
