#include "wmlab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "wmlab/errors.hpp"

namespace wmlab {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (auto e : shape_)
    if (e == 0) throw ArgumentError("tensor extents must be positive: " + shape_str(shape_));
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto e : shape_)
    if (e == 0) throw ArgumentError("tensor extents must be positive: " + shape_str(shape_));
  if (shape_size(shape_) != data_.size())
    throw ArgumentError("tensor data length " + std::to_string(data_.size()) + " does not match shape " +
                        shape_str(shape_));
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != size())
    throw ArgumentError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin >= end || end > shape_[0]) throw ArgumentError("slice_rows: bad range");
  const std::size_t rs = row_size();
  Shape s = shape_;
  s[0] = end - begin;
  return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * rs),
                                                  data_.begin() + static_cast<std::ptrdiff_t>(end * rs)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  if (rows.empty()) throw ArgumentError("gather_rows: empty selection");
  const std::size_t rs = row_size();
  Shape s = shape_;
  s[0] = rows.size();
  std::vector<double> out(rows.size() * rs);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= shape_[0]) throw ArgumentError("gather_rows: index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[i] * rs), rs,
                out.begin() + static_cast<std::ptrdiff_t>(i * rs));
  }
  return Tensor(std::move(s), std::move(out));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1))
    throw ArgumentError("concat_rows: trailing shapes differ " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
  Shape s = a.shape();
  s[0] += b.dim(0);
  std::vector<double> d;
  d.reserve(a.size() + b.size());
  d.insert(d.end(), a.storage().begin(), a.storage().end());
  d.insert(d.end(), b.storage().begin(), b.storage().end());
  return Tensor(std::move(s), std::move(d));
}

}  // namespace wmlab
