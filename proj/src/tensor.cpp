#include "bld/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace bld {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) {
    if (d < 0) throw ShapeError("negative dimension in " + shape_str(s));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, float fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<float> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_numel(shape_)) {
    throw ShapeError("value count " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

Tensor Tensor::batch_slice(int begin, int count) const {
  if (shape_.empty() || begin < 0 || count < 0 || begin + count > shape_[0]) {
    throw ShapeError("batch slice out of range for " + shape_str(shape_));
  }
  Shape s = shape_;
  s[0] = count;
  const std::size_t per = shape_[0] ? data_.size() / static_cast<std::size_t>(shape_[0]) : 0;
  Tensor t(s);
  std::memcpy(t.data(), data_.data() + per * static_cast<std::size_t>(begin), per * static_cast<std::size_t>(count) * sizeof(float));
  return t;
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::stack(std::span<const Tensor> items) {
  if (items.empty()) throw ShapeError("stack of zero tensors");
  const Shape& first = items[0].shape();
  if (first.empty()) throw ShapeError("stack of rank-0 tensors");
  Shape s = first;
  int total = 0;
  for (const auto& t : items) {
    if (t.rank() != static_cast<int>(first.size()) || !std::equal(first.begin() + 1, first.end(), t.shape().begin() + 1)) {
      throw ShapeError("stack: mismatched shapes " + shape_str(first) + " vs " + shape_str(t.shape()));
    }
    total += t.dim(0);
  }
  s[0] = total;
  Tensor out(s);
  std::size_t off = 0;
  for (const auto& t : items) {
    std::memcpy(out.data() + off, t.data(), t.size() * sizeof(float));
    off += t.size();
  }
  return out;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "max_abs_diff");
  float m = 0.0f;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.same_shape(b) && (a.size() == 0 || std::memcmp(a.data(), b.data(), a.size() * sizeof(float)) == 0);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the combined words
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace bld
