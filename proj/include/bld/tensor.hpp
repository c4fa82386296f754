#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace bld {

/// Thrown when tensors with incompatible shapes meet.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);

/// Dense row-major float32 array. Image-like tensors use NCHW order.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::vector<float>& storage() { return data_; }
  const std::vector<float>& storage() const { return data_; }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// Element (n, c, y, x) of a rank-4 tensor.
  float& at(int n, int c, int y, int x) {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }
  float at(int n, int c, int y, int x) const {
    return data_[((static_cast<std::size_t>(n) * shape_[1] + c) * shape_[2] + y) * shape_[3] + x];
  }

  Tensor reshaped(Shape shape) const;
  void fill(float v);
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// Slice [begin, begin+count) along the leading (batch) axis.
  Tensor batch_slice(int begin, int count = 1) const;

  static Tensor randn(Shape shape, std::mt19937_64& rng);
  static Tensor stack(std::span<const Tensor> items);

 private:
  Shape shape_;
  std::vector<float> data_;
};

std::size_t shape_numel(const Shape& s);
void require_same_shape(const Tensor& a, const Tensor& b, const char* what);

float max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_equal(const Tensor& a, const Tensor& b);

/// Seed mixing used to derive independent RNG streams from (seed, stream) pairs.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace bld
