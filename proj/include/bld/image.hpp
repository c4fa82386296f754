#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "bld/tensor.hpp"

namespace bld {

/// RGB image stored channel-major [C,H,W] with values in [-1,1].
class Image {
 public:
  Image() = default;
  Image(int height, int width, int channels = 3, float fill = 0.0f);
  explicit Image(Tensor chw);

  int height() const { return data_.dim(1); }
  int width() const { return data_.dim(2); }
  int channels() const { return data_.dim(0); }
  bool empty() const { return data_.empty(); }

  float& at(int c, int y, int x) { return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x]; }
  float at(int c, int y, int x) const { return data_[(static_cast<std::size_t>(c) * height() + y) * width() + x]; }

  const Tensor& tensor() const { return data_; }
  Tensor& tensor() { return data_; }
  /// [1,C,H,W] view for network input.
  Tensor batched() const { return data_.reshaped({1, channels(), height(), width()}); }
  static Image from_batch(const Tensor& nchw, int index);

  Image clamped() const;
  friend bool operator==(const Image& a, const Image& b) { return bit_equal(a.data_, b.data_); }

 private:
  Tensor data_;
};

/// Binary H x W mask. Values are exactly 0 or 1.
class Mask {
 public:
  Mask() = default;
  Mask(int height, int width, std::uint8_t fill = 0);

  int height() const { return h_; }
  int width() const { return w_; }
  std::uint8_t operator()(int y, int x) const { return bits_[static_cast<std::size_t>(y) * w_ + x]; }
  void set(int y, int x, bool on) { bits_[static_cast<std::size_t>(y) * w_ + x] = on ? 1 : 0; }
  const std::vector<std::uint8_t>& bits() const { return bits_; }

  std::size_t count() const;
  bool all() const { return count() == bits_.size(); }
  bool none() const { return count() == 0; }
  void fill_rect(int y0, int x0, int h, int w);

  friend bool operator==(const Mask&, const Mask&) = default;

 private:
  int h_ = 0, w_ = 0;
  std::vector<std::uint8_t> bits_;
};

void require_mask_matches(const Image& img, const Mask& m, const char* what);

/// Raised for undecodable or unwritable image files.
class ImageIoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// 8-bit PNG codecs. Pixel v in [-1,1] maps to round((v+1)*127.5).
std::vector<std::uint8_t> encode_png(const Image& img);
std::vector<std::uint8_t> encode_mask_png(const Mask& m);
Image decode_png(const std::vector<std::uint8_t>& bytes);
/// Grayscale mask PNG; pixels > 127 become 1.
Mask decode_mask_png(const std::vector<std::uint8_t>& bytes);

Image read_png(const std::filesystem::path& p);
void write_png(const std::filesystem::path& p, const Image& img);
Mask read_mask_png(const std::filesystem::path& p);
void write_mask_png(const std::filesystem::path& p, const Mask& m);

/// Bilinear resize to a target resolution.
Image resize(const Image& img, int height, int width);
Mask resize_nearest(const Mask& m, int height, int width);

/// Horizontal concatenation; all images must share height and channels.
Image hstack(const std::vector<Image>& images);

std::vector<std::uint8_t> read_file(const std::filesystem::path& p);
void write_file(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes);

/// Mean squared error over pixels where the selector is on (all channels).
double region_mse(const Image& a, const Image& b, const Mask& m, bool inside);

}  // namespace bld
