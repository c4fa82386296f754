#include "bld/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <numeric>

namespace bld {

Image::Image(int height, int width, int channels, float fill) : data_({channels, height, width}, fill) {}

Image::Image(Tensor chw) : data_(std::move(chw)) {
  if (data_.rank() != 3) throw ShapeError("Image expects a [C,H,W] tensor, got " + shape_str(data_.shape()));
}

Image Image::from_batch(const Tensor& nchw, int index) {
  Tensor one = nchw.batch_slice(index);
  return Image(one.reshaped({nchw.dim(1), nchw.dim(2), nchw.dim(3)}));
}

Image Image::clamped() const {
  Image out = *this;
  for (auto& v : out.data_.values()) v = std::clamp(v, -1.0f, 1.0f);
  return out;
}

Mask::Mask(int height, int width, std::uint8_t fill)
    : h_(height), w_(width), bits_(static_cast<std::size_t>(height) * width, fill ? 1 : 0) {}

std::size_t Mask::count() const { return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), 1)); }

void Mask::fill_rect(int y0, int x0, int h, int w) {
  for (int y = std::max(0, y0); y < std::min(h_, y0 + h); ++y)
    for (int x = std::max(0, x0); x < std::min(w_, x0 + w); ++x) set(y, x, true);
}

void require_mask_matches(const Image& img, const Mask& m, const char* what) {
  if (img.height() != m.height() || img.width() != m.width()) {
    throw ShapeError(std::string(what) + ": mask " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                     " does not match image " + std::to_string(img.height()) + "x" + std::to_string(img.width()));
  }
}

namespace {

std::uint8_t to_byte(float v) {
  const float s = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(std::clamp(s, 0.0f, 255.0f));
}

std::vector<std::uint8_t> write_png_memory(const std::vector<std::uint8_t>& pixels, int w, int h, png_uint_32 format) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(w);
  image.height = static_cast<png_uint_32>(h);
  image.format = format;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&image, nullptr, &size, 0, pixels.data(), 0, nullptr)) {
    throw ImageIoError(std::string("png encode failed: ") + image.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&image, out.data(), &size, 0, pixels.data(), 0, nullptr)) {
    throw ImageIoError(std::string("png encode failed: ") + image.message);
  }
  out.resize(size);
  return out;
}

std::vector<std::uint8_t> read_png_memory(const std::vector<std::uint8_t>& bytes, png_uint_32 format, int& w, int& h) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (bytes.empty() || !png_image_begin_read_from_memory(&image, bytes.data(), bytes.size())) {
    throw ImageIoError(std::string("png decode failed: ") + (bytes.empty() ? "empty input" : image.message));
  }
  image.format = format;
  std::vector<std::uint8_t> pixels(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, pixels.data(), 0, nullptr)) {
    png_image_free(&image);
    throw ImageIoError(std::string("png decode failed: ") + image.message);
  }
  w = static_cast<int>(image.width);
  h = static_cast<int>(image.height);
  return pixels;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const Image& img) {
  if (img.channels() != 3) throw ImageIoError("encode_png expects 3 channels");
  const int h = img.height(), w = img.width();
  std::vector<std::uint8_t> px(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) px[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_byte(img.at(c, y, x));
  return write_png_memory(px, w, h, PNG_FORMAT_RGB);
}

std::vector<std::uint8_t> encode_mask_png(const Mask& m) {
  std::vector<std::uint8_t> px(m.bits().size());
  std::transform(m.bits().begin(), m.bits().end(), px.begin(), [](std::uint8_t b) { return b ? 255 : 0; });
  return write_png_memory(px, m.width(), m.height(), PNG_FORMAT_GRAY);
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  int w = 0, h = 0;
  const auto px = read_png_memory(bytes, PNG_FORMAT_RGB, w, h);
  Image img(h, w, 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = px[(static_cast<std::size_t>(y) * w + x) * 3 + c] / 127.5f - 1.0f;
  return img;
}

Mask decode_mask_png(const std::vector<std::uint8_t>& bytes) {
  int w = 0, h = 0;
  const auto px = read_png_memory(bytes, PNG_FORMAT_GRAY, w, h);
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(y, x, px[static_cast<std::size_t>(y) * w + x] > 127);
  return m;
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw ImageIoError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& p, const std::vector<std::uint8_t>& bytes) {
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageIoError("cannot write " + p.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageIoError("write failed for " + p.string());
}

Image read_png(const std::filesystem::path& p) { return decode_png(read_file(p)); }
void write_png(const std::filesystem::path& p, const Image& img) { write_file(p, encode_png(img)); }
Mask read_mask_png(const std::filesystem::path& p) { return decode_mask_png(read_file(p)); }
void write_mask_png(const std::filesystem::path& p, const Mask& m) { write_file(p, encode_mask_png(m)); }

Image resize(const Image& img, int height, int width) {
  if (img.height() == height && img.width() == width) return img;
  Image out(height, width, img.channels());
  const float sy = static_cast<float>(img.height()) / height;
  const float sx = static_cast<float>(img.width()) / width;
  for (int y = 0; y < height; ++y) {
    const float fy = std::clamp((y + 0.5f) * sy - 0.5f, 0.0f, static_cast<float>(img.height() - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, img.height() - 1);
    const float ty = fy - y0;
    for (int x = 0; x < width; ++x) {
      const float fx = std::clamp((x + 0.5f) * sx - 0.5f, 0.0f, static_cast<float>(img.width() - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, img.width() - 1);
      const float tx = fx - x0;
      for (int c = 0; c < img.channels(); ++c) {
        const float top = img.at(c, y0, x0) * (1 - tx) + img.at(c, y0, x1) * tx;
        const float bot = img.at(c, y1, x0) * (1 - tx) + img.at(c, y1, x1) * tx;
        out.at(c, y, x) = top * (1 - ty) + bot * ty;
      }
    }
  }
  return out;
}

Mask resize_nearest(const Mask& m, int height, int width) {
  if (m.height() == height && m.width() == width) return m;
  Mask out(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) out.set(y, x, m(y * m.height() / height, x * m.width() / width));
  return out;
}

Image hstack(const std::vector<Image>& images) {
  if (images.empty()) throw std::invalid_argument("hstack of zero images");
  const int h = images[0].height(), c = images[0].channels();
  int total = 0;
  for (const auto& im : images) {
    if (im.height() != h || im.channels() != c) throw ShapeError("hstack: images differ in height or channels");
    total += im.width();
  }
  Image out(h, total, c);
  int off = 0;
  for (const auto& im : images) {
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int x = 0; x < im.width(); ++x) out.at(ch, y, off + x) = im.at(ch, y, x);
    off += im.width();
  }
  return out;
}

double region_mse(const Image& a, const Image& b, const Mask& m, bool inside) {
  require_same_shape(a.tensor(), b.tensor(), "region_mse");
  require_mask_matches(a, m, "region_mse");
  double s = 0.0;
  std::size_t n = 0;
  for (int y = 0; y < a.height(); ++y)
    for (int x = 0; x < a.width(); ++x) {
      if ((m(y, x) != 0) != inside) continue;
      for (int c = 0; c < a.channels(); ++c) {
        const double d = a.at(c, y, x) - b.at(c, y, x);
        s += d * d;
      }
      n += static_cast<std::size_t>(a.channels());
    }
  return n ? s / static_cast<double>(n) : 0.0;
}

}  // namespace bld
