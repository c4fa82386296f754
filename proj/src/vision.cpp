#include "bld/vision.hpp"

#include <algorithm>

#include "bld/training.hpp"

namespace bld {

Image masked(const Image& img, const Mask& m) {
  require_mask_matches(img, m, "masked");
  Image out(img.height(), img.width(), img.channels());
  for (int c = 0; c < img.channels(); ++c)
    for (int y = 0; y < img.height(); ++y)
      for (int x = 0; x < img.width(); ++x)
        if (m(y, x)) out.at(c, y, x) = img.at(c, y, x);
  return out;
}

Mask rect_mask(const Rect& r, int height, int width) {
  Mask m(height, width);
  m.fill_rect(r.y, r.x, r.h, r.w);
  return m;
}

double bbox_coverage(const Rect& bbox, const Rect& r) {
  if (bbox.area() == 0) return 0.0;
  const int y0 = std::max(bbox.y, r.y), y1 = std::min(bbox.y + bbox.h, r.y + r.h);
  const int x0 = std::max(bbox.x, r.x), x1 = std::min(bbox.x + bbox.w, r.x + r.w);
  if (y1 <= y0 || x1 <= x0) return 0.0;
  return static_cast<double>((y1 - y0) * (x1 - x0)) / bbox.area();
}

MaskedView sample_masked_view(const Scene& s, std::mt19937_64& rng) {
  const int h = s.image.height(), w = s.image.width();
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double pick = unit(rng);
  if (pick < 0.3) return {s.image, s.label};
  if (pick < 0.65 && s.label != Vocabulary::kNone) {
    const auto grow = [&](int lo, int len, int dim, Rect& r, bool vertical) {
      const int before = std::uniform_int_distribution<int>(0, 8)(rng);
      const int after = std::uniform_int_distribution<int>(0, 8)(rng);
      const int a = std::max(0, lo - before), b = std::min(dim, lo + len + after);
      if (vertical) {
        r.y = a;
        r.h = b - a;
      } else {
        r.x = a;
        r.w = b - a;
      }
    };
    Rect r;
    grow(s.bbox.y, s.bbox.h, h, r, true);
    grow(s.bbox.x, s.bbox.w, w, r, false);
    return {masked(s.image, rect_mask(r, h, w)), s.label};
  }
  for (;;) {
    const Rect r = random_rect(rng, h, w);
    const double cov = bbox_coverage(s.bbox, r);
    if (cov >= 0.7) return {masked(s.image, rect_mask(r, h, w)), s.label};
    if (cov <= 0.05) return {masked(s.image, rect_mask(r, h, w)), Vocabulary::kNone};
  }
}

namespace trunk {

void add_params(nn::ParamSet& ps, int hidden, std::mt19937_64& rng) {
  nn::add_conv(ps, "c1", 3, 16, 3, rng);
  nn::add_conv(ps, "c2", 16, 32, 3, rng);
  nn::add_conv(ps, "c3", 32, 64, 3, rng);
  nn::add_conv(ps, "c4", 64, 64, 3, rng);
  nn::add_linear(ps, "fc", 64, hidden, rng);
}

ag::Var features(const nn::ParamSet& ps, const ag::Var& x) {
  ag::Var h = ag::silu(nn::conv(ps, "c1", x, 2));
  h = ag::silu(nn::conv(ps, "c2", h, 2));
  h = ag::silu(nn::conv(ps, "c3", h, 2));
  h = ag::silu(nn::conv(ps, "c4", h));
  return ag::silu(nn::linear(ps, "fc", ag::global_avg_pool(h)));
}

}  // namespace trunk

}  // namespace bld
