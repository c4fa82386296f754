#include "bld/corpus.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <random>

#include <nlohmann/json.hpp>

namespace bld {

namespace {

constexpr std::array<const char*, Vocabulary::kShapes> kShapeNames{"circle", "square", "triangle"};
constexpr std::array<const char*, Vocabulary::kColors> kColorNames{"red", "green", "blue"};
constexpr std::array<std::array<float, 3>, Vocabulary::kColors> kPalette{{
    {0.9f, -0.8f, -0.8f},
    {-0.8f, 0.8f, -0.8f},
    {-0.8f, -0.8f, 0.9f},
}};

bool inside_shape(int shape, float dy, float dx, float r) {
  switch (shape) {
    case 0:
      return dy * dy + dx * dx <= r * r;
    case 1:
      return std::fabs(dy) <= 0.85f * r && std::fabs(dx) <= 0.85f * r;
    default: {
      // upward-pointing triangle, apex at -r, base at +0.8r
      if (dy < -r || dy > 0.8f * r) return false;
      return std::fabs(dx) <= (dy + r) / (1.8f * r) * r;
    }
  }
}

float coverage(int shape, int y, int x, int cy, int cx, int radius) {
  int hits = 0;
  for (int sy = 0; sy < 4; ++sy)
    for (int sx = 0; sx < 4; ++sx) {
      const float py = static_cast<float>(y) + (sy + 0.5f) / 4.0f - 0.5f;
      const float px = static_cast<float>(x) + (sx + 0.5f) / 4.0f - 0.5f;
      hits += inside_shape(shape, py - static_cast<float>(cy), px - static_cast<float>(cx), static_cast<float>(radius));
    }
  return static_cast<float>(hits) / 16.0f;
}

std::string normalize(const std::string& text) {
  std::string out;
  bool space = false;
  for (char ch : text) {
    const unsigned char c = static_cast<unsigned char>(ch);
    if (std::isalnum(c)) {
      if (space && !out.empty()) out += ' ';
      space = false;
      out += static_cast<char>(std::tolower(c));
    } else {
      space = true;
    }
  }
  return out;
}

}  // namespace

const std::vector<std::string>& Vocabulary::names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> v;
    for (const char* s : kShapeNames)
      for (const char* c : kColorNames) v.push_back(std::string(c) + " " + s);
    return v;
  }();
  return names;
}

const std::string& Vocabulary::name(int label) {
  static const std::string none = "unconditional";
  if (label == kNone) return none;
  return names().at(static_cast<std::size_t>(label));
}

std::optional<int> Vocabulary::lookup(const std::string& text) {
  const std::string t = normalize(text);
  if (t.empty() || t == "unconditional" || t == "none") return kNone;
  const auto& n = names();
  const auto it = std::find(n.begin(), n.end(), t);
  if (it == n.end()) return std::nullopt;
  return static_cast<int>(it - n.begin());
}

Image render_background(std::uint64_t seed, int size) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> muted(-0.45f, 0.45f);
  std::uniform_real_distribution<float> unit(0.0f, 1.0f);
  std::array<float, 3> c0{}, c1{};
  for (int c = 0; c < 3; ++c) {
    c0[static_cast<std::size_t>(c)] = muted(rng);
    c1[static_cast<std::size_t>(c)] = muted(rng);
  }
  const float angle = unit(rng) * 6.2831853f;
  const float freq = 0.12f + 0.2f * unit(rng);
  const float tex_angle = unit(rng) * 6.2831853f;
  const float phase = unit(rng) * 6.2831853f;
  const float amp = 0.06f + 0.1f * unit(rng);
  Image img(size, size, 3);
  const float gy = std::sin(angle), gx = std::cos(angle);
  const float ty = std::sin(tex_angle), tx = std::cos(tex_angle);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const float u = std::clamp(0.5f + ((y - size / 2.0f) * gy + (x - size / 2.0f) * gx) / size, 0.0f, 1.0f);
      const float tex = amp * std::sin(freq * (y * ty + x * tx) + phase);
      for (int c = 0; c < 3; ++c) {
        const auto ci = static_cast<std::size_t>(c);
        img.at(c, y, x) = std::clamp(c0[ci] * (1 - u) + c1[ci] * u + tex, -1.0f, 1.0f);
      }
    }
  return img;
}

Rect draw_shape(Image& img, int label, int cy, int cx, int radius) {
  const int shape = Vocabulary::shape_of(label);
  const auto& col = kPalette[static_cast<std::size_t>(Vocabulary::color_of(label))];
  int y0 = img.height(), x0 = img.width(), y1 = -1, x1 = -1;
  for (int y = std::max(0, cy - radius - 1); y <= std::min(img.height() - 1, cy + radius + 1); ++y)
    for (int x = std::max(0, cx - radius - 1); x <= std::min(img.width() - 1, cx + radius + 1); ++x) {
      const float a = coverage(shape, y, x, cy, cx, radius);
      if (a <= 0.0f) continue;
      for (int c = 0; c < 3; ++c) img.at(c, y, x) = img.at(c, y, x) * (1 - a) + col[static_cast<std::size_t>(c)] * a;
      y0 = std::min(y0, y);
      x0 = std::min(x0, x);
      y1 = std::max(y1, y);
      x1 = std::max(x1, x);
    }
  if (y1 < 0) return {};
  return {y0, x0, y1 - y0 + 1, x1 - x0 + 1};
}

Mask shape_mask(int label, int cy, int cx, int radius, int height, int width) {
  Mask m(height, width);
  const int shape = Vocabulary::shape_of(label);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) m.set(y, x, coverage(shape, y, x, cy, cx, radius) >= 0.5f);
  return m;
}

Scene make_scene(std::uint64_t seed, int label, const SceneOptions& opt) {
  std::mt19937_64 rng(seed);
  Scene s;
  s.seed = seed;
  s.image = render_background(rng(), opt.size);
  s.label = label >= 0 ? label : std::uniform_int_distribution<int>(0, Vocabulary::kNumClasses - 1)(rng);
  const int r = std::uniform_int_distribution<int>(opt.min_radius, opt.max_radius)(rng);
  std::uniform_int_distribution<int> pos(r + 1, opt.size - r - 2);
  const int cy = pos(rng);
  const int cx = pos(rng);
  s.bbox = draw_shape(s.image, s.label, cy, cx, r);
  return s;
}

std::vector<Scene> make_corpus(int count, std::uint64_t seed, const SceneOptions& opt) {
  std::vector<Scene> out;
  out.reserve(static_cast<std::size_t>(std::max(count, 0)));
  for (int i = 0; i < count; ++i) out.push_back(make_scene(mix_seed(seed, static_cast<std::uint64_t>(i)), -1, opt));
  return out;
}

std::string write_corpus(const std::filesystem::path& dir, const std::vector<Scene>& scenes, std::uint64_t seed) {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["format"] = "bld-corpus-1";
  manifest["seed"] = seed;
  manifest["classes"] = Vocabulary::names();
  manifest["items"] = nlohmann::json::array();
  for (std::size_t i = 0; i < scenes.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "scene_%05zu.png", i);
    const auto bytes = encode_png(scenes[i].image);
    write_file(dir / name, bytes);
    const Scene& s = scenes[i];
    manifest["items"].push_back({{"file", name},
                                 {"label", s.label},
                                 {"class", Vocabulary::name(s.label)},
                                 {"bbox", {s.bbox.y, s.bbox.x, s.bbox.h, s.bbox.w}},
                                 {"seed", s.seed}});
  }
  const std::string text = manifest.dump(2) + "\n";
  write_file(dir / "manifest.json", std::vector<std::uint8_t>(text.begin(), text.end()));
  return text;
}

std::vector<Scene> read_corpus(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  if (!std::filesystem::exists(path)) throw ImageIoError("corpus manifest missing: " + path.string());
  const auto bytes = read_file(path);
  const auto manifest = nlohmann::json::parse(bytes.begin(), bytes.end());
  std::vector<Scene> out;
  for (const auto& item : manifest.at("items")) {
    Scene s;
    s.image = read_png(dir / item.at("file").get<std::string>());
    s.label = item.at("label").get<int>();
    const auto& b = item.at("bbox");
    s.bbox = {b[0].get<int>(), b[1].get<int>(), b[2].get<int>(), b[3].get<int>()};
    s.seed = item.value("seed", std::uint64_t{0});
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace bld
