#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "bld/image.hpp"

namespace bld {

/// Class vocabulary of the toy scene corpus; each class name doubles as a text prompt.
class Vocabulary {
 public:
  static constexpr int kShapes = 3;
  static constexpr int kColors = 3;
  static constexpr int kNumClasses = kShapes * kColors;
  /// Index reserved for "no class" (unconditional prompt, background-only crops).
  static constexpr int kNone = kNumClasses;

  static const std::vector<std::string>& names();
  static const std::string& name(int label);
  /// Resolves free text ("red circle", "Red_Circle") to a label; empty/"unconditional" -> kNone.
  static std::optional<int> lookup(const std::string& text);
  static int shape_of(int label) { return label / kColors; }
  static int color_of(int label) { return label % kColors; }
};

struct Rect {
  int y = 0, x = 0, h = 0, w = 0;
  int area() const { return h * w; }
  bool contains(int py, int px) const { return py >= y && py < y + h && px >= x && px < x + w; }
};

struct Scene {
  Image image;
  int label = Vocabulary::kNone;
  Rect bbox;  // tight box around the shape (empty when label == kNone)
  std::uint64_t seed = 0;
};

struct SceneOptions {
  int size = 64;
  int min_radius = 4;
  int max_radius = 10;
};

/// Textured background without any shape.
Image render_background(std::uint64_t seed, int size = 64);
/// Draws the class shape centred at (cy, cx) with the given radius onto img.
Rect draw_shape(Image& img, int label, int cy, int cx, int radius);
/// Draws the class shape into img and returns the per-pixel coverage mask of the shape.
Mask shape_mask(int label, int cy, int cx, int radius, int height, int width);

/// Deterministic scene: background plus one shape. label < 0 picks a random class.
Scene make_scene(std::uint64_t seed, int label = -1, const SceneOptions& opt = {});

std::vector<Scene> make_corpus(int count, std::uint64_t seed, const SceneOptions& opt = {});

/// Writes scene_NNNNN.png files plus manifest.json; returns the manifest text.
std::string write_corpus(const std::filesystem::path& dir, const std::vector<Scene>& scenes, std::uint64_t seed);
std::vector<Scene> read_corpus(const std::filesystem::path& dir);

}  // namespace bld
