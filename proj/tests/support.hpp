#pragma once

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "bld/autoencoder.hpp"
#include "bld/denoiser.hpp"
#include "bld/image.hpp"

namespace bld::test {

inline Tensor random_tensor(Shape shape, std::uint64_t seed, float scale = 1.0f) {
  std::mt19937_64 rng(seed);
  Tensor t = Tensor::randn(std::move(shape), rng);
  for (float& v : t.values()) v *= scale;
  return t;
}

inline Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  Image img(h, w);
  for (float& v : img.tensor().values()) v = u(rng);
  return img;
}

inline Mask random_mask_bits(int h, int w, std::uint64_t seed, double p = 0.5) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution on(p);
  Mask m(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) m.set(y, x, on(rng));
  return m;
}

/// Untrained models at small width; enough for every structural property.
inline VaeModel tiny_vae(int image_size = 32, std::uint64_t seed = 11) {
  VaeArch a;
  a.image_size = image_size;
  a.width = 8;
  return VaeModel::initialize(a, seed);
}

inline DenoiserModel tiny_denoiser(int latent_size = 8, std::uint64_t seed = 12) {
  DenoiserArch a;
  a.latent_size = latent_size;
  a.base_channels = 8;
  a.mid_channels = 16;
  a.time_dim = 16;
  a.groups = 4;
  return DenoiserModel::initialize(a, 1000, BetaSchedule::linear, seed);
}

/// Fresh scratch directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / (tag + "-" + std::to_string(rd()) + std::to_string(rd()));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Directory of trained checkpoints provided by the training fixture, empty when not configured.
inline std::filesystem::path trained_model_dir() {
  const char* v = std::getenv("BLD_TEST_MODELS");
  return v ? std::filesystem::path(v) : std::filesystem::path();
}

}  // namespace bld::test
