#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>

#include "bld/autograd.hpp"
#include "bld/corpus.hpp"
#include "bld/image.hpp"
#include "bld/nn.hpp"
#include "bld/training.hpp"

namespace bld {

/// Latent activation grid [c, H/f, W/f] together with the downsampling factor that produced it.
struct Latent {
  Tensor data;
  int factor = 4;

  int channels() const { return data.dim(0); }
  int height() const { return data.dim(1); }
  int width() const { return data.dim(2); }
  Tensor batched() const { return data.reshaped({1, channels(), height(), width()}); }
  static Latent from_batch(const Tensor& nchw, int index, int factor);
  friend bool operator==(const Latent& a, const Latent& b) { return a.factor == b.factor && bit_equal(a.data, b.data); }
};

struct VaeArch {
  int image_size = 64;
  int latent_channels = 4;
  int factor = 4;  // fixed by the two stride-2 stages
  int width = 32;  // channels at half resolution; doubled at latent resolution

  nlohmann::json to_json() const;
  static VaeArch from_json(const nlohmann::json& j);
};

struct VaeTrainConfig {
  std::uint64_t seed = 1;
  int epochs = 12;
  int batch_size = 16;
  float learning_rate = 2e-3f;
  float kl_weight = 1e-4f;
  float lr_decay = 0.75f;  // per-epoch multiplier
  double held_out_fraction = 0.1;

  static VaeTrainConfig from_json(const nlohmann::json& j);
};

/// KL-regularised convolutional autoencoder E(x), D(z).
class VaeModel {
 public:
  static constexpr const char* kCheckpointType = "vae";

  VaeModel() = default;
  static VaeModel initialize(const VaeArch& arch, std::uint64_t seed);

  const VaeArch& arch() const { return arch_; }

  /// Posterior mean when seed is absent, otherwise mean + sigma * eps with eps seeded.
  Latent encode(const Image& x, std::optional<std::uint64_t> seed = std::nullopt) const;
  /// Full-resolution image clamped to [-1,1].
  Image decode(const Latent& z) const;

  /// Batched posterior means, already multiplied by latent_scale.
  Tensor encode_mean_batch(const Tensor& images) const;
  Tensor decode_batch(const Tensor& latents) const;

  /// Differentiable decoder output (unclamped) using an explicit decoder parameter set.
  ag::Var decode_with(const nn::ParamSet& decoder, const ag::Var& z) const;
  /// Differentiable encoder producing (mean, logvar) before latent scaling.
  std::pair<ag::Var, ag::Var> encode_with(const nn::ParamSet& encoder, const ag::Var& x) const;

  const nn::ParamSet& encoder_params() const { return encoder_; }
  const nn::ParamSet& decoder_params() const { return decoder_; }
  nn::ParamSet& encoder_params() { return encoder_; }
  nn::ParamSet& decoder_params() { return decoder_; }

  /// Multiplier applied to encoder means so latents have roughly unit variance.
  float latent_scale() const { return latent_scale_; }
  double held_out_mse() const { return held_out_mse_; }
  const TrainingState& training() const { return training_; }
  TrainingState& training() { return training_; }
  void set_latent_scale(float s) { latent_scale_ = s; }
  void set_held_out_mse(double v) { held_out_mse_ = v; }

  Checkpoint to_checkpoint() const;
  static VaeModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& p) const;
  static VaeModel load(const std::filesystem::path& p);

 private:
  void check_image(const Image& x) const;
  void check_latent(const Tensor& z) const;

  VaeArch arch_;
  nn::ParamSet encoder_, decoder_;
  float latent_scale_ = 1.0f;
  double held_out_mse_ = 0.0;
  TrainingState training_;
};

/// Trains (or resumes) a VAE. The last held_out_fraction of the corpus is never trained on.
VaeModel train_vae(std::span<const Scene> corpus, const VaeTrainConfig& cfg, const VaeArch& arch = {},
                   const VaeModel* resume = nullptr);

/// Mean per-pixel reconstruction error through the posterior mean.
double reconstruction_mse(const VaeModel& vae, std::span<const Scene> scenes);

}  // namespace bld
