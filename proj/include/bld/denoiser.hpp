#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>

#include "bld/autoencoder.hpp"
#include "bld/corpus.hpp"
#include "bld/nn.hpp"
#include "bld/schedule.hpp"
#include "bld/training.hpp"

namespace bld {

/// Raised when a prompt cannot be resolved against the vocabulary.
class UnknownPrompt : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Guiding prompt: a vocabulary label plus the text it came from.
struct Prompt {
  int label = Vocabulary::kNone;
  std::string raw_text;

  static Prompt parse(const std::string& text);
  static Prompt of_label(int label);
  static Prompt unconditional() { return of_label(Vocabulary::kNone); }
  bool is_unconditional() const { return label == Vocabulary::kNone; }
};

/// Identity of a schedule's tables (sampler stride excluded).
std::string schedule_fingerprint(const NoiseSchedule& s);

struct DenoiserArch {
  int latent_channels = 4;
  int latent_size = 16;
  int base_channels = 32;
  int mid_channels = 64;
  int time_dim = 128;
  int groups = 8;
  int num_labels = Vocabulary::kNumClasses + 1;  // last row is the unconditional token

  nlohmann::json to_json() const;
  static DenoiserArch from_json(const nlohmann::json& j);
};

struct DenoiserTrainConfig {
  std::uint64_t seed = 2;
  int epochs = 60;
  int batch_size = 32;
  float learning_rate = 1e-3f;
  float lr_decay = 0.97f;
  float p_uncond = 0.1f;
  double held_out_fraction = 0.1;
  int num_train_steps = 1000;
  std::string beta_schedule = "linear";

  static DenoiserTrainConfig from_json(const nlohmann::json& j);
};

/// Conditional noise predictor eps(z_t, d, t): a two-level UNet with timestep and label embeddings.
class DenoiserModel {
 public:
  static constexpr const char* kCheckpointType = "denoiser";

  DenoiserModel() = default;
  static DenoiserModel initialize(const DenoiserArch& arch, int num_train_steps, BetaSchedule kind, std::uint64_t seed);

  const DenoiserArch& arch() const { return arch_; }
  const std::string& schedule_id() const { return schedule_id_; }
  /// Rebuilds the training schedule recorded in the checkpoint header.
  NoiseSchedule schedule(int num_sampler_steps) const;

  /// Differentiable forward. cond_rows [R,time_dim] are shared rows selected per sample by row_of.
  ag::Var forward(const ag::Var& zt, const ag::Var& cond_rows, const std::vector<int>& row_of) const;
  /// Time + label embedding rows [N,time_dim].
  ag::Var condition(const std::vector<int>& steps, const std::vector<int>& labels) const;

  const nn::ParamSet& params() const { return params_; }
  nn::ParamSet& params() { return params_; }
  const TrainingState& training() const { return training_; }
  TrainingState& training() { return training_; }
  double held_out_initial() const { return held_out_initial_; }
  void set_held_out_initial(double v) { held_out_initial_ = v; }

  Checkpoint to_checkpoint() const;
  static DenoiserModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& p) const;
  static DenoiserModel load(const std::filesystem::path& p);

 private:
  ag::Var res_block(const std::string& name, const ag::Var& x, const ag::Var& cond, const std::vector<int>& row_of) const;

  DenoiserArch arch_;
  nn::ParamSet params_;
  std::string schedule_id_;
  nlohmann::json schedule_spec_;
  double held_out_initial_ = 0.0;
  TrainingState training_;
};

/// Conditional and unconditional predictions for a batch sharing one prompt and step.
struct EpsBranches {
  Tensor cond;
  Tensor uncond;
};

EpsBranches predict_branches(const DenoiserModel& model, const NoiseSchedule& sched, const Tensor& zt, const Prompt& d,
                             int t);

/// Classifier-free guided prediction eps_u + s (eps_c - eps_u); s = 1 returns eps_c and s = 0 returns eps_u exactly.
Tensor predict_eps(const DenoiserModel& model, const NoiseSchedule& sched, const Tensor& zt, const Prompt& d, int t,
                   float guidance_scale);

DenoiserModel train_denoiser(const VaeModel& vae, std::span<const Scene> corpus, const DenoiserTrainConfig& cfg,
                             const DenoiserArch& arch = {}, const DenoiserModel* resume = nullptr);

/// Held-out epsilon-prediction MSE with noise and steps fixed by seed.
double held_out_eps_mse(const DenoiserModel& model, const NoiseSchedule& sched, const Tensor& latents,
                        const std::vector<int>& labels, std::uint64_t seed);

}  // namespace bld
