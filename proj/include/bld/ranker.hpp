#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "bld/checkpoint.hpp"
#include "bld/denoiser.hpp"
#include "bld/image.hpp"
#include "bld/nn.hpp"
#include "bld/training.hpp"

namespace bld {

struct EmbedderTrainConfig {
  std::uint64_t seed = 3;
  int epochs = 15;
  int batch_size = 32;
  float learning_rate = 3e-3f;
  float lr_decay = 0.9f;
  float temperature = 0.1f;
  int embed_dim = 32;
  int hidden = 64;
  double held_out_fraction = 0.1;

  static EmbedderTrainConfig from_json(const nlohmann::json& j);
};

/// Joint image/label embedder trained contrastively; label row kNone stands for "no object".
class EmbedderModel {
 public:
  static constexpr const char* kCheckpointType = "embedder";

  EmbedderModel() = default;
  static EmbedderModel initialize(int embed_dim, int hidden, std::uint64_t seed);

  int embed_dim() const { return embed_dim_; }
  /// Unnormalized image embeddings [N,embed_dim] for an [N,3,H,W] batch.
  Tensor embed_images(const Tensor& nchw) const;
  /// Unnormalized prompt embedding [embed_dim].
  Tensor embed_prompt(const Prompt& d) const;
  ag::Var logits(const ag::Var& x, float temperature) const;

  const nn::ParamSet& params() const { return params_; }
  nn::ParamSet& params() { return params_; }
  TrainingState& training() { return training_; }
  const TrainingState& training() const { return training_; }
  double held_out_accuracy() const { return held_out_accuracy_; }
  void set_held_out_accuracy(double v) { held_out_accuracy_ = v; }

  Checkpoint to_checkpoint() const;
  static EmbedderModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& p) const;
  static EmbedderModel load(const std::filesystem::path& p);

 private:
  int embed_dim_ = 0;
  int hidden_ = 0;
  nn::ParamSet params_;
  double held_out_accuracy_ = 0.0;
  TrainingState training_;
};

EmbedderModel train_embedder(std::span<const Scene> corpus, const EmbedderTrainConfig& cfg,
                             const EmbedderModel* resume = nullptr);

double cosine_similarity(std::span<const float> a, std::span<const float> b);

/// Cosine between the masked image's embedding and the prompt's embedding.
double score(const EmbedderModel& emb, const Image& image, const Mask& m, const Prompt& d);

struct Ranking {
  std::vector<int> order;      // best first
  std::vector<double> scores;  // by original index
};

/// Orders rows of image_embeddings [N,D] by descending cosine to prompt_embedding; ties keep input order.
Ranking rank_embeddings(const Tensor& image_embeddings, std::span<const float> prompt_embedding);

Ranking rank_batch(const EmbedderModel& emb, const std::vector<Image>& batch, const Mask& m, const Prompt& d);

}  // namespace bld
