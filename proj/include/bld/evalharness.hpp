#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "bld/checkpoint.hpp"
#include "bld/corpus.hpp"
#include "bld/pipeline.hpp"
#include "bld/training.hpp"

namespace bld {

struct ClassifierTrainConfig {
  std::uint64_t seed = 4;
  int epochs = 20;
  int batch_size = 32;
  float learning_rate = 3e-3f;
  float lr_decay = 0.9f;
  int hidden = 64;
  double held_out_fraction = 0.1;

  static ClassifierTrainConfig from_json(const nlohmann::json& j);
};

/// Evaluation classifier over the class vocabulary plus "no object" (index kNone).
class ClassifierModel {
 public:
  static constexpr const char* kCheckpointType = "classifier";

  ClassifierModel() = default;
  static ClassifierModel initialize(int hidden, std::uint64_t seed);

  ag::Var logits(const ag::Var& x) const;
  /// Penultimate features [N,hidden].
  Tensor features(const Tensor& nchw) const;
  std::vector<int> predict(const Tensor& nchw) const;
  int predict(const Image& img) const;

  const nn::ParamSet& params() const { return params_; }
  nn::ParamSet& params() { return params_; }
  TrainingState& training() { return training_; }
  const TrainingState& training() const { return training_; }
  double held_out_accuracy() const { return held_out_accuracy_; }

  Checkpoint to_checkpoint() const;
  static ClassifierModel from_checkpoint(const Checkpoint& ck);
  void save(const std::filesystem::path& p) const;
  static ClassifierModel load(const std::filesystem::path& p);

 private:
  friend ClassifierModel train_classifier(std::span<const Scene>, const ClassifierTrainConfig&, const ClassifierModel*);
  int hidden_ = 0;
  nn::ParamSet params_;
  double held_out_accuracy_ = 0.0;
  TrainingState training_;
};

ClassifierModel train_classifier(std::span<const Scene> corpus, const ClassifierTrainConfig& cfg,
                                 const ClassifierModel* resume = nullptr);

/// Axis-aligned box with sides drawn from [ceil(dim/5), floor(dim/2)], placed uniformly.
Mask random_mask(std::uint64_t seed, int height, int width);
Rect random_mask_rect(std::uint64_t seed, int height, int width);

struct EvalCase {
  std::string image_id;
  Rect mask;
  int target = 0;
  std::vector<int> verdicts;        // classifier label per prediction
  std::vector<double> scores;       // ranker score per prediction
  std::vector<int> ranking;         // prediction indices, best first
  std::vector<std::vector<float>> features;  // unit-normalized classifier features per prediction

  int batch_size() const { return static_cast<int>(verdicts.size()); }
  int correct() const;
};

double batch_precision(std::span<const EvalCase> cases);
double best_result_precision(std::span<const EvalCase> cases);

struct Diversity {
  double value = 0.0;
  bool insufficient = false;  // fewer than two correct predictions
};
/// Mean pairwise L2 distance between features of correctly classified predictions.
Diversity batch_diversity(const EvalCase& c);

struct EvalReport {
  std::uint64_t seed = 0;
  double batch_precision = 0.0;
  double best_result_precision = 0.0;
  double batch_diversity = 0.0;  // mean over cases with at least two correct predictions
  int diversity_cases = 0;
  std::vector<EvalCase> cases;

  nlohmann::json to_json() const;
  std::string to_csv() const;
  void write(const std::filesystem::path& dir) const;  // report.json and report.csv
};

/// Scores an already generated case: classifies the masked predictions and fills features.
void judge_case(const ClassifierModel& cls, EvalCase& c, const std::vector<Image>& predictions, const Mask& m);

/// Random scene, random mask, random target class per case; every draw derives from seed.
EvalReport run_eval(const ModelBundle& models, const ClassifierModel& cls, int n_cases, std::uint64_t seed,
                    const EditConfig& cfg);

}  // namespace bld
