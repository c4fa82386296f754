#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "bld/checkpoint.hpp"
#include "bld/corpus.hpp"
#include "bld/nn.hpp"

namespace bld {

/// Training aborted: empty corpus, non-finite loss, or an inconsistent resume.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bookkeeping shared by every trainable model; persisted alongside parameters so runs can resume.
struct TrainingState {
  std::uint64_t seed = 0;
  int epochs_done = 0;
  std::vector<double> loss_curve;  // mean training loss per epoch
  std::vector<double> val_curve;   // held-out metric per epoch
  std::vector<Tensor> optimizer_moments;
  std::int64_t optimizer_steps = 0;

  nlohmann::json to_json() const;
  static TrainingState from_json(const nlohmann::json& j);
  void store(Checkpoint& ck) const;
  static TrainingState load(const Checkpoint& ck);
};

/// Shuffled index order for one epoch, derived from (seed, epoch) only.
std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch);

/// Stacks the selected scene images into an [N,3,H,W] batch.
Tensor gather_images(std::span<const Scene> scenes, std::span<const int> idx);

/// Number of held-out items for a corpus of size n.
int held_out_count(int n, double fraction);

void require_finite(double loss, const std::string& what, int epoch, int step);

/// Random rectangle sides in [ceil(dim/5), floor(dim/2)], placed uniformly inside the frame.
Rect random_rect(std::mt19937_64& rng, int height, int width);

}  // namespace bld
