#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "bld/autoencoder.hpp"
#include "bld/denoiser.hpp"
#include "bld/reconstruct.hpp"
#include "bld/schedule.hpp"

namespace bld {

/// Average-pools factor x factor blocks; a cell is set when at least half the block is.
Mask downsample_mask(const Mask& m, int factor);

/// Binary dilation with a kernel x kernel block of ones. Cells past the border count as unset.
Mask dilate(const Mask& m, int kernel);

/// Per-step latent masks for the sampling loop, coarse to fine.
struct MaskPyramid {
  static constexpr int kPhases = 4;
  static constexpr int kKernels[kPhases] = {7, 5, 3, 1};

  std::vector<Mask> step_masks;  // one per sampler position
  std::vector<int> phase_sizes;  // steps in each phase; empty for a constant pyramid
  bool fallback = false;         // true when too few steps forced the plain mask everywhere

  const Mask& at(std::size_t position) const { return step_masks.at(position); }
  std::size_t size() const { return step_masks.size(); }
};

/// Four near-equal phases (earlier phases take the remainder) dilated by 7, 5, 3 and 1.
MaskPyramid build_mask_pyramid(const Mask& latent_mask, int num_steps);
/// The same mask at every step.
MaskPyramid constant_pyramid(const Mask& latent_mask, int num_steps);

struct EditConfig {
  int num_sampler_steps = 50;
  float guidance_scale = 3.0f;
  bool progressive_shrinking = true;
  int batch_size = 8;
  std::uint64_t seed = 0;
  float eta = 0.0f;  // 0 is deterministic DDIM, 1 is ancestral sampling
  float latent_clip = 0.0f;  // clamp each clean-latent estimate to [-clip, clip]; 0 disables
  bool keep_snapshots = false;
  long max_step_budget = 24L * 100L;  // cap on batch_size * num_sampler_steps
  ReconstructionConfig reconstruction{.mode = ReconstructionMode::none};

  void validate(const NoiseSchedule& sched) const;

  /// Keys: batch, steps, seed, guidance, shrink, reconstruct, eta, clip, snapshots, budget, lambda, lr, opt_steps,
  /// foreground_term. Missing keys keep the values of `base`.
  static EditConfig from_json(const nlohmann::json& j, const EditConfig& base);
  nlohmann::json to_json() const;
};

/// Noise draws owned by one batch element: the start noise for z_k and the fixed background noise.
struct ElementNoise {
  Tensor start;
  Tensor background;
};
ElementNoise element_noise(std::uint64_t seed, int index, const Shape& latent_shape);

using EpsPredictor = std::function<Tensor(const Tensor& zt, int t)>;

/// State after one sampler position; `blended` is what the next step consumes.
struct StepTrace {
  std::size_t position;
  int t;
  int t_next;
  const Tensor& zt;        // input to the step
  const Tensor& eps;       // prediction at t
  const Tensor& blended;   // after the update and blend
  const Mask* mask;        // null when not blending
};
using StepObserver = std::function<void(const StepTrace&)>;

/// The sampling loop shared by generation and blended editing. z_init is [c,h,w]; the result is [B,c,h,w].
/// Each element starts at noise(z_init, first step, start noise). With a pyramid, after every update the cells
/// outside that step's mask are replaced by noise(z_init, t_next, background noise).
Tensor sample_latents(const EpsPredictor& eps, const NoiseSchedule& sched, const Tensor& z_init, int batch_size,
                      std::uint64_t seed, const MaskPyramid* pyramid, float eta = 0.0f,
                      const StepObserver& observer = {});

/// Guided prediction. A positive latent_clip clamps the implied clean latent and returns the matching noise, so the
/// sampler update lands on the clamped estimate.
EpsPredictor guided_predictor(const DenoiserModel& den, const NoiseSchedule& sched, const Prompt& d, float guidance,
                              float latent_clip = 0.0f);

struct EditCandidate {
  Image image;    // after reconstruction
  Image decoded;  // decode(z0)
  Latent z0;
  std::vector<Image> snapshots;
  std::vector<double> reconstruction_curve;
};

struct EditResult {
  Latent z_init;
  Mask latent_mask;
  MaskPyramid pyramid;
  std::vector<EditCandidate> candidates;
};

/// Blended latent editing of x inside m toward prompt d.
EditResult blended_edit(const VaeModel& vae, const DenoiserModel& den, const NoiseSchedule& sched, const Image& x,
                        const Mask& m, const Prompt& d, const EditConfig& cfg, const StepObserver& observer = {});

/// Plain guided sampling from noise(z_init, first step, start noise), no blending.
Tensor generate_latents(const DenoiserModel& den, const NoiseSchedule& sched, const Tensor& z_init, const Prompt& d,
                        const EditConfig& cfg);

/// Horizontal strip of snapshots, diffusion start on the left.
Image process_strip(const std::vector<Image>& snapshots);
void visualize_process(const std::vector<Image>& snapshots, const std::filesystem::path& out);

}  // namespace bld
