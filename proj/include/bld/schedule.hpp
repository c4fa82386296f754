#pragma once

#include <random>
#include <string>
#include <vector>

#include "bld/tensor.hpp"

namespace bld {

enum class BetaSchedule { linear, cosine };

BetaSchedule parse_beta_schedule(const std::string& name);
std::string to_string(BetaSchedule s);

/// Sentinel step index meaning "fully denoised" (alpha_bar == 1).
inline constexpr int kTerminalStep = -1;

/// Discrete diffusion-time tables plus the strided inference step sequence.
struct NoiseSchedule {
  int num_train_steps = 0;
  std::vector<float> betas;
  std::vector<float> alpha_bars;
  /// Strictly decreasing train-step indices visited at inference, noisiest first.
  std::vector<int> sampler_steps;

  /// alpha_bar for a train step, or 1 for kTerminalStep.
  float alpha_bar(int t) const;
  /// The step that follows sampler_steps[i] (kTerminalStep after the last).
  int next_step(std::size_t i) const { return i + 1 < sampler_steps.size() ? sampler_steps[i + 1] : kTerminalStep; }
  int num_sampler_steps() const { return static_cast<int>(sampler_steps.size()); }
};

/// Builds a schedule with evenly strided sampler steps from T-1 down to 0.
NoiseSchedule make_schedule(int num_train_steps, int num_sampler_steps, BetaSchedule kind = BetaSchedule::linear,
                            float beta_start = 1e-4f, float beta_end = 2e-2f);
/// Schedule from explicit betas; sampler steps strided as in make_schedule.
NoiseSchedule make_schedule_from_betas(std::vector<float> betas, int num_sampler_steps);
/// Same tables, different inference stride.
NoiseSchedule with_sampler_steps(const NoiseSchedule& s, int num_sampler_steps);

/// Checks every NoiseSchedule invariant; throws std::invalid_argument naming the first violation.
void validate(const NoiseSchedule& s);

/// z_t = sqrt(ab_t) z0 + sqrt(1 - ab_t) eps, in one shot.
Tensor noise(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& eps);
/// As above with eps drawn from rng.
Tensor noise(const NoiseSchedule& s, const Tensor& z0, int t, std::mt19937_64& rng);

/// One-step clean estimate (z_t - sqrt(1 - ab_t) eps) / sqrt(ab_t).
Tensor estimate_z0(const NoiseSchedule& s, const Tensor& zt, const Tensor& eps_pred, int t);

/// Deterministic (eta = 0) update from t to t_next: sqrt(ab_next) z0_hat + sqrt(1 - ab_next) eps.
Tensor sampler_step(const NoiseSchedule& s, const Tensor& zt, const Tensor& eps_pred, int t, int t_next);
/// Generalised update; eta = 1 gives ancestral (DDPM-like) sampling with fresh noise from rng.
Tensor sampler_step(const NoiseSchedule& s, const Tensor& zt, const Tensor& eps_pred, int t, int t_next, float eta,
                    std::mt19937_64& rng);

}  // namespace bld
