#include "bld/schedule.hpp"

#include <cmath>
#include <stdexcept>

namespace bld {

BetaSchedule parse_beta_schedule(const std::string& name) {
  if (name == "linear") return BetaSchedule::linear;
  if (name == "cosine") return BetaSchedule::cosine;
  throw std::invalid_argument("unknown beta schedule '" + name + "' (expected linear or cosine)");
}

std::string to_string(BetaSchedule s) { return s == BetaSchedule::linear ? "linear" : "cosine"; }

float NoiseSchedule::alpha_bar(int t) const {
  if (t == kTerminalStep) return 1.0f;
  if (t < 0 || t >= num_train_steps) throw std::out_of_range("step index " + std::to_string(t) + " outside schedule");
  return alpha_bars[static_cast<std::size_t>(t)];
}

namespace {

std::vector<int> strided_steps(int num_train_steps, int num_sampler_steps) {
  if (num_sampler_steps < 1 || num_sampler_steps > num_train_steps) {
    throw std::invalid_argument("sampler steps must lie in [1, " + std::to_string(num_train_steps) + "], got " +
                                std::to_string(num_sampler_steps));
  }
  std::vector<int> steps(static_cast<std::size_t>(num_sampler_steps));
  if (num_sampler_steps == 1) {
    steps[0] = num_train_steps - 1;
    return steps;
  }
  const double span = num_train_steps - 1;
  for (int i = 0; i < num_sampler_steps; ++i) {
    const double frac = static_cast<double>(num_sampler_steps - 1 - i) / (num_sampler_steps - 1);
    steps[static_cast<std::size_t>(i)] = static_cast<int>(std::lround(frac * span));
  }
  return steps;
}

}  // namespace

NoiseSchedule make_schedule_from_betas(std::vector<float> betas, int num_sampler_steps) {
  if (betas.empty()) throw std::invalid_argument("schedule needs at least one train step");
  NoiseSchedule s;
  s.num_train_steps = static_cast<int>(betas.size());
  s.betas = std::move(betas);
  s.alpha_bars.resize(s.betas.size());
  double prod = 1.0;
  for (std::size_t t = 0; t < s.betas.size(); ++t) {
    const float b = s.betas[t];
    if (!(b > 0.0f && b < 1.0f)) throw std::invalid_argument("beta values must lie in (0,1)");
    prod *= 1.0 - static_cast<double>(b);
    s.alpha_bars[t] = static_cast<float>(prod);
  }
  s.sampler_steps = strided_steps(s.num_train_steps, num_sampler_steps);
  validate(s);
  return s;
}

NoiseSchedule make_schedule(int num_train_steps, int num_sampler_steps, BetaSchedule kind, float beta_start,
                            float beta_end) {
  if (num_train_steps < 1) throw std::invalid_argument("train steps must be positive");
  if (num_sampler_steps < 1) throw std::invalid_argument("sampler steps must be positive");
  std::vector<float> betas(static_cast<std::size_t>(num_train_steps));
  if (kind == BetaSchedule::linear) {
    for (int t = 0; t < num_train_steps; ++t) {
      const double frac = num_train_steps == 1 ? 0.0 : static_cast<double>(t) / (num_train_steps - 1);
      betas[static_cast<std::size_t>(t)] = static_cast<float>(beta_start + (beta_end - beta_start) * frac);
    }
  } else {
    constexpr double offset = 0.008;
    const auto f = [&](double t) {
      const double c = std::cos((t / num_train_steps + offset) / (1.0 + offset) * M_PI / 2.0);
      return c * c;
    };
    for (int t = 0; t < num_train_steps; ++t) {
      betas[static_cast<std::size_t>(t)] = static_cast<float>(std::min(1.0 - f(t + 1) / f(t), 0.999));
    }
  }
  return make_schedule_from_betas(std::move(betas), num_sampler_steps);
}

NoiseSchedule with_sampler_steps(const NoiseSchedule& s, int num_sampler_steps) {
  NoiseSchedule out = s;
  out.sampler_steps = strided_steps(s.num_train_steps, num_sampler_steps);
  return out;
}

void validate(const NoiseSchedule& s) {
  const auto n = static_cast<std::size_t>(s.num_train_steps);
  if (s.num_train_steps < 1 || s.betas.size() != n || s.alpha_bars.size() != n) {
    throw std::invalid_argument("schedule tables do not match num_train_steps");
  }
  double prod = 1.0;
  for (std::size_t t = 0; t < n; ++t) {
    prod *= 1.0 - static_cast<double>(s.betas[t]);
    if (!(s.alpha_bars[t] > 0.0f && s.alpha_bars[t] <= 1.0f)) throw std::invalid_argument("alpha_bar outside (0,1]");
    if (std::fabs(s.alpha_bars[t] - prod) > 1e-6 * prod) throw std::invalid_argument("alpha_bar is not the beta product");
    if (t > 0 && !(s.alpha_bars[t] < s.alpha_bars[t - 1])) throw std::invalid_argument("alpha_bar not strictly decreasing");
  }
  if (s.sampler_steps.empty()) throw std::invalid_argument("empty sampler step list");
  for (std::size_t i = 0; i < s.sampler_steps.size(); ++i) {
    const int st = s.sampler_steps[i];
    if (st < 0 || st >= s.num_train_steps) throw std::invalid_argument("sampler step outside schedule");
    if (i > 0 && !(st < s.sampler_steps[i - 1])) throw std::invalid_argument("sampler steps not strictly decreasing");
  }
  if (s.sampler_steps.size() > 1 && s.sampler_steps.back() != 0) throw std::invalid_argument("sampler steps must end at 0");
}

Tensor noise(const NoiseSchedule& s, const Tensor& z0, int t, const Tensor& eps) {
  require_same_shape(z0, eps, "noise");
  if (t == kTerminalStep) return z0;
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(z0.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(a * z0[i] + b * eps[i]);
  return out;
}

Tensor noise(const NoiseSchedule& s, const Tensor& z0, int t, std::mt19937_64& rng) {
  return noise(s, z0, t, Tensor::randn(z0.shape(), rng));
}

Tensor estimate_z0(const NoiseSchedule& s, const Tensor& zt, const Tensor& eps_pred, int t) {
  require_same_shape(zt, eps_pred, "estimate_z0");
  const double ab = s.alpha_bar(t);
  const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
  Tensor out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>((zt[i] - b * eps_pred[i]) / a);
  return out;
}

namespace {

void check_step_pair(const NoiseSchedule& s, int t, int t_next) {
  if (t < 0 || t >= s.num_train_steps) throw std::invalid_argument("sampler_step: invalid current step " + std::to_string(t));
  if (t_next != kTerminalStep && (t_next < 0 || t_next >= t)) {
    throw std::invalid_argument("sampler_step: next step " + std::to_string(t_next) + " must precede " + std::to_string(t));
  }
}

}  // namespace

Tensor sampler_step(const NoiseSchedule& s, const Tensor& zt, const Tensor& eps_pred, int t, int t_next) {
  check_step_pair(s, t, t_next);
  Tensor z0 = estimate_z0(s, zt, eps_pred, t);
  if (t_next == kTerminalStep) return z0;
  return noise(s, z0, t_next, eps_pred);
}

Tensor sampler_step(const NoiseSchedule& s, const Tensor& zt, const Tensor& eps_pred, int t, int t_next, float eta,
                    std::mt19937_64& rng) {
  if (eta == 0.0f) return sampler_step(s, zt, eps_pred, t, t_next);
  check_step_pair(s, t, t_next);
  Tensor z0 = estimate_z0(s, zt, eps_pred, t);
  if (t_next == kTerminalStep) return z0;
  const double ab = s.alpha_bar(t);
  const double ab_next = s.alpha_bar(t_next);
  const double sigma = eta * std::sqrt((1.0 - ab_next) / (1.0 - ab)) * std::sqrt(1.0 - ab / ab_next);
  const float a = static_cast<float>(std::sqrt(ab_next));
  const float d = static_cast<float>(std::sqrt(std::max(0.0, 1.0 - ab_next - sigma * sigma)));
  const Tensor fresh = Tensor::randn(zt.shape(), rng);
  Tensor out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a * z0[i] + d * eps_pred[i] + static_cast<float>(sigma) * fresh[i];
  return out;
}

}  // namespace bld
