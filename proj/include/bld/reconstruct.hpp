#pragma once

#include <stdexcept>
#include <string>
#include <vector>

#include "bld/autoencoder.hpp"
#include "bld/image.hpp"

namespace bld {

enum class ReconstructionMode { none, stitch, poisson, latent_opt, weight_opt };

/// Accepts none, stitch, poisson, latent|latent_opt, weights|weight_opt.
ReconstructionMode parse_reconstruction_mode(const std::string& name);
std::string to_string(ReconstructionMode m);

struct ReconstructionConfig {
  float lambda = 100.0f;
  float learning_rate = 1e-4f;
  int num_steps = 75;
  bool include_foreground_term = true;
  ReconstructionMode mode = ReconstructionMode::weight_opt;

  void validate() const;
};

/// x_hat inside m, x elsewhere.
Image stitch(const Image& x, const Image& x_hat, const Mask& m);

struct PoissonOptions {
  enum class Solver { automatic, direct, conjugate_gradient };
  Solver solver = Solver::automatic;
  double tolerance = 1e-4;
  int max_iterations = 20000;
  int direct_limit = 64 * 64;  // largest unknown count solved directly under automatic
};

struct PoissonReport {
  bool direct = false;
  int iterations = 0;
  double max_residual = 0.0;
};

class PoissonError : public std::runtime_error {
 public:
  PoissonError(const std::string& what, double residual) : std::runtime_error(what), residual_(residual) {}
  double residual() const { return residual_; }

 private:
  double residual_;
};

/// Gradient-domain cloning: inside m the result has the Laplacian of x_hat and meets x on the mask boundary.
/// Channels are solved independently; pixels outside m are copied from x.
Image poisson_clone(const Image& x, const Image& x_hat, const Mask& m, const PoissonOptions& opt = {},
                    PoissonReport* report = nullptr);

/// mean(m (D - x_hat)^2) + lambda mean((1 - m) (D - x)^2), the first term optional.
double reconstruction_objective(const Image& decoded, const Image& x, const Image& x_hat, const Mask& m,
                                const ReconstructionConfig& cfg);

struct LatentOptResult {
  Latent z;
  Image image;
  std::vector<double> loss_curve;  // num_steps + 1 entries, before each update and after the last
};

/// Optimizes the latent, starting at z0, so that its decoding matches x_hat inside m and x outside.
LatentOptResult latent_optimize(const VaeModel& vae, const Latent& z0, const Image& x, const Image& x_hat, const Mask& m,
                                const ReconstructionConfig& cfg);

struct WeightOptResult {
  nn::ParamSet decoder;
  Image image;
  std::vector<double> loss_curve;
};

/// Fine-tunes a private copy of the decoder on one image with z0 frozen; the model passed in is untouched.
WeightOptResult weight_optimize(const VaeModel& vae, const Latent& z0, const Image& x, const Image& x_hat, const Mask& m,
                                const ReconstructionConfig& cfg);

struct ReconstructionOutcome {
  Image image;
  std::vector<double> loss_curve;
  PoissonReport poisson;
};

/// Applies cfg.mode to an edit result x_hat = decode(z0).
ReconstructionOutcome reconstruct(const VaeModel& vae, const Latent& z0, const Image& x, const Image& x_hat,
                                  const Mask& m, const ReconstructionConfig& cfg);

}  // namespace bld
