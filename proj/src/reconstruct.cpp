#include "bld/reconstruct.hpp"

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <cmath>
#include <functional>

namespace bld {

ReconstructionMode parse_reconstruction_mode(const std::string& name) {
  if (name == "none") return ReconstructionMode::none;
  if (name == "stitch") return ReconstructionMode::stitch;
  if (name == "poisson") return ReconstructionMode::poisson;
  if (name == "latent" || name == "latent_opt") return ReconstructionMode::latent_opt;
  if (name == "weights" || name == "weight_opt") return ReconstructionMode::weight_opt;
  throw std::invalid_argument("unknown reconstruction mode '" + name + "'");
}

std::string to_string(ReconstructionMode m) {
  switch (m) {
    case ReconstructionMode::none: return "none";
    case ReconstructionMode::stitch: return "stitch";
    case ReconstructionMode::poisson: return "poisson";
    case ReconstructionMode::latent_opt: return "latent";
    case ReconstructionMode::weight_opt: return "weights";
  }
  return "none";
}

void ReconstructionConfig::validate() const {
  if (num_steps < 0) throw std::invalid_argument("reconstruction steps must be >= 0");
  if (!(lambda >= 0.0f)) throw std::invalid_argument("reconstruction lambda must be >= 0");
  if (!(learning_rate > 0.0f)) throw std::invalid_argument("reconstruction learning rate must be > 0");
}

namespace {

void check_inputs(const Image& x, const Image& x_hat, const Mask& m, const char* what) {
  require_same_shape(x.tensor(), x_hat.tensor(), what);
  require_mask_matches(x, m, what);
}

}  // namespace

Image stitch(const Image& x, const Image& x_hat, const Mask& m) {
  check_inputs(x, x_hat, m, "stitch");
  Image out = x;
  for (int c = 0; c < x.channels(); ++c)
    for (int y = 0; y < x.height(); ++y)
      for (int i = 0; i < x.width(); ++i)
        if (m(y, i)) out.at(c, y, i) = x_hat.at(c, y, i);
  return out;
}

Image poisson_clone(const Image& x, const Image& x_hat, const Mask& m, const PoissonOptions& opt,
                    PoissonReport* report) {
  check_inputs(x, x_hat, m, "poisson_clone");
  if (m.all()) throw std::invalid_argument("poisson_clone: mask covers the whole image, no boundary values");
  PoissonReport rep;
  Image out = x;
  const int h = x.height(), w = x.width();
  std::vector<int> index(static_cast<std::size_t>(h) * w, -1);
  int n = 0;
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w; ++i)
      if (m(y, i)) index[static_cast<std::size_t>(y) * w + i] = n++;
  if (n == 0) {
    if (report) *report = rep;
    return out;
  }

  constexpr int kDy[4] = {-1, 1, 0, 0};
  constexpr int kDx[4] = {0, 0, -1, 1};
  std::vector<Eigen::Triplet<double>> trips;
  for (int y = 0; y < h; ++y)
    for (int i = 0; i < w; ++i) {
      const int p = index[static_cast<std::size_t>(y) * w + i];
      if (p < 0) continue;
      int deg = 0;
      for (int k = 0; k < 4; ++k) {
        const int yy = y + kDy[k], xx = i + kDx[k];
        if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
        ++deg;
        const int q = index[static_cast<std::size_t>(yy) * w + xx];
        if (q >= 0) trips.emplace_back(p, q, -1.0);
      }
      trips.emplace_back(p, p, static_cast<double>(deg));
    }
  Eigen::SparseMatrix<double> a(n, n);
  a.setFromTriplets(trips.begin(), trips.end());

  const bool direct = opt.solver == PoissonOptions::Solver::direct ||
                      (opt.solver == PoissonOptions::Solver::automatic && n <= opt.direct_limit);
  rep.direct = direct;
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> ldlt;
  Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper> cg;
  if (direct) {
    ldlt.compute(a);
    if (ldlt.info() != Eigen::Success) throw PoissonError("poisson_clone: factorization failed", INFINITY);
  } else {
    cg.setMaxIterations(opt.max_iterations);
    cg.setTolerance(opt.tolerance * 1e-3);
    cg.compute(a);
  }

  for (int c = 0; c < x.channels(); ++c) {
    Eigen::VectorXd b = Eigen::VectorXd::Zero(n);
    for (int y = 0; y < h; ++y)
      for (int i = 0; i < w; ++i) {
        const int p = index[static_cast<std::size_t>(y) * w + i];
        if (p < 0) continue;
        double rhs = 0.0;
        for (int k = 0; k < 4; ++k) {
          const int yy = y + kDy[k], xx = i + kDx[k];
          if (yy < 0 || yy >= h || xx < 0 || xx >= w) continue;
          rhs += static_cast<double>(x_hat.at(c, y, i)) - x_hat.at(c, yy, xx);
          if (index[static_cast<std::size_t>(yy) * w + xx] < 0) rhs += x.at(c, yy, xx);
        }
        b[p] = rhs;
      }
    Eigen::VectorXd f;
    if (direct) {
      f = ldlt.solve(b);
    } else {
      f = cg.solve(b);
      rep.iterations = std::max(rep.iterations, static_cast<int>(cg.iterations()));
    }
    const double residual = (a * f - b).cwiseAbs().maxCoeff();
    rep.max_residual = std::max(rep.max_residual, residual);
    if (!(residual <= opt.tolerance)) {
      throw PoissonError("poisson_clone: solver did not converge, residual " + std::to_string(residual), residual);
    }
    for (int y = 0; y < h; ++y)
      for (int i = 0; i < w; ++i) {
        const int p = index[static_cast<std::size_t>(y) * w + i];
        if (p >= 0) out.at(c, y, i) = static_cast<float>(f[p]);
      }
  }
  if (report) *report = rep;
  return out;
}

namespace {

/// Per-element target and weight whose weighted MSE equals the reconstruction objective.
std::pair<Tensor, Tensor> objective_terms(const Image& x, const Image& x_hat, const Mask& m,
                                          const ReconstructionConfig& cfg) {
  Tensor target = x.batched();
  Tensor weight(target.shape());
  const int hw = x.height() * x.width();
  for (int c = 0; c < x.channels(); ++c)
    for (int p = 0; p < hw; ++p) {
      const std::size_t i = static_cast<std::size_t>(c) * hw + p;
      if (m.bits()[static_cast<std::size_t>(p)]) {
        target[i] = x_hat.tensor()[i];
        weight[i] = cfg.include_foreground_term ? 1.0f : 0.0f;
      } else {
        weight[i] = cfg.lambda;
      }
    }
  return {std::move(target), std::move(weight)};
}

void check_finite(double loss, const char* what, int step) {
  if (!std::isfinite(loss)) {
    throw std::runtime_error(std::string(what) + ": non-finite objective at step " + std::to_string(step));
  }
}

/// Adam descent that never accepts an update raising the objective: a rising step is halved up to
/// kMaxHalvings times and dropped if it still rises. The curve holds the accepted objective values.
std::vector<double> monotone_adam(std::vector<ag::Var> params, const std::function<ag::Var()>& objective,
                                  const ReconstructionConfig& cfg, const char* what) {
  constexpr int kMaxHalvings = 8;
  nn::Adam opt(params, {.learning_rate = cfg.learning_rate, .grad_clip = 0.0f});
  std::vector<double> curve;
  ag::Var loss = objective();
  curve.push_back(loss.value()[0]);
  check_finite(curve.back(), what, 0);
  std::vector<Tensor> before(params.size()), delta(params.size());
  for (int step = 1; step <= cfg.num_steps; ++step) {
    opt.zero_grad();
    ag::backward(loss);
    for (std::size_t k = 0; k < params.size(); ++k) before[k] = params[k].value();
    opt.step();
    for (std::size_t k = 0; k < params.size(); ++k) {
      delta[k] = params[k].value();
      for (std::size_t i = 0; i < delta[k].size(); ++i) delta[k][i] -= before[k][i];
    }
    ag::Var next = objective();
    float scale = 1.0f;
    for (int h = 0; h < kMaxHalvings && !(next.value()[0] <= curve.back()); ++h) {
      scale *= 0.5f;
      for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& w = params[k].mutable_value();
        for (std::size_t i = 0; i < w.size(); ++i) w[i] = before[k][i] + scale * delta[k][i];
      }
      next = objective();
    }
    if (!(next.value()[0] <= curve.back())) {
      for (std::size_t k = 0; k < params.size(); ++k) params[k].mutable_value() = before[k];
      next = objective();
    }
    loss = next;
    curve.push_back(loss.value()[0]);
    check_finite(curve.back(), what, step);
  }
  return curve;
}

}  // namespace

double reconstruction_objective(const Image& decoded, const Image& x, const Image& x_hat, const Mask& m,
                                const ReconstructionConfig& cfg) {
  check_inputs(x, x_hat, m, "reconstruction_objective");
  require_same_shape(decoded.tensor(), x.tensor(), "reconstruction_objective");
  const auto [target, weight] = objective_terms(x, x_hat, m, cfg);
  return ag::weighted_mse(ag::Var(decoded.batched()), target, weight).value()[0];
}

LatentOptResult latent_optimize(const VaeModel& vae, const Latent& z0, const Image& x, const Image& x_hat,
                                const Mask& m, const ReconstructionConfig& cfg) {
  check_inputs(x, x_hat, m, "latent_optimize");
  cfg.validate();
  const auto [target, weight] = objective_terms(x, x_hat, m, cfg);
  ag::Var z(z0.batched(), true);
  LatentOptResult res;
  res.loss_curve = monotone_adam(
      {z}, [&] { return ag::weighted_mse(vae.decode_with(vae.decoder_params(), z), target, weight); }, cfg,
      "latent_optimize");
  res.z = Latent::from_batch(z.value(), 0, z0.factor);
  res.image = vae.decode(res.z);
  return res;
}

WeightOptResult weight_optimize(const VaeModel& vae, const Latent& z0, const Image& x, const Image& x_hat,
                                const Mask& m, const ReconstructionConfig& cfg) {
  check_inputs(x, x_hat, m, "weight_optimize");
  cfg.validate();
  const auto [target, weight] = objective_terms(x, x_hat, m, cfg);
  WeightOptResult res{vae.decoder_params().clone(), {}, {}};
  res.decoder.set_requires_grad(true);
  const ag::Var z(z0.batched());
  res.loss_curve = monotone_adam(
      res.decoder.vars(), [&] { return ag::weighted_mse(vae.decode_with(res.decoder, z), target, weight); }, cfg,
      "weight_optimize");
  res.decoder.set_requires_grad(false);
  Tensor last = vae.decode_with(res.decoder, z).value();
  for (auto& v : last.values()) v = std::clamp(v, -1.0f, 1.0f);
  res.image = Image::from_batch(last, 0);
  return res;
}

ReconstructionOutcome reconstruct(const VaeModel& vae, const Latent& z0, const Image& x, const Image& x_hat,
                                  const Mask& m, const ReconstructionConfig& cfg) {
  ReconstructionOutcome out;
  switch (cfg.mode) {
    case ReconstructionMode::none: out.image = x_hat; break;
    case ReconstructionMode::stitch: out.image = stitch(x, x_hat, m); break;
    case ReconstructionMode::poisson:
      out.image = m.all() ? x_hat : poisson_clone(x, x_hat, m, {}, &out.poisson);
      break;
    case ReconstructionMode::latent_opt: {
      auto r = latent_optimize(vae, z0, x, x_hat, m, cfg);
      out.image = std::move(r.image);
      out.loss_curve = std::move(r.loss_curve);
      break;
    }
    case ReconstructionMode::weight_opt: {
      auto r = weight_optimize(vae, z0, x, x_hat, m, cfg);
      out.image = std::move(r.image);
      out.loss_curve = std::move(r.loss_curve);
      break;
    }
  }
  return out;
}

}  // namespace bld
