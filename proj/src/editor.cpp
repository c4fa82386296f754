#include "bld/editor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace bld {

Mask downsample_mask(const Mask& m, int factor) {
  if (factor < 1) throw std::invalid_argument("downsample_mask: factor must be positive");
  if (m.height() % factor != 0 || m.width() % factor != 0) {
    throw ShapeError("downsample_mask: " + std::to_string(m.height()) + "x" + std::to_string(m.width()) +
                     " mask is not divisible by " + std::to_string(factor));
  }
  Mask out(m.height() / factor, m.width() / factor);
  for (int y = 0; y < out.height(); ++y)
    for (int x = 0; x < out.width(); ++x) {
      int on = 0;
      for (int dy = 0; dy < factor; ++dy)
        for (int dx = 0; dx < factor; ++dx) on += m(y * factor + dy, x * factor + dx);
      out.set(y, x, 2 * on >= factor * factor);
    }
  return out;
}

Mask dilate(const Mask& m, int kernel) {
  if (kernel < 1 || kernel % 2 == 0) throw std::invalid_argument("dilate: kernel must be a positive odd size");
  const int r = kernel / 2;
  Mask out(m.height(), m.width());
  for (int y = 0; y < m.height(); ++y)
    for (int x = 0; x < m.width(); ++x) {
      bool on = false;
      for (int yy = std::max(0, y - r); yy <= std::min(m.height() - 1, y + r) && !on; ++yy)
        for (int xx = std::max(0, x - r); xx <= std::min(m.width() - 1, x + r); ++xx)
          if (m(yy, xx)) {
            on = true;
            break;
          }
      out.set(y, x, on);
    }
  return out;
}

MaskPyramid constant_pyramid(const Mask& latent_mask, int num_steps) {
  MaskPyramid p;
  p.step_masks.assign(static_cast<std::size_t>(std::max(num_steps, 0)), latent_mask);
  return p;
}

MaskPyramid build_mask_pyramid(const Mask& latent_mask, int num_steps) {
  if (num_steps < MaskPyramid::kPhases) {
    MaskPyramid p = constant_pyramid(latent_mask, num_steps);
    p.fallback = true;
    return p;
  }
  MaskPyramid p;
  const int base = num_steps / MaskPyramid::kPhases, rem = num_steps % MaskPyramid::kPhases;
  for (int phase = 0; phase < MaskPyramid::kPhases; ++phase) {
    const int size = base + (phase < rem ? 1 : 0);
    p.phase_sizes.push_back(size);
    const Mask mask = dilate(latent_mask, MaskPyramid::kKernels[phase]);
    p.step_masks.insert(p.step_masks.end(), static_cast<std::size_t>(size), mask);
  }
  return p;
}

void EditConfig::validate(const NoiseSchedule& sched) const {
  if (batch_size < 1) throw std::invalid_argument("batch size must be >= 1");
  if (num_sampler_steps < 1 || num_sampler_steps > sched.num_train_steps) {
    throw std::invalid_argument("sampler steps must lie in [1, " + std::to_string(sched.num_train_steps) + "]");
  }
  if (!(guidance_scale >= 0.0f)) throw std::invalid_argument("guidance scale must be >= 0");
  if (!(eta >= 0.0f && eta <= 1.0f)) throw std::invalid_argument("eta must lie in [0, 1]");
  if (!(latent_clip >= 0.0f)) throw std::invalid_argument("latent clip must be >= 0");
  if (static_cast<long>(batch_size) * num_sampler_steps > max_step_budget) {
    throw std::invalid_argument("batch_size * steps = " + std::to_string(static_cast<long>(batch_size) * num_sampler_steps) +
                                " exceeds the step budget " + std::to_string(max_step_budget));
  }
  reconstruction.validate();
}

EditConfig EditConfig::from_json(const nlohmann::json& j, const EditConfig& base) {
  if (!j.is_object()) throw std::invalid_argument("edit options must be a JSON object");
  static const char* const kKeys[] = {"batch", "steps",  "seed", "guidance", "shrink", "reconstruct",    "eta", "clip",
                                      "snapshots", "budget", "lambda", "lr", "opt_steps", "foreground_term"};
  for (const auto& [key, value] : j.items()) {
    if (std::find(std::begin(kKeys), std::end(kKeys), key) == std::end(kKeys)) {
      throw std::invalid_argument("unknown edit option '" + key + "'");
    }
  }
  EditConfig c = base;
  try {
    c.batch_size = j.value("batch", c.batch_size);
    c.num_sampler_steps = j.value("steps", c.num_sampler_steps);
    c.seed = j.value("seed", c.seed);
    c.guidance_scale = j.value("guidance", c.guidance_scale);
    c.progressive_shrinking = j.value("shrink", c.progressive_shrinking);
    if (j.contains("reconstruct")) c.reconstruction.mode = parse_reconstruction_mode(j.at("reconstruct").get<std::string>());
    c.eta = j.value("eta", c.eta);
    c.latent_clip = j.value("clip", c.latent_clip);
    c.keep_snapshots = j.value("snapshots", c.keep_snapshots);
    c.max_step_budget = j.value("budget", c.max_step_budget);
    c.reconstruction.lambda = j.value("lambda", c.reconstruction.lambda);
    c.reconstruction.learning_rate = j.value("lr", c.reconstruction.learning_rate);
    c.reconstruction.num_steps = j.value("opt_steps", c.reconstruction.num_steps);
    c.reconstruction.include_foreground_term = j.value("foreground_term", c.reconstruction.include_foreground_term);
  } catch (const nlohmann::json::exception& e) {
    throw std::invalid_argument(std::string("bad edit option: ") + e.what());
  }
  return c;
}

nlohmann::json EditConfig::to_json() const {
  return {{"batch", batch_size},
          {"steps", num_sampler_steps},
          {"seed", seed},
          {"guidance", guidance_scale},
          {"shrink", progressive_shrinking},
          {"reconstruct", bld::to_string(reconstruction.mode)},
          {"eta", eta},
          {"clip", latent_clip},
          {"snapshots", keep_snapshots},
          {"budget", max_step_budget},
          {"lambda", reconstruction.lambda},
          {"lr", reconstruction.learning_rate},
          {"opt_steps", reconstruction.num_steps},
          {"foreground_term", reconstruction.include_foreground_term}};
}

ElementNoise element_noise(std::uint64_t seed, int index, const Shape& latent_shape) {
  std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(index)));
  ElementNoise n;
  n.start = Tensor::randn(latent_shape, rng);
  n.background = Tensor::randn(latent_shape, rng);
  return n;
}

Tensor sample_latents(const EpsPredictor& eps, const NoiseSchedule& sched, const Tensor& z_init, int batch_size,
                      std::uint64_t seed, const MaskPyramid* pyramid, float eta, const StepObserver& observer) {
  if (z_init.rank() != 3) throw ShapeError("sample_latents: z_init must be [c,h,w], got " + shape_str(z_init.shape()));
  if (batch_size < 1) throw std::invalid_argument("sample_latents: batch size must be >= 1");
  const std::size_t k = sched.sampler_steps.size();
  if (k == 0) throw std::invalid_argument("sample_latents: schedule has no sampler steps");
  if (pyramid) {
    if (pyramid->size() != k) throw std::invalid_argument("sample_latents: pyramid length differs from step count");
    for (const Mask& m : pyramid->step_masks)
      if (m.height() != z_init.dim(1) || m.width() != z_init.dim(2)) throw ShapeError("sample_latents: mask size differs from latent size");
  }
  const std::size_t per = z_init.size();
  const int hw = z_init.dim(1) * z_init.dim(2);
  const int channels = z_init.dim(0);

  std::vector<Tensor> start, background;
  std::vector<std::mt19937_64> step_rngs;
  for (int b = 0; b < batch_size; ++b) {
    ElementNoise n = element_noise(seed, b, z_init.shape());
    start.push_back(noise(sched, z_init, sched.sampler_steps[0], n.start).reshaped({1, channels, z_init.dim(1), z_init.dim(2)}));
    background.push_back(std::move(n.background));
    step_rngs.emplace_back(mix_seed(mix_seed(seed, static_cast<std::uint64_t>(b)), 0x57E9));
  }
  Tensor z = Tensor::stack(start);

  for (std::size_t i = 0; i < k; ++i) {
    const int t = sched.sampler_steps[i], t_next = sched.next_step(i);
    const Tensor e = eps(z, t);
    require_same_shape(e, z, "sample_latents: prediction");
    Tensor next(z.shape());
    if (eta == 0.0f) {
      next = sampler_step(sched, z, e, t, t_next);
    } else {
      for (int b = 0; b < batch_size; ++b) {
        const Tensor step = sampler_step(sched, z.batch_slice(b), e.batch_slice(b), t, t_next, eta, step_rngs[b]);
        std::memcpy(next.data() + b * per, step.data(), per * sizeof(float));
      }
    }
    const Mask* mask = pyramid ? &pyramid->at(i) : nullptr;
    if (mask) {
      const auto& bits = mask->bits();
      for (int b = 0; b < batch_size; ++b) {
        const Tensor bg = noise(sched, z_init, t_next, background[static_cast<std::size_t>(b)]);
        float* dst = next.data() + b * per;
        for (int c = 0; c < channels; ++c)
          for (int p = 0; p < hw; ++p)
            if (!bits[static_cast<std::size_t>(p)]) dst[c * hw + p] = bg[static_cast<std::size_t>(c) * hw + p];
      }
    }
    if (observer) observer(StepTrace{i, t, t_next, z, e, next, mask});
    z = std::move(next);
  }
  return z;
}

EpsPredictor guided_predictor(const DenoiserModel& den, const NoiseSchedule& sched, const Prompt& d, float guidance,
                              float latent_clip) {
  if (!(latent_clip > 0.0f)) {
    return [&den, &sched, d, guidance](const Tensor& zt, int t) { return predict_eps(den, sched, zt, d, t, guidance); };
  }
  return [&den, &sched, d, guidance, latent_clip](const Tensor& zt, int t) {
    Tensor e = predict_eps(den, sched, zt, d, t, guidance);
    const double ab = sched.alpha_bar(t);
    const double a = std::sqrt(ab), b = std::sqrt(1.0 - ab);
    for (std::size_t i = 0; i < e.size(); ++i) {
      const double z0 = (zt[i] - b * e[i]) / a;
      const double clipped = std::clamp(z0, -static_cast<double>(latent_clip), static_cast<double>(latent_clip));
      if (clipped != z0) e[i] = static_cast<float>((zt[i] - a * clipped) / b);
    }
    return e;
  };
}

namespace {

NoiseSchedule schedule_for(const NoiseSchedule& sched, const EditConfig& cfg) {
  cfg.validate(sched);
  return sched.num_sampler_steps() == cfg.num_sampler_steps ? sched : with_sampler_steps(sched, cfg.num_sampler_steps);
}

}  // namespace

EditResult blended_edit(const VaeModel& vae, const DenoiserModel& den, const NoiseSchedule& sched, const Image& x,
                        const Mask& m, const Prompt& d, const EditConfig& cfg, const StepObserver& observer) {
  const NoiseSchedule s = schedule_for(sched, cfg);
  require_mask_matches(x, m, "blended_edit");
  EditResult res;
  res.z_init = vae.encode(x);
  res.latent_mask = downsample_mask(m, res.z_init.factor);
  res.pyramid = cfg.progressive_shrinking ? build_mask_pyramid(res.latent_mask, cfg.num_sampler_steps)
                                          : constant_pyramid(res.latent_mask, cfg.num_sampler_steps);

  std::vector<Tensor> estimates;
  const StepObserver watch = [&](const StepTrace& tr) {
    if (cfg.keep_snapshots) estimates.push_back(estimate_z0(s, tr.zt, tr.eps, tr.t));
    if (observer) observer(tr);
  };
  const Tensor z0 =
      sample_latents(guided_predictor(den, s, d, cfg.guidance_scale, cfg.latent_clip), s, res.z_init.data, cfg.batch_size, cfg.seed,
                     &res.pyramid, cfg.eta, watch);

  const Tensor decoded = vae.decode_batch(z0);
  std::vector<Tensor> snapshot_images;
  for (const Tensor& est : estimates) snapshot_images.push_back(vae.decode_batch(est));
  for (int b = 0; b < cfg.batch_size; ++b) {
    EditCandidate c;
    c.z0 = Latent::from_batch(z0, b, res.z_init.factor);
    c.decoded = Image::from_batch(decoded, b);
    for (const Tensor& snap : snapshot_images) c.snapshots.push_back(Image::from_batch(snap, b));
    ReconstructionOutcome r = reconstruct(vae, c.z0, x, c.decoded, m, cfg.reconstruction);
    c.image = std::move(r.image);
    c.reconstruction_curve = std::move(r.loss_curve);
    res.candidates.push_back(std::move(c));
  }
  return res;
}

Tensor generate_latents(const DenoiserModel& den, const NoiseSchedule& sched, const Tensor& z_init, const Prompt& d,
                        const EditConfig& cfg) {
  const NoiseSchedule s = schedule_for(sched, cfg);
  return sample_latents(guided_predictor(den, s, d, cfg.guidance_scale, cfg.latent_clip), s, z_init, cfg.batch_size, cfg.seed, nullptr,
                        cfg.eta);
}

Image process_strip(const std::vector<Image>& snapshots) {
  if (snapshots.empty()) throw std::invalid_argument("process_strip: no snapshots");
  return hstack(snapshots);
}

void visualize_process(const std::vector<Image>& snapshots, const std::filesystem::path& out) {
  write_png(out, process_strip(snapshots));
}

}  // namespace bld
