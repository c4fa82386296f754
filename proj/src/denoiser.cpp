#include "bld/denoiser.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>

namespace bld {

Prompt Prompt::parse(const std::string& text) {
  const auto label = Vocabulary::lookup(text);
  if (!label) throw UnknownPrompt("unknown prompt '" + text + "'");
  return {*label, text};
}

Prompt Prompt::of_label(int label) {
  if (label < 0 || label > Vocabulary::kNone) throw UnknownPrompt("label " + std::to_string(label) + " outside vocabulary");
  return {label, Vocabulary::name(label)};
}

std::string schedule_fingerprint(const NoiseSchedule& s) {
  std::vector<std::uint8_t> bytes(s.betas.size() * sizeof(float));
  std::memcpy(bytes.data(), s.betas.data(), bytes.size());
  return sha256_hex(bytes).substr(0, 16);
}

nlohmann::json DenoiserArch::to_json() const {
  return {{"latent_channels", latent_channels}, {"latent_size", latent_size}, {"base_channels", base_channels},
          {"mid_channels", mid_channels},       {"time_dim", time_dim},       {"groups", groups},
          {"num_labels", num_labels}};
}

DenoiserArch DenoiserArch::from_json(const nlohmann::json& j) {
  DenoiserArch a;
  a.latent_channels = j.value("latent_channels", a.latent_channels);
  a.latent_size = j.value("latent_size", a.latent_size);
  a.base_channels = j.value("base_channels", a.base_channels);
  a.mid_channels = j.value("mid_channels", a.mid_channels);
  a.time_dim = j.value("time_dim", a.time_dim);
  a.groups = j.value("groups", a.groups);
  a.num_labels = j.value("num_labels", a.num_labels);
  return a;
}

DenoiserTrainConfig DenoiserTrainConfig::from_json(const nlohmann::json& j) {
  DenoiserTrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.p_uncond = j.value("p_uncond", c.p_uncond);
  c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
  c.num_train_steps = j.value("num_train_steps", c.num_train_steps);
  c.beta_schedule = j.value("beta_schedule", c.beta_schedule);
  return c;
}

namespace {

constexpr int kSinusoidDim = 64;

void add_res_block(nn::ParamSet& ps, const std::string& name, int ch, int time_dim, std::mt19937_64& rng) {
  nn::add_group_norm(ps, name + ".n1", ch);
  nn::add_conv(ps, name + ".c1", ch, ch, 3, rng);
  nn::add_linear(ps, name + ".t", time_dim, ch, rng, 0.5f);
  nn::add_group_norm(ps, name + ".n2", ch);
  nn::add_conv(ps, name + ".c2", ch, ch, 3, rng, 0.5f);
}

}  // namespace

DenoiserModel DenoiserModel::initialize(const DenoiserArch& arch, int num_train_steps, BetaSchedule kind,
                                        std::uint64_t seed) {
  DenoiserModel m;
  m.arch_ = arch;
  m.schedule_id_ = schedule_fingerprint(make_schedule(num_train_steps, 1, kind));
  m.schedule_spec_ = {{"num_train_steps", num_train_steps}, {"beta_schedule", to_string(kind)}};
  std::mt19937_64 rng(mix_seed(seed, 0xD0));
  const int c0 = arch.base_channels, c1 = arch.mid_channels, td = arch.time_dim;
  auto& ps = m.params_;
  nn::add_linear(ps, "time1", kSinusoidDim, td, rng);
  nn::add_linear(ps, "time2", td, td, rng);
  Tensor table = Tensor::randn({arch.num_labels, td}, rng);
  for (auto& v : table.values()) v *= 0.5f;
  ps.add("labels", std::move(table));
  nn::add_conv(ps, "in", arch.latent_channels, c0, 3, rng);
  add_res_block(ps, "r1", c0, td, rng);
  nn::add_conv(ps, "down", c0, c1, 3, rng);
  add_res_block(ps, "r2", c1, td, rng);
  add_res_block(ps, "r3", c1, td, rng);
  nn::add_conv(ps, "up", c1, c0, 3, rng);
  nn::add_conv(ps, "merge", 2 * c0, c0, 3, rng);
  add_res_block(ps, "r4", c0, td, rng);
  nn::add_group_norm(ps, "out_norm", c0);
  nn::add_conv(ps, "out", c0, arch.latent_channels, 3, rng, 0.0f);
  m.training_.seed = seed;
  return m;
}

NoiseSchedule DenoiserModel::schedule(int num_sampler_steps) const {
  const int t = schedule_spec_.value("num_train_steps", 1000);
  const auto kind = parse_beta_schedule(schedule_spec_.value("beta_schedule", std::string("linear")));
  NoiseSchedule s = make_schedule(t, num_sampler_steps, kind);
  if (schedule_fingerprint(s) != schedule_id_) throw std::invalid_argument("recorded schedule does not reproduce its fingerprint");
  return s;
}

ag::Var DenoiserModel::condition(const std::vector<int>& steps, const std::vector<int>& labels) const {
  ag::Var h(nn::timestep_embedding(steps, kSinusoidDim));
  h = nn::linear(params_, "time1", h);
  h = nn::linear(params_, "time2", ag::silu(h));
  for (int l : labels)
    if (l < 0 || l >= arch_.num_labels) throw UnknownPrompt("label " + std::to_string(l) + " outside model vocabulary");
  return ag::add(h, ag::gather_rows(params_.at("labels"), labels));
}

ag::Var DenoiserModel::res_block(const std::string& name, const ag::Var& x, const ag::Var& cond,
                                 const std::vector<int>& row_of) const {
  const int g = arch_.groups;
  ag::Var r = nn::conv(params_, name + ".c1", ag::silu(nn::group_norm(params_, name + ".n1", x, g)));
  const ag::Var proj = nn::linear(params_, name + ".t", ag::silu(cond));
  r = ag::add_channel_bias(r, ag::gather_rows(proj, row_of));
  r = nn::conv(params_, name + ".c2", ag::silu(nn::group_norm(params_, name + ".n2", r, g)));
  return ag::add(x, r);
}

ag::Var DenoiserModel::forward(const ag::Var& zt, const ag::Var& cond_rows, const std::vector<int>& row_of) const {
  const Tensor& z = zt.value();
  if (z.rank() != 4 || z.dim(1) != arch_.latent_channels || z.dim(2) != arch_.latent_size || z.dim(3) != arch_.latent_size) {
    throw ShapeError("denoiser input must be [N," + std::to_string(arch_.latent_channels) + "," +
                     std::to_string(arch_.latent_size) + "," + std::to_string(arch_.latent_size) + "], got " +
                     shape_str(z.shape()));
  }
  if (static_cast<int>(row_of.size()) != z.dim(0)) throw ShapeError("denoiser: one condition row index per sample");
  const ag::Var h0 = nn::conv(params_, "in", zt);
  const ag::Var h1 = res_block("r1", h0, cond_rows, row_of);
  ag::Var h = nn::conv(params_, "down", h1, 2);
  h = res_block("r2", h, cond_rows, row_of);
  h = res_block("r3", h, cond_rows, row_of);
  h = nn::conv(params_, "up", ag::upsample2x(h));
  h = nn::conv(params_, "merge", ag::concat_channels(h, h1));
  h = res_block("r4", h, cond_rows, row_of);
  h = ag::silu(nn::group_norm(params_, "out_norm", h, arch_.groups));
  return nn::conv(params_, "out", h);
}

Checkpoint DenoiserModel::to_checkpoint() const {
  Checkpoint ck;
  ck.type = kCheckpointType;
  ck.header["arch"] = arch_.to_json();
  ck.header["schedule_id"] = schedule_id_;
  ck.header["schedule"] = schedule_spec_;
  ck.header["held_out_initial"] = held_out_initial_;
  ck.add_params(params_, "net.");
  training_.store(ck);
  return ck;
}

DenoiserModel DenoiserModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.type != kCheckpointType) throw CheckpointError("expected a denoiser checkpoint, got '" + ck.type + "'");
  const auto spec = ck.header.at("schedule");
  DenoiserModel m = initialize(DenoiserArch::from_json(ck.header.at("arch")), spec.value("num_train_steps", 1000),
                               parse_beta_schedule(spec.value("beta_schedule", std::string("linear"))), 0);
  m.schedule_id_ = ck.header.at("schedule_id").get<std::string>();
  m.held_out_initial_ = ck.header.value("held_out_initial", 0.0);
  m.params_.assign_from(ck.take_params("net."));
  m.training_ = TrainingState::load(ck);
  return m;
}

void DenoiserModel::save(const std::filesystem::path& p) const { save_checkpoint(p, to_checkpoint()); }

DenoiserModel DenoiserModel::load(const std::filesystem::path& p) {
  return from_checkpoint(load_checkpoint(p, kCheckpointType));
}

EpsBranches predict_branches(const DenoiserModel& model, const NoiseSchedule& sched, const Tensor& zt, const Prompt& d,
                             int t) {
  if (schedule_fingerprint(sched) != model.schedule_id()) {
    throw std::invalid_argument("schedule does not match the one the denoiser was trained with");
  }
  if (t < 0 || t >= sched.num_train_steps) throw std::invalid_argument("step " + std::to_string(t) + " outside schedule");
  if (d.label < 0 || d.label > Vocabulary::kNone) throw UnknownPrompt("unknown prompt label " + std::to_string(d.label));
  const int n = zt.dim(0);
  if (d.is_unconditional()) {
    const ag::Var cond = model.condition({t}, {Vocabulary::kNone});
    Tensor out = model.forward(ag::Var(zt), cond, std::vector<int>(static_cast<std::size_t>(n), 0)).value();
    return {out, out};
  }
  const ag::Var cond = model.condition({t, t}, {d.label, Vocabulary::kNone});
  const Tensor pair = Tensor::stack(std::vector<Tensor>{zt, zt});
  std::vector<int> rows(static_cast<std::size_t>(2 * n), 0);
  std::fill(rows.begin() + n, rows.end(), 1);
  const Tensor out = model.forward(ag::Var(pair), cond, rows).value();
  return {out.batch_slice(0, n), out.batch_slice(n, n)};
}

Tensor predict_eps(const DenoiserModel& model, const NoiseSchedule& sched, const Tensor& zt, const Prompt& d, int t,
                   float guidance_scale) {
  if (!(guidance_scale >= 0.0f)) throw std::invalid_argument("guidance scale must be non-negative");
  EpsBranches br = predict_branches(model, sched, zt, d, t);
  if (guidance_scale == 1.0f) return std::move(br.cond);
  if (guidance_scale == 0.0f) return std::move(br.uncond);
  Tensor out(zt.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = br.uncond[i] + guidance_scale * (br.cond[i] - br.uncond[i]);
  return out;
}

namespace {

Tensor flip_horizontal(const Tensor& nchw) {
  Tensor out(nchw.shape());
  const int rows = nchw.dim(0) * nchw.dim(1) * nchw.dim(2), w = nchw.dim(3);
  for (int r = 0; r < rows; ++r)
    for (int x = 0; x < w; ++x) out[static_cast<std::size_t>(r) * w + x] = nchw[static_cast<std::size_t>(r) * w + (w - 1 - x)];
  return out;
}

Tensor encode_all(const VaeModel& vae, std::span<const Scene> scenes, bool flipped) {
  std::vector<Tensor> parts;
  for (std::size_t b = 0; b < scenes.size(); b += 64) {
    const std::size_t n = std::min<std::size_t>(64, scenes.size() - b);
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), static_cast<int>(b));
    Tensor x = gather_images(scenes, idx);
    if (flipped) x = flip_horizontal(x);
    parts.push_back(vae.encode_mean_batch(x));
  }
  return Tensor::stack(parts);
}

/// Noises each sample at its own step.
Tensor noise_per_sample(const NoiseSchedule& s, const Tensor& z0, const std::vector<int>& steps, const Tensor& eps) {
  Tensor out(z0.shape());
  const std::size_t per = z0.size() / static_cast<std::size_t>(z0.dim(0));
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const double ab = s.alpha_bar(steps[i]);
    const float a = static_cast<float>(std::sqrt(ab)), b = static_cast<float>(std::sqrt(1.0 - ab));
    for (std::size_t j = i * per; j < (i + 1) * per; ++j) out[j] = a * z0[j] + b * eps[j];
  }
  return out;
}

}  // namespace

double held_out_eps_mse(const DenoiserModel& model, const NoiseSchedule& sched, const Tensor& latents,
                        const std::vector<int>& labels, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xE5));
  std::uniform_int_distribution<int> step(0, sched.num_train_steps - 1);
  double total = 0.0;
  std::size_t count = 0;
  for (int b = 0; b < latents.dim(0); b += 32) {
    const int n = std::min(32, latents.dim(0) - b);
    const Tensor z0 = latents.batch_slice(b, n);
    std::vector<int> steps(static_cast<std::size_t>(n));
    for (auto& s : steps) s = step(rng);
    const Tensor eps = Tensor::randn(z0.shape(), rng);
    const std::vector<int> lab(labels.begin() + b, labels.begin() + b + n);
    std::vector<int> rows(static_cast<std::size_t>(n));
    std::iota(rows.begin(), rows.end(), 0);
    const Tensor pred = model.forward(ag::Var(noise_per_sample(sched, z0, steps, eps)), model.condition(steps, lab), rows).value();
    for (std::size_t i = 0; i < pred.size(); ++i) {
      const double d = pred[i] - eps[i];
      total += d * d;
    }
    count += pred.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

DenoiserModel train_denoiser(const VaeModel& vae, std::span<const Scene> corpus, const DenoiserTrainConfig& cfg,
                             const DenoiserArch& arch, const DenoiserModel* resume) {
  if (corpus.empty()) throw TrainingError("train_denoiser: empty corpus");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw TrainingError("train_denoiser: invalid epochs or batch size");
  const NoiseSchedule sched = make_schedule(cfg.num_train_steps, 1, parse_beta_schedule(cfg.beta_schedule));
  DenoiserModel model =
      resume ? DenoiserModel::from_checkpoint(resume->to_checkpoint())
             : DenoiserModel::initialize(arch, cfg.num_train_steps, parse_beta_schedule(cfg.beta_schedule), cfg.seed);
  if (model.schedule_id() != schedule_fingerprint(sched)) {
    throw TrainingError("train_denoiser: resume schedule differs from checkpoint schedule");
  }
  TrainingState& st = model.training();
  if (resume && st.seed != cfg.seed) throw TrainingError("train_denoiser: resume seed differs from checkpoint seed");
  st.seed = cfg.seed;

  const int n_total = static_cast<int>(corpus.size());
  const int n_val = held_out_count(n_total, cfg.held_out_fraction);
  const auto train = corpus.first(static_cast<std::size_t>(n_total - n_val));
  const auto val = n_val ? corpus.last(static_cast<std::size_t>(n_val)) : train;

  const Tensor plain = encode_all(vae, train, false);
  const Tensor latents = Tensor::stack(std::vector<Tensor>{plain, encode_all(vae, train, true)});
  std::vector<int> labels;
  for (int rep = 0; rep < 2; ++rep)
    for (const auto& s : train) labels.push_back(s.label);
  const Tensor val_latents = encode_all(vae, val, false);
  std::vector<int> val_labels;
  for (const auto& s : val) val_labels.push_back(s.label);

  nn::ParamSet& ps = model.params();
  if (!resume) model.set_held_out_initial(held_out_eps_mse(model, sched, val_latents, val_labels, cfg.seed));
  nn::Adam opt(ps.vars(), {.learning_rate = cfg.learning_rate, .grad_clip = 1.0f});
  if (!st.optimizer_moments.empty()) opt.load_state(st.optimizer_moments, st.optimizer_steps);

  const std::size_t per = latents.size() / static_cast<std::size_t>(latents.dim(0));
  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    ps.set_requires_grad(true);
    opt.set_learning_rate(cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<float>(epoch)));
    const auto order = epoch_order(latents.dim(0), cfg.seed, epoch);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x3000u + static_cast<std::uint64_t>(epoch)));
    std::uniform_int_distribution<int> step(0, sched.num_train_steps - 1);
    std::uniform_real_distribution<float> unit(0.0f, 1.0f);
    double sum = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - b);
      Tensor z0({static_cast<int>(n), latents.dim(1), latents.dim(2), latents.dim(3)});
      std::vector<int> steps(n), lab(n), rows(n);
      for (std::size_t i = 0; i < n; ++i) {
        const auto src = static_cast<std::size_t>(order[b + i]);
        std::memcpy(z0.data() + i * per, latents.data() + src * per, per * sizeof(float));
        steps[i] = step(rng);
        lab[i] = unit(rng) < cfg.p_uncond ? Vocabulary::kNone : labels[src];
        rows[i] = static_cast<int>(i);
      }
      const Tensor eps = Tensor::randn(z0.shape(), rng);
      const ag::Var pred = model.forward(ag::Var(noise_per_sample(sched, z0, steps, eps)), model.condition(steps, lab), rows);
      const ag::Var loss = ag::mse(pred, eps);
      require_finite(loss.value()[0], "train_denoiser", epoch, batches);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    ps.set_requires_grad(false);
    st.loss_curve.push_back(sum / std::max(batches, 1));
    st.val_curve.push_back(held_out_eps_mse(model, sched, val_latents, val_labels, cfg.seed));
    st.epochs_done = epoch + 1;
  }
  ps.set_requires_grad(false);
  st.optimizer_moments = opt.state();
  st.optimizer_steps = opt.steps_taken();
  return model;
}

}  // namespace bld
