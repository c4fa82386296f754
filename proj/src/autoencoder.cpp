#include "bld/autoencoder.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace bld {

Latent Latent::from_batch(const Tensor& nchw, int index, int factor) {
  Tensor one = nchw.batch_slice(index);
  return {one.reshaped({nchw.dim(1), nchw.dim(2), nchw.dim(3)}), factor};
}

nlohmann::json VaeArch::to_json() const {
  return {{"image_size", image_size}, {"latent_channels", latent_channels}, {"factor", factor}, {"width", width}};
}

VaeArch VaeArch::from_json(const nlohmann::json& j) {
  VaeArch a;
  a.image_size = j.value("image_size", a.image_size);
  a.latent_channels = j.value("latent_channels", a.latent_channels);
  a.factor = j.value("factor", a.factor);
  a.width = j.value("width", a.width);
  if (a.factor != 4) throw std::invalid_argument("VAE supports factor 4 only");
  if (a.image_size % a.factor != 0) throw std::invalid_argument("image size must be divisible by the VAE factor");
  return a;
}

VaeTrainConfig VaeTrainConfig::from_json(const nlohmann::json& j) {
  VaeTrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.kl_weight = j.value("kl_weight", c.kl_weight);
  c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  return c;
}

VaeModel VaeModel::initialize(const VaeArch& arch, std::uint64_t seed) {
  VaeArch a = VaeArch::from_json(arch.to_json());
  VaeModel m;
  m.arch_ = a;
  std::mt19937_64 rng(mix_seed(seed, 0xAE));
  const int w = a.width, c = a.latent_channels;
  nn::add_conv(m.encoder_, "e0", 3, w, 3, rng);
  nn::add_conv(m.encoder_, "e1", w, w, 3, rng);
  nn::add_conv(m.encoder_, "e2", w, 2 * w, 3, rng);
  nn::add_conv(m.encoder_, "e3", 2 * w, 2 * w, 3, rng);
  nn::add_conv(m.encoder_, "e4", 2 * w, 2 * c, 1, rng, 0.5f);
  nn::add_conv(m.decoder_, "d0", c, 2 * w, 3, rng);
  nn::add_conv(m.decoder_, "d1", 2 * w, 2 * w, 3, rng);
  nn::add_conv(m.decoder_, "d2", 2 * w, w, 3, rng);
  nn::add_conv(m.decoder_, "d3", w, w, 3, rng);
  nn::add_conv(m.decoder_, "d4", w, w / 2, 3, rng);
  nn::add_conv(m.decoder_, "d5", w / 2, 3, 3, rng, 0.5f);
  m.training_.seed = seed;
  return m;
}

std::pair<ag::Var, ag::Var> VaeModel::encode_with(const nn::ParamSet& enc, const ag::Var& x) const {
  ag::Var h = ag::silu(nn::conv(enc, "e0", x, 2));
  h = ag::silu(nn::conv(enc, "e1", h));
  h = ag::silu(nn::conv(enc, "e2", h, 2));
  h = ag::silu(nn::conv(enc, "e3", h));
  h = nn::conv(enc, "e4", h);
  const int c = arch_.latent_channels;
  return {ag::slice_channels(h, 0, c), ag::slice_channels(h, c, c)};
}

ag::Var VaeModel::decode_with(const nn::ParamSet& dec, const ag::Var& z) const {
  ag::Var h = ag::scale(z, 1.0f / latent_scale_);
  h = ag::silu(nn::conv(dec, "d0", h));
  h = ag::add(h, ag::silu(nn::conv(dec, "d1", h)));
  h = ag::upsample2x(h);
  h = ag::silu(nn::conv(dec, "d2", h));
  h = ag::add(h, ag::silu(nn::conv(dec, "d3", h)));
  h = ag::upsample2x(h);
  h = ag::silu(nn::conv(dec, "d4", h));
  return nn::conv(dec, "d5", h);
}

void VaeModel::check_image(const Image& x) const {
  if (x.channels() != 3 || x.height() != arch_.image_size || x.width() != arch_.image_size) {
    throw ShapeError("VAE expects " + std::to_string(arch_.image_size) + "x" + std::to_string(arch_.image_size) +
                     " RGB input, got " + shape_str(x.tensor().shape()));
  }
}

void VaeModel::check_latent(const Tensor& z) const {
  const int s = arch_.image_size / arch_.factor;
  if (z.rank() != 4 || z.dim(1) != arch_.latent_channels || z.dim(2) != s || z.dim(3) != s) {
    throw ShapeError("VAE latent must be [N," + std::to_string(arch_.latent_channels) + "," + std::to_string(s) + "," +
                     std::to_string(s) + "], got " + shape_str(z.shape()));
  }
}

Latent VaeModel::encode(const Image& x, std::optional<std::uint64_t> seed) const {
  check_image(x);
  auto [mean, logvar] = encode_with(encoder_, ag::Var(x.batched()));
  Tensor z = mean.value();
  if (seed) {
    std::mt19937_64 rng(*seed);
    const Tensor eps = Tensor::randn(z.shape(), rng);
    for (std::size_t i = 0; i < z.size(); ++i) z[i] += std::exp(0.5f * logvar.value()[i]) * eps[i];
  }
  for (auto& v : z.values()) v *= latent_scale_;
  return Latent::from_batch(z, 0, arch_.factor);
}

Image VaeModel::decode(const Latent& z) const {
  if (z.factor != arch_.factor) throw ShapeError("latent factor does not match the VAE");
  return Image::from_batch(decode_batch(z.batched()), 0);
}

Tensor VaeModel::encode_mean_batch(const Tensor& images) const {
  std::vector<Tensor> parts;
  for (int b = 0; b < images.dim(0); b += 32) {
    const int n = std::min(32, images.dim(0) - b);
    Tensor mean = encode_with(encoder_, ag::Var(images.batch_slice(b, n))).first.value();
    for (auto& v : mean.values()) v *= latent_scale_;
    parts.push_back(std::move(mean));
  }
  return Tensor::stack(parts);
}

Tensor VaeModel::decode_batch(const Tensor& latents) const {
  check_latent(latents);
  std::vector<Tensor> parts;
  for (int b = 0; b < latents.dim(0); b += 32) {
    const int n = std::min(32, latents.dim(0) - b);
    Tensor out = decode_with(decoder_, ag::Var(latents.batch_slice(b, n))).value();
    for (auto& v : out.values()) v = std::clamp(v, -1.0f, 1.0f);
    parts.push_back(std::move(out));
  }
  return Tensor::stack(parts);
}

Checkpoint VaeModel::to_checkpoint() const {
  Checkpoint ck;
  ck.type = kCheckpointType;
  ck.header["arch"] = arch_.to_json();
  ck.header["latent_scale"] = latent_scale_;
  ck.header["held_out_mse"] = held_out_mse_;
  ck.add_params(encoder_, "enc.");
  ck.add_params(decoder_, "dec.");
  training_.store(ck);
  return ck;
}

VaeModel VaeModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.type != kCheckpointType) throw CheckpointError("expected a vae checkpoint, got '" + ck.type + "'");
  VaeModel m = initialize(VaeArch::from_json(ck.header.at("arch")), 0);
  m.latent_scale_ = ck.header.at("latent_scale").get<float>();
  m.held_out_mse_ = ck.header.value("held_out_mse", 0.0);
  m.encoder_.assign_from(ck.take_params("enc."));
  m.decoder_.assign_from(ck.take_params("dec."));
  m.training_ = TrainingState::load(ck);
  return m;
}

void VaeModel::save(const std::filesystem::path& p) const { save_checkpoint(p, to_checkpoint()); }

VaeModel VaeModel::load(const std::filesystem::path& p) { return from_checkpoint(load_checkpoint(p, kCheckpointType)); }

double reconstruction_mse(const VaeModel& vae, std::span<const Scene> scenes) {
  if (scenes.empty()) return 0.0;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t b = 0; b < scenes.size(); b += 32) {
    const std::size_t n = std::min<std::size_t>(32, scenes.size() - b);
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), static_cast<int>(b));
    const Tensor x = gather_images(scenes, idx);
    const Tensor rec = vae.decode_batch(vae.encode_mean_batch(x));
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double d = rec[i] - x[i];
      total += d * d;
    }
    count += x.size();
  }
  return total / static_cast<double>(count);
}

VaeModel train_vae(std::span<const Scene> corpus, const VaeTrainConfig& cfg, const VaeArch& arch, const VaeModel* resume) {
  if (corpus.empty()) throw TrainingError("train_vae: empty corpus");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw TrainingError("train_vae: invalid epochs or batch size");
  VaeModel model = resume ? VaeModel::from_checkpoint(resume->to_checkpoint()) : VaeModel::initialize(arch, cfg.seed);
  TrainingState& st = model.training();
  if (resume && st.seed != cfg.seed) throw TrainingError("train_vae: resume seed differs from checkpoint seed");
  st.seed = cfg.seed;

  const int n_total = static_cast<int>(corpus.size());
  const int n_val = held_out_count(n_total, cfg.held_out_fraction);
  const std::span<const Scene> train = corpus.first(static_cast<std::size_t>(n_total - n_val));
  const std::span<const Scene> val = n_val ? corpus.last(static_cast<std::size_t>(n_val)) : train;

  // latent scaling is a post-training statistic; the training graph uses raw means
  model.set_latent_scale(1.0f);
  nn::ParamSet& enc = model.encoder_params();
  nn::ParamSet& dec = model.decoder_params();
  std::vector<ag::Var> params = enc.vars();
  for (auto& v : dec.vars()) params.push_back(v);
  nn::Adam opt(params, {.learning_rate = cfg.learning_rate, .grad_clip = 1.0f});
  if (!st.optimizer_moments.empty()) opt.load_state(st.optimizer_moments, st.optimizer_steps);
  enc.set_requires_grad(true);
  dec.set_requires_grad(true);

  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    const auto order = epoch_order(static_cast<int>(train.size()), cfg.seed, epoch);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x2000u + static_cast<std::uint64_t>(epoch)));
    opt.set_learning_rate(cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<float>(epoch)));
    double sum = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - b);
      const Tensor x = gather_images(train, std::span<const int>(order).subspan(b, n));
      auto [mean, logvar] = model.encode_with(enc, ag::Var(x));
      const Tensor eps = Tensor::randn(mean.shape(), rng);
      const ag::Var z = ag::add(mean, ag::mul(ag::exp(ag::scale(logvar, 0.5f)), ag::Var(eps)));
      const ag::Var rec = model.decode_with(dec, z);
      const ag::Var loss = ag::add(ag::mse(rec, x), ag::scale(ag::gaussian_kl(mean, logvar), cfg.kl_weight));
      require_finite(loss.value()[0], "train_vae", epoch, batches);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    st.loss_curve.push_back(sum / std::max(batches, 1));
    enc.set_requires_grad(false);
    dec.set_requires_grad(false);
    st.val_curve.push_back(reconstruction_mse(model, val));
    enc.set_requires_grad(true);
    dec.set_requires_grad(true);
    st.epochs_done = epoch + 1;
  }
  enc.set_requires_grad(false);
  dec.set_requires_grad(false);
  st.optimizer_moments = opt.state();
  st.optimizer_steps = opt.steps_taken();

  double sq = 0.0, s = 0.0;
  std::size_t cnt = 0;
  for (std::size_t b = 0; b < train.size(); b += 32) {
    const std::size_t n = std::min<std::size_t>(32, train.size() - b);
    std::vector<int> idx(n);
    std::iota(idx.begin(), idx.end(), static_cast<int>(b));
    const Tensor m = model.encode_mean_batch(gather_images(train, idx));
    for (float v : m.values()) {
      s += v;
      sq += static_cast<double>(v) * v;
    }
    cnt += m.size();
  }
  const double mu = s / static_cast<double>(cnt);
  const double sd = std::sqrt(std::max(sq / static_cast<double>(cnt) - mu * mu, 1e-12));
  model.set_latent_scale(static_cast<float>(1.0 / sd));
  model.set_held_out_mse(reconstruction_mse(model, val));
  return model;
}

}  // namespace bld
