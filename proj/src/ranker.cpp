#include "bld/ranker.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "bld/vision.hpp"

namespace bld {

EmbedderTrainConfig EmbedderTrainConfig::from_json(const nlohmann::json& j) {
  EmbedderTrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.temperature = j.value("temperature", c.temperature);
  c.embed_dim = j.value("embed_dim", c.embed_dim);
  c.hidden = j.value("hidden", c.hidden);
  c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
  return c;
}

EmbedderModel EmbedderModel::initialize(int embed_dim, int hidden, std::uint64_t seed) {
  if (embed_dim < 1 || hidden < 1) throw std::invalid_argument("embedder dimensions must be positive");
  EmbedderModel m;
  m.embed_dim_ = embed_dim;
  m.hidden_ = hidden;
  std::mt19937_64 rng(mix_seed(seed, 0xE0));
  trunk::add_params(m.params_, hidden, rng);
  nn::add_linear(m.params_, "proj", hidden, embed_dim, rng);
  m.params_.add("labels", Tensor::randn({Vocabulary::kNumClasses + 1, embed_dim}, rng));
  m.training_.seed = seed;
  return m;
}

Tensor EmbedderModel::embed_images(const Tensor& nchw) const {
  std::vector<Tensor> parts;
  for (int b = 0; b < nchw.dim(0); b += 64) {
    const int n = std::min(64, nchw.dim(0) - b);
    parts.push_back(nn::linear(params_, "proj", trunk::features(params_, ag::Var(nchw.batch_slice(b, n)))).value());
  }
  return Tensor::stack(parts);
}

Tensor EmbedderModel::embed_prompt(const Prompt& d) const {
  if (d.label < 0 || d.label > Vocabulary::kNone) throw UnknownPrompt("unknown prompt label " + std::to_string(d.label));
  return params_.at("labels").value().batch_slice(d.label).reshaped({embed_dim_});
}

ag::Var EmbedderModel::logits(const ag::Var& x, float temperature) const {
  const ag::Var img = ag::l2_normalize_rows(nn::linear(params_, "proj", trunk::features(params_, x)));
  const ag::Var lab = ag::l2_normalize_rows(params_.at("labels"));
  return ag::scale(ag::matmul_nt(img, lab), 1.0f / temperature);
}

Checkpoint EmbedderModel::to_checkpoint() const {
  Checkpoint ck;
  ck.type = kCheckpointType;
  ck.header["embed_dim"] = embed_dim_;
  ck.header["hidden"] = hidden_;
  ck.header["held_out_accuracy"] = held_out_accuracy_;
  ck.add_params(params_, "net.");
  training_.store(ck);
  return ck;
}

EmbedderModel EmbedderModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.type != kCheckpointType) throw CheckpointError("expected an embedder checkpoint, got '" + ck.type + "'");
  EmbedderModel m = initialize(ck.header.at("embed_dim").get<int>(), ck.header.at("hidden").get<int>(), 0);
  m.params_.assign_from(ck.take_params("net."));
  m.held_out_accuracy_ = ck.header.value("held_out_accuracy", 0.0);
  m.training_ = TrainingState::load(ck);
  return m;
}

void EmbedderModel::save(const std::filesystem::path& p) const { save_checkpoint(p, to_checkpoint()); }

EmbedderModel EmbedderModel::load(const std::filesystem::path& p) {
  return from_checkpoint(load_checkpoint(p, kCheckpointType));
}

namespace {

/// Fixed masked views of the held-out scenes.
std::pair<Tensor, std::vector<int>> held_out_views(std::span<const Scene> scenes, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0xA11));
  std::vector<Tensor> imgs;
  std::vector<int> labels;
  for (const Scene& s : scenes) {
    MaskedView v = sample_masked_view(s, rng);
    imgs.push_back(v.image.tensor());
    labels.push_back(v.label);
  }
  std::vector<Tensor> batched;
  for (const Tensor& t : imgs) batched.push_back(t.reshaped({1, t.dim(0), t.dim(1), t.dim(2)}));
  return {Tensor::stack(batched), labels};
}

int argmax_row(const Tensor& m, int row) {
  const int k = m.dim(1);
  const float* p = m.data() + static_cast<std::size_t>(row) * k;
  return static_cast<int>(std::max_element(p, p + k) - p);
}

}  // namespace

EmbedderModel train_embedder(std::span<const Scene> corpus, const EmbedderTrainConfig& cfg,
                             const EmbedderModel* resume) {
  if (corpus.empty()) throw TrainingError("train_embedder: empty corpus");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw TrainingError("train_embedder: invalid epochs or batch size");
  EmbedderModel model = resume ? EmbedderModel::from_checkpoint(resume->to_checkpoint())
                               : EmbedderModel::initialize(cfg.embed_dim, cfg.hidden, cfg.seed);
  TrainingState& st = model.training();
  if (resume && st.seed != cfg.seed) throw TrainingError("train_embedder: resume seed differs from checkpoint seed");
  const int n_total = static_cast<int>(corpus.size());
  const int n_val = held_out_count(n_total, cfg.held_out_fraction);
  const auto train = corpus.first(static_cast<std::size_t>(n_total - n_val));
  const auto val = n_val ? corpus.last(static_cast<std::size_t>(n_val)) : train;
  const auto [val_x, val_y] = held_out_views(val, cfg.seed);

  nn::ParamSet& ps = model.params();
  nn::Adam opt(ps.vars(), {.learning_rate = cfg.learning_rate, .grad_clip = 1.0f});
  if (!st.optimizer_moments.empty()) opt.load_state(st.optimizer_moments, st.optimizer_steps);
  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    ps.set_requires_grad(true);
    opt.set_learning_rate(cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<float>(epoch)));
    const auto order = epoch_order(static_cast<int>(train.size()), cfg.seed, epoch);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x4000u + static_cast<std::uint64_t>(epoch)));
    double sum = 0.0;
    int batches = 0;
    for (std::size_t b = 0; b < order.size(); b += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - b);
      std::vector<Tensor> xs;
      std::vector<int> ys;
      for (std::size_t i = 0; i < n; ++i) {
        MaskedView v = sample_masked_view(train[static_cast<std::size_t>(order[b + i])], rng);
        xs.push_back(v.image.batched());
        ys.push_back(v.label);
      }
      const ag::Var loss = ag::cross_entropy(model.logits(ag::Var(Tensor::stack(xs)), cfg.temperature), ys);
      require_finite(loss.value()[0], "train_embedder", epoch, batches);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    ps.set_requires_grad(false);
    st.loss_curve.push_back(sum / std::max(batches, 1));
    const Tensor lg = model.logits(ag::Var(val_x), cfg.temperature).value();
    int correct = 0;
    for (int i = 0; i < lg.dim(0); ++i) correct += argmax_row(lg, i) == val_y[static_cast<std::size_t>(i)];
    st.val_curve.push_back(static_cast<double>(correct) / std::max(lg.dim(0), 1));
    st.epochs_done = epoch + 1;
  }
  ps.set_requires_grad(false);
  if (!st.val_curve.empty()) model.set_held_out_accuracy(st.val_curve.back());
  st.optimizer_moments = opt.state();
  st.optimizer_steps = opt.steps_taken();
  return model;
}

double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw ShapeError("cosine_similarity: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += static_cast<double>(a[i]) * b[i];
    na += static_cast<double>(a[i]) * a[i];
    nb += static_cast<double>(b[i]) * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return std::clamp(dot / (std::sqrt(na) * std::sqrt(nb)), -1.0, 1.0);
}

double score(const EmbedderModel& emb, const Image& image, const Mask& m, const Prompt& d) {
  const Tensor e = emb.embed_images(masked(image, m).batched());
  return cosine_similarity(e.values(), emb.embed_prompt(d).values());
}

Ranking rank_embeddings(const Tensor& image_embeddings, std::span<const float> prompt_embedding) {
  if (image_embeddings.rank() != 2 || image_embeddings.dim(0) == 0) throw std::invalid_argument("rank: empty batch");
  const int n = image_embeddings.dim(0), d = image_embeddings.dim(1);
  Ranking r;
  for (int i = 0; i < n; ++i) {
    r.scores.push_back(cosine_similarity(
        std::span<const float>(image_embeddings.data() + static_cast<std::size_t>(i) * d, static_cast<std::size_t>(d)),
        prompt_embedding));
  }
  r.order.resize(static_cast<std::size_t>(n));
  std::iota(r.order.begin(), r.order.end(), 0);
  std::stable_sort(r.order.begin(), r.order.end(),
                   [&](int a, int b) { return r.scores[static_cast<std::size_t>(a)] > r.scores[static_cast<std::size_t>(b)]; });
  return r;
}

Ranking rank_batch(const EmbedderModel& emb, const std::vector<Image>& batch, const Mask& m, const Prompt& d) {
  if (batch.empty()) throw std::invalid_argument("rank_batch: empty batch");
  std::vector<Tensor> xs;
  for (const Image& img : batch) xs.push_back(masked(img, m).batched());
  return rank_embeddings(emb.embed_images(Tensor::stack(xs)), emb.embed_prompt(d).values());
}

}  // namespace bld
