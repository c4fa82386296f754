#include "bld/evalharness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "bld/vision.hpp"

namespace bld {

ClassifierTrainConfig ClassifierTrainConfig::from_json(const nlohmann::json& j) {
  ClassifierTrainConfig c;
  c.seed = j.value("seed", c.seed);
  c.epochs = j.value("epochs", c.epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.lr_decay = j.value("lr_decay", c.lr_decay);
  c.hidden = j.value("hidden", c.hidden);
  c.held_out_fraction = j.value("held_out_fraction", c.held_out_fraction);
  return c;
}

ClassifierModel ClassifierModel::initialize(int hidden, std::uint64_t seed) {
  if (hidden < 1) throw std::invalid_argument("classifier hidden width must be positive");
  ClassifierModel m;
  m.hidden_ = hidden;
  std::mt19937_64 rng(mix_seed(seed, 0xC1));
  trunk::add_params(m.params_, hidden, rng);
  nn::add_linear(m.params_, "head", hidden, Vocabulary::kNumClasses + 1, rng);
  m.training_.seed = seed;
  return m;
}

ag::Var ClassifierModel::logits(const ag::Var& x) const {
  return nn::linear(params_, "head", trunk::features(params_, x));
}

Tensor ClassifierModel::features(const Tensor& nchw) const {
  std::vector<Tensor> parts;
  for (int b = 0; b < nchw.dim(0); b += 64) {
    const int n = std::min(64, nchw.dim(0) - b);
    parts.push_back(trunk::features(params_, ag::Var(nchw.batch_slice(b, n))).value());
  }
  return Tensor::stack(parts);
}

std::vector<int> ClassifierModel::predict(const Tensor& nchw) const {
  std::vector<int> out;
  for (int b = 0; b < nchw.dim(0); b += 64) {
    const int n = std::min(64, nchw.dim(0) - b);
    const Tensor lg = logits(ag::Var(nchw.batch_slice(b, n))).value();
    const int k = lg.dim(1);
    for (int i = 0; i < n; ++i) {
      const float* p = lg.data() + static_cast<std::size_t>(i) * k;
      out.push_back(static_cast<int>(std::max_element(p, p + k) - p));
    }
  }
  return out;
}

int ClassifierModel::predict(const Image& img) const { return predict(img.batched())[0]; }

Checkpoint ClassifierModel::to_checkpoint() const {
  Checkpoint ck;
  ck.type = kCheckpointType;
  ck.header["hidden"] = hidden_;
  ck.header["held_out_accuracy"] = held_out_accuracy_;
  ck.add_params(params_, "net.");
  training_.store(ck);
  return ck;
}

ClassifierModel ClassifierModel::from_checkpoint(const Checkpoint& ck) {
  if (ck.type != kCheckpointType) throw CheckpointError("expected a classifier checkpoint, got '" + ck.type + "'");
  ClassifierModel m = initialize(ck.header.at("hidden").get<int>(), 0);
  m.params_.assign_from(ck.take_params("net."));
  m.held_out_accuracy_ = ck.header.value("held_out_accuracy", 0.0);
  m.training_ = TrainingState::load(ck);
  return m;
}

void ClassifierModel::save(const std::filesystem::path& p) const { save_checkpoint(p, to_checkpoint()); }

ClassifierModel ClassifierModel::load(const std::filesystem::path& p) {
  return from_checkpoint(load_checkpoint(p, kCheckpointType));
}

ClassifierModel train_classifier(std::span<const Scene> corpus, const ClassifierTrainConfig& cfg,
                                 const ClassifierModel* resume) {
  if (corpus.empty()) throw TrainingError("train_classifier: empty corpus");
  if (cfg.epochs < 0 || cfg.batch_size < 1) throw TrainingError("train_classifier: invalid epochs or batch size");
  ClassifierModel model =
      resume ? ClassifierModel::from_checkpoint(resume->to_checkpoint()) : ClassifierModel::initialize(cfg.hidden, cfg.seed);
  TrainingState& st = model.training_;
  if (resume && st.seed != cfg.seed) throw TrainingError("train_classifier: resume seed differs from checkpoint seed");
  const int n_total = static_cast<int>(corpus.size());
  const int n_val = held_out_count(n_total, cfg.held_out_fraction);
  const auto train = corpus.first(static_cast<std::size_t>(n_total - n_val));
  const auto val = n_val ? corpus.last(static_cast<std::size_t>(n_val)) : train;

  std::mt19937_64 val_rng(mix_seed(cfg.seed, 0xA12));
  std::vector<Tensor> val_x;
  std::vector<int> val_y;
  for (const Scene& s : val) {
    MaskedView v = sample_masked_view(s, val_rng);
    val_x.push_back(v.image.batched());
    val_y.push_back(v.label);
  }
  const Tensor val_batch = Tensor::stack(val_x);

  nn::ParamSet& ps = model.params_;
  nn::Adam opt(ps.vars(), {.learning_rate = cfg.learning_rate, .grad_clip = 1.0f});
  if (!st.optimizer_moments.empty()) opt.load_state(st.optimizer_moments, st.optimizer_steps);
  for (int epoch = st.epochs_done; epoch < cfg.epochs; ++epoch) {
    ps.set_requires_grad(true);
    opt.set_learning_rate(cfg.learning_rate * std::pow(cfg.lr_decay, static_cast<float>(epoch)));
    const auto order = epoch_order(static_cast<int>(train.size()), cfg.seed, epoch);
    std::mt19937_64 rng(mix_seed(cfg.seed, 0x5000u + static_cast<std::uint64_t>(epoch)));
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
      const ag::Var loss = ag::cross_entropy(model.logits(ag::Var(Tensor::stack(xs))), ys);
      require_finite(loss.value()[0], "train_classifier", epoch, batches);
      opt.zero_grad();
      ag::backward(loss);
      opt.step();
      sum += loss.value()[0];
      ++batches;
    }
    ps.set_requires_grad(false);
    st.loss_curve.push_back(sum / std::max(batches, 1));
    const auto pred = model.predict(val_batch);
    int correct = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == val_y[i];
    st.val_curve.push_back(static_cast<double>(correct) / std::max<std::size_t>(pred.size(), 1));
    st.epochs_done = epoch + 1;
  }
  ps.set_requires_grad(false);
  if (!st.val_curve.empty()) model.held_out_accuracy_ = st.val_curve.back();
  st.optimizer_moments = opt.state();
  st.optimizer_steps = opt.steps_taken();
  return model;
}

Rect random_mask_rect(std::uint64_t seed, int height, int width) {
  if (height < 5 || width < 5) throw std::invalid_argument("random_mask: image must be at least 5x5");
  std::mt19937_64 rng(seed);
  return random_rect(rng, height, width);
}

Mask random_mask(std::uint64_t seed, int height, int width) {
  return rect_mask(random_mask_rect(seed, height, width), height, width);
}

int EvalCase::correct() const {
  return static_cast<int>(std::count(verdicts.begin(), verdicts.end(), target));
}

double batch_precision(std::span<const EvalCase> cases) {
  if (cases.empty()) throw std::invalid_argument("batch_precision: no cases");
  double sum = 0.0;
  for (const EvalCase& c : cases) {
    if (c.verdicts.empty()) throw std::invalid_argument("batch_precision: case without predictions");
    sum += static_cast<double>(c.correct()) / c.batch_size();
  }
  return sum / static_cast<double>(cases.size());
}

double best_result_precision(std::span<const EvalCase> cases) {
  if (cases.empty()) throw std::invalid_argument("best_result_precision: no cases");
  int hits = 0;
  for (const EvalCase& c : cases) {
    if (c.ranking.empty()) throw std::invalid_argument("best_result_precision: case without ranking");
    hits += c.verdicts.at(static_cast<std::size_t>(c.ranking.front())) == c.target;
  }
  return static_cast<double>(hits) / static_cast<double>(cases.size());
}

Diversity batch_diversity(const EvalCase& c) {
  std::vector<const std::vector<float>*> good;
  for (std::size_t i = 0; i < c.verdicts.size(); ++i)
    if (c.verdicts[i] == c.target) good.push_back(&c.features.at(i));
  if (good.size() < 2) return {0.0, true};
  double sum = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < good.size(); ++i)
    for (std::size_t j = i + 1; j < good.size(); ++j) {
      const auto& a = *good[i];
      const auto& b = *good[j];
      if (a.size() != b.size()) throw ShapeError("batch_diversity: feature length mismatch");
      double d2 = 0.0;
      for (std::size_t k = 0; k < a.size(); ++k) d2 += (static_cast<double>(a[k]) - b[k]) * (static_cast<double>(a[k]) - b[k]);
      sum += std::sqrt(d2);
      ++pairs;
    }
  return {sum / pairs, false};
}

void judge_case(const ClassifierModel& cls, EvalCase& c, const std::vector<Image>& predictions, const Mask& m) {
  std::vector<Tensor> xs;
  for (const Image& img : predictions) xs.push_back(masked(img, m).batched());
  const Tensor batch = Tensor::stack(xs);
  c.verdicts = cls.predict(batch);
  const Tensor f = cls.features(batch);
  const int d = f.dim(1);
  c.features.clear();
  for (int i = 0; i < f.dim(0); ++i) {
    std::vector<float> row(f.data() + static_cast<std::size_t>(i) * d, f.data() + static_cast<std::size_t>(i + 1) * d);
    double n2 = 0.0;
    for (float v : row) n2 += static_cast<double>(v) * v;
    const float inv = n2 > 0.0 ? static_cast<float>(1.0 / std::sqrt(n2)) : 0.0f;
    for (float& v : row) v *= inv;
    c.features.push_back(std::move(row));
  }
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json rows = nlohmann::json::array();
  for (const EvalCase& c : cases) {
    const Diversity div = bld::batch_diversity(c);
    rows.push_back({{"image_id", c.image_id},
                    {"mask", {c.mask.y, c.mask.x, c.mask.h, c.mask.w}},
                    {"target", Vocabulary::name(c.target)},
                    {"verdicts", c.verdicts},
                    {"scores", c.scores},
                    {"ranking", c.ranking},
                    {"correct", c.correct()},
                    {"diversity", div.value},
                    {"diversity_insufficient", div.insufficient}});
  }
  return {{"seed", seed},
          {"n_cases", cases.size()},
          {"batch_precision", batch_precision},
          {"best_result_precision", best_result_precision},
          {"batch_diversity", batch_diversity},
          {"diversity_cases", diversity_cases},
          {"cases", rows}};
}

std::string EvalReport::to_csv() const {
  std::ostringstream out;
  out << "case,image_id,mask_y,mask_x,mask_h,mask_w,target,batch,correct,best_index,best_correct,diversity,"
         "diversity_insufficient\n";
  for (std::size_t i = 0; i < cases.size(); ++i) {
    const EvalCase& c = cases[i];
    const Diversity div = bld::batch_diversity(c);
    const int best = c.ranking.empty() ? -1 : c.ranking.front();
    const bool best_ok = best >= 0 && c.verdicts[static_cast<std::size_t>(best)] == c.target;
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", div.value);
    out << i << ',' << c.image_id << ',' << c.mask.y << ',' << c.mask.x << ',' << c.mask.h << ',' << c.mask.w << ','
        << Vocabulary::name(c.target) << ',' << c.batch_size() << ',' << c.correct() << ',' << best << ','
        << (best_ok ? 1 : 0) << ',' << buf << ',' << (div.insufficient ? 1 : 0) << '\n';
  }
  return out.str();
}

void EvalReport::write(const std::filesystem::path& dir) const {
  const std::string js = to_json().dump(2) + "\n";
  const std::string csv = to_csv();
  write_file(dir / "report.json", std::vector<std::uint8_t>(js.begin(), js.end()));
  write_file(dir / "report.csv", std::vector<std::uint8_t>(csv.begin(), csv.end()));
}

EvalReport run_eval(const ModelBundle& models, const ClassifierModel& cls, int n_cases, std::uint64_t seed,
                    const EditConfig& cfg) {
  if (n_cases < 1) throw std::invalid_argument("run_eval: n_cases must be >= 1");
  EvalReport rep;
  rep.seed = seed;
  for (int i = 0; i < n_cases; ++i) {
    std::mt19937_64 rng(mix_seed(seed, 0xE000u + static_cast<std::uint64_t>(i)));
    const std::uint64_t scene_seed = rng();
    const Scene scene = make_scene(scene_seed);
    EvalCase c;
    char id[32];
    std::snprintf(id, sizeof id, "scene-%016llx", static_cast<unsigned long long>(scene_seed));
    c.image_id = id;
    c.mask = random_mask_rect(rng(), scene.image.height(), scene.image.width());
    c.target = std::uniform_int_distribution<int>(0, Vocabulary::kNumClasses - 1)(rng);
    EditConfig case_cfg = cfg;
    case_cfg.seed = rng();
    const Mask m = rect_mask(c.mask, scene.image.height(), scene.image.width());
    const RankedEdit r = edit_and_rank(models, scene.image, m, Prompt::of_label(c.target), case_cfg);
    std::vector<Image> preds;
    for (const auto& cand : r.edit.candidates) preds.push_back(cand.image);
    judge_case(cls, c, preds, m);
    c.scores = r.ranking.scores;
    c.ranking = r.ranking.order;
    rep.cases.push_back(std::move(c));
  }
  rep.batch_precision = bld::batch_precision(rep.cases);
  rep.best_result_precision = bld::best_result_precision(rep.cases);
  double sum = 0.0;
  for (const EvalCase& c : rep.cases) {
    const Diversity d = bld::batch_diversity(c);
    if (d.insufficient) continue;
    sum += d.value;
    ++rep.diversity_cases;
  }
  rep.batch_diversity = rep.diversity_cases ? sum / rep.diversity_cases : 0.0;
  return rep;
}

}  // namespace bld
