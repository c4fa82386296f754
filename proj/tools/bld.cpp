#include <CLI11.hpp>

#include <csignal>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "bld/evalharness.hpp"
#include "bld/service.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json load_json(const fs::path& p) {
  const auto bytes = bld::read_file(p);
  try {
    return json::parse(bytes.begin(), bytes.end());
  } catch (const json::exception& e) {
    throw std::invalid_argument(p.string() + ": " + e.what());
  }
}

/// A recipe file may hold one section per component; a bare config is used as is.
json section(const json& j, const std::string& name) {
  if (j.contains(name) && j.at(name).is_object()) return j.at(name);
  return j;
}

std::vector<bld::Scene> load_corpus(const fs::path& dir) {
  auto scenes = bld::read_corpus(dir);
  if (scenes.empty()) throw std::invalid_argument("corpus " + dir.string() + " is empty");
  return scenes;
}

void print_curve(const char* what, const bld::TrainingState& st) {
  for (std::size_t e = 0; e < st.loss_curve.size(); ++e) {
    std::printf("%s epoch %zu loss %.6f", what, e + 1, st.loss_curve[e]);
    if (e < st.val_curve.size()) std::printf(" val %.6f", st.val_curve[e]);
    std::printf("\n");
  }
}

struct TrainArgs {
  std::string component;
  fs::path corpus;
  fs::path config;
  fs::path out;
  fs::path vae;
  fs::path resume;
};

void cmd_train(const TrainArgs& a) {
  const json cfg = a.config.empty() ? json::object() : section(load_json(a.config), a.component);
  const auto corpus = load_corpus(a.corpus);
  if (a.out.has_parent_path()) fs::create_directories(a.out.parent_path());
  if (a.component == "vae") {
    std::optional<bld::VaeModel> prev;
    if (!a.resume.empty()) prev = bld::VaeModel::load(a.resume);
    const auto arch = bld::VaeArch::from_json(cfg.value("arch", json::object()));
    const auto m = bld::train_vae(corpus, bld::VaeTrainConfig::from_json(cfg), arch, prev ? &*prev : nullptr);
    print_curve("vae", m.training());
    std::printf("vae held-out mse %.6f\n", m.held_out_mse());
    m.save(a.out);
  } else if (a.component == "denoiser") {
    if (a.vae.empty()) throw std::invalid_argument("train denoiser needs --vae");
    const auto vae = bld::VaeModel::load(a.vae);
    std::optional<bld::DenoiserModel> prev;
    if (!a.resume.empty()) prev = bld::DenoiserModel::load(a.resume);
    const auto arch = bld::DenoiserArch::from_json(cfg.value("arch", json::object()));
    const auto m = bld::train_denoiser(vae, corpus, bld::DenoiserTrainConfig::from_json(cfg), arch, prev ? &*prev : nullptr);
    print_curve("denoiser", m.training());
    m.save(a.out);
  } else if (a.component == "embedder") {
    std::optional<bld::EmbedderModel> prev;
    if (!a.resume.empty()) prev = bld::EmbedderModel::load(a.resume);
    const auto m = bld::train_embedder(corpus, bld::EmbedderTrainConfig::from_json(cfg), prev ? &*prev : nullptr);
    print_curve("embedder", m.training());
    std::printf("embedder held-out accuracy %.4f\n", m.held_out_accuracy());
    m.save(a.out);
  } else if (a.component == "classifier") {
    std::optional<bld::ClassifierModel> prev;
    if (!a.resume.empty()) prev = bld::ClassifierModel::load(a.resume);
    const auto m = bld::train_classifier(corpus, bld::ClassifierTrainConfig::from_json(cfg), prev ? &*prev : nullptr);
    print_curve("classifier", m.training());
    std::printf("classifier held-out accuracy %.4f\n", m.held_out_accuracy());
    m.save(a.out);
  } else {
    throw std::invalid_argument("unknown component '" + a.component + "'");
  }
}

struct EditArgs {
  fs::path models = "models";
  fs::path image;
  fs::path mask;
  std::string prompt;
  fs::path out = "edit-out";
  fs::path config;
  std::optional<int> batch;
  std::optional<int> steps;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> reconstruct;
  std::optional<bool> shrink;
  std::optional<float> guidance;
  bool snapshots = false;
};

bld::EditConfig edit_config(const EditArgs& a) {
  bld::EditConfig c;
  if (!a.config.empty()) c = bld::EditConfig::from_json(section(load_json(a.config), "edit"), c);
  if (a.batch) c.batch_size = *a.batch;
  if (a.steps) c.num_sampler_steps = *a.steps;
  if (a.seed) c.seed = *a.seed;
  if (a.reconstruct) c.reconstruction.mode = bld::parse_reconstruction_mode(*a.reconstruct);
  if (a.shrink) c.progressive_shrinking = *a.shrink;
  if (a.guidance) c.guidance_scale = *a.guidance;
  c.keep_snapshots = c.keep_snapshots || a.snapshots;
  return c;
}

void cmd_edit(const EditArgs& a) {
  const auto models = bld::ModelBundle::load(a.models);
  const bld::Image x = bld::read_png(a.image);
  const bld::Mask m = bld::decode_mask_png(bld::read_file(a.mask));
  const bld::EditConfig cfg = edit_config(a);
  const auto r = bld::edit_and_rank(models, x, m, bld::Prompt::parse(a.prompt), cfg);

  fs::create_directories(a.out);
  json scores = json::array();
  for (std::size_t rank = 0; rank < r.ranking.order.size(); ++rank) {
    const int idx = r.ranking.order[rank];
    const auto& cand = r.edit.candidates[static_cast<std::size_t>(idx)];
    char name[32];
    std::snprintf(name, sizeof name, "rank_%02zu.png", rank + 1);
    bld::write_png(a.out / name, cand.image);
    if (!cand.snapshots.empty()) {
      std::snprintf(name, sizeof name, "process_%02zu.png", rank + 1);
      bld::visualize_process(cand.snapshots, a.out / name);
    }
    scores.push_back({{"rank", rank + 1}, {"index", idx}, {"score", r.ranking.scores[static_cast<std::size_t>(idx)]}});
    std::printf("rank %zu  index %d  score %.4f\n", rank + 1, idx, r.ranking.scores[static_cast<std::size_t>(idx)]);
  }
  const std::string text = json{{"prompt", a.prompt}, {"config", cfg.to_json()}, {"ranking", scores}}.dump(2) + "\n";
  bld::write_file(a.out / "ranking.json", std::vector<std::uint8_t>(text.begin(), text.end()));
}

void cmd_eval(const fs::path& models_dir, const fs::path& classifier, int n_cases, std::uint64_t seed,
              const EditArgs& edit, const fs::path& out) {
  const auto models = bld::ModelBundle::load(models_dir);
  const auto cls = bld::ClassifierModel::load(classifier.empty() ? models_dir / "classifier.ckpt" : classifier);
  const auto report = bld::run_eval(models, cls, n_cases, seed, edit_config(edit));
  report.write(out);
  std::printf("batch precision %.4f\nbest result precision %.4f\nbatch diversity %.4f (%d cases)\n",
              report.batch_precision, report.best_result_precision, report.batch_diversity, report.diversity_cases);
}

void cmd_serve(const fs::path& config, std::optional<int> port, const fs::path& models_dir, const fs::path& data_dir) {
  bld::ServiceConfig cfg = config.empty() ? bld::ServiceConfig{} : bld::ServiceConfig::from_file(config);
  cfg.apply_env();
  if (port) cfg.port = *port;
  if (!models_dir.empty()) cfg.model_dir = models_dir;
  if (!data_dir.empty()) cfg.data_dir = data_dir;

  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  auto models = std::make_shared<const bld::ModelBundle>(bld::ModelBundle::load(cfg.model_dir));
  bld::Service svc(cfg, models);
  const int bound = svc.start();
  std::printf("listening on http://%s:%d\n", cfg.host.c_str(), bound);
  std::fflush(stdout);
  int sig = 0;
  sigwait(&set, &sig);
  svc.stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Blended latent diffusion toolkit"};
  app.require_subcommand(1);

  int count = 1000;
  std::uint64_t data_seed = 7;
  fs::path data_out;
  auto* gen = app.add_subcommand("gen-data", "Write a procedural scene corpus");
  gen->add_option("--count", count, "Number of scenes")->check(CLI::NonNegativeNumber);
  gen->add_option("--seed", data_seed, "Corpus seed");
  gen->add_option("--out", data_out, "Output directory")->required();

  TrainArgs train;
  auto* tr = app.add_subcommand("train", "Train one model");
  tr->add_option("component", train.component, "vae, denoiser, embedder or classifier")
      ->required()
      ->check(CLI::IsMember({"vae", "denoiser", "embedder", "classifier"}));
  tr->add_option("--corpus", train.corpus, "Corpus directory")->required();
  tr->add_option("--config", train.config, "JSON config or recipe");
  tr->add_option("--out", train.out, "Checkpoint path")->required();
  tr->add_option("--vae", train.vae, "VAE checkpoint (denoiser only)");
  tr->add_option("--resume", train.resume, "Continue from this checkpoint");

  EditArgs edit;
  const auto edit_flags = [&edit](CLI::App* sub) {
    sub->add_option("--models", edit.models, "Directory holding vae/denoiser/embedder checkpoints");
    sub->add_option("--config", edit.config, "JSON edit config");
    sub->add_option("--batch", edit.batch, "Candidates per edit");
    sub->add_option("--steps", edit.steps, "Sampler steps");
    sub->add_option("--seed", edit.seed, "Edit seed");
    sub->add_option("--reconstruct", edit.reconstruct, "none, stitch, poisson, latent or weights")
        ->check(CLI::IsMember({"none", "stitch", "poisson", "latent", "weights"}));
    sub->add_flag("--shrink,!--no-shrink", edit.shrink, "Progressive mask shrinking");
    sub->add_option("--guidance", edit.guidance, "Classifier-free guidance scale");
  };
  auto* ed = app.add_subcommand("edit", "Edit an image inside a mask");
  edit_flags(ed);
  ed->add_option("--image", edit.image, "Input PNG")->required()->check(CLI::ExistingFile);
  ed->add_option("--mask", edit.mask, "Grayscale mask PNG, >127 is inside")->required()->check(CLI::ExistingFile);
  ed->add_option("--prompt", edit.prompt, "Class prompt, e.g. \"red circle\"")->required();
  ed->add_option("--out", edit.out, "Output directory");
  ed->add_flag("--snapshots", edit.snapshots, "Write per-candidate process strips");

  int n_cases = 20;
  std::uint64_t eval_seed = 0;
  fs::path classifier, eval_out = "eval-out";
  auto* ev = app.add_subcommand("eval", "Precision and diversity report");
  edit_flags(ev);
  ev->add_option("--cases", n_cases, "Number of random cases");
  ev->add_option("--eval-seed", eval_seed, "Seed for scenes, masks and targets");
  ev->add_option("--classifier", classifier, "Classifier checkpoint (default <models>/classifier.ckpt)");
  ev->add_option("--out", eval_out, "Report directory");

  fs::path serve_config, serve_models, serve_data;
  std::optional<int> serve_port;
  auto* sv = app.add_subcommand("serve", "Run the HTTP session service");
  sv->add_option("--config", serve_config, "Service JSON config");
  sv->add_option("--port", serve_port, "Port (0 picks one)");
  sv->add_option("--models", serve_models, "Model directory");
  sv->add_option("--data", serve_data, "Session storage directory");

  std::vector<fs::path> frames;
  fs::path strip_out;
  auto* vz = app.add_subcommand("visualize", "Join snapshot PNGs into a left-to-right strip");
  vz->add_option("frames", frames, "Snapshot PNGs, diffusion start first")->required()->check(CLI::ExistingFile);
  vz->add_option("--out", strip_out, "Strip PNG")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*gen) {
      const auto scenes = bld::make_corpus(count, data_seed);
      const std::string manifest = bld::write_corpus(data_out, scenes, data_seed);
      std::printf("wrote %d scenes to %s (manifest %s)\n", count, data_out.c_str(), bld::sha256_hex(manifest).c_str());
    } else if (*tr) {
      cmd_train(train);
    } else if (*ed) {
      cmd_edit(edit);
    } else if (*ev) {
      cmd_eval(edit.models, classifier, n_cases, eval_seed, edit, eval_out);
    } else if (*sv) {
      cmd_serve(serve_config, serve_port, serve_models, serve_data);
    } else if (*vz) {
      std::vector<bld::Image> snaps;
      for (const auto& f : frames) snaps.push_back(bld::read_png(f));
      bld::visualize_process(snaps, strip_out);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "bld: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
