#pragma once

#include <filesystem>

#include "bld/autoencoder.hpp"
#include "bld/denoiser.hpp"
#include "bld/editor.hpp"
#include "bld/ranker.hpp"

namespace bld {

/// The trained models an edit needs, loaded from one directory.
struct ModelBundle {
  VaeModel vae;
  DenoiserModel denoiser;
  EmbedderModel embedder;

  /// Reads vae.ckpt, denoiser.ckpt and embedder.ckpt.
  static ModelBundle load(const std::filesystem::path& dir);
  NoiseSchedule schedule(int num_sampler_steps) const { return denoiser.schedule(num_sampler_steps); }
};

struct RankedEdit {
  EditResult edit;
  Ranking ranking;
  std::vector<Image> images_by_rank() const;
};

/// Blended edit, reconstruction and ranking in one call.
RankedEdit edit_and_rank(const ModelBundle& models, const Image& x, const Mask& m, const Prompt& d,
                         const EditConfig& cfg);

}  // namespace bld
