#include "bld/pipeline.hpp"

namespace bld {

ModelBundle ModelBundle::load(const std::filesystem::path& dir) {
  return {VaeModel::load(dir / "vae.ckpt"), DenoiserModel::load(dir / "denoiser.ckpt"),
          EmbedderModel::load(dir / "embedder.ckpt")};
}

std::vector<Image> RankedEdit::images_by_rank() const {
  std::vector<Image> out;
  for (int i : ranking.order) out.push_back(edit.candidates[static_cast<std::size_t>(i)].image);
  return out;
}

RankedEdit edit_and_rank(const ModelBundle& models, const Image& x, const Mask& m, const Prompt& d,
                         const EditConfig& cfg) {
  RankedEdit out;
  out.edit = blended_edit(models.vae, models.denoiser, models.schedule(cfg.num_sampler_steps), x, m, d, cfg);
  std::vector<Image> images;
  for (const auto& c : out.edit.candidates) images.push_back(c.image);
  out.ranking = rank_batch(models.embedder, images, m, d);
  return out;
}

}  // namespace bld
