#include <gtest/gtest.h>

#include <cmath>

#include "bld/autoencoder.hpp"
#include "bld/corpus.hpp"
#include "bld/denoiser.hpp"
#include "support.hpp"

namespace bld {
namespace {

std::vector<Scene> small_corpus(int n, std::uint64_t seed) {
  return make_corpus(n, seed, SceneOptions{.size = 32, .min_radius = 4, .max_radius = 8});
}

VaeTrainConfig quick_vae(int epochs) {
  VaeTrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  return c;
}

VaeArch small_vae_arch() {
  VaeArch a;
  a.image_size = 32;
  a.width = 8;
  return a;
}

DenoiserArch small_den_arch() {
  DenoiserArch a;
  a.latent_size = 8;
  a.base_channels = 8;
  a.mid_channels = 16;
  a.time_dim = 16;
  a.groups = 4;
  return a;
}

DenoiserTrainConfig quick_den(int epochs) {
  DenoiserTrainConfig c;
  c.epochs = epochs;
  c.batch_size = 8;
  return c;
}

TEST(Vae, LatentShapeFollowsFactor) {
  const VaeModel vae = VaeModel::initialize(VaeArch{}, 1);
  const Latent z = vae.encode(test::random_image(64, 64, 2));
  EXPECT_EQ(z.data.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(z.factor, 4);
  EXPECT_EQ(vae.decode(z).height(), 64);
}

TEST(Vae, EncodingIsDeterministic) {
  const VaeModel vae = test::tiny_vae();
  const Image x = test::random_image(32, 32, 3);
  EXPECT_EQ(vae.encode(x, 7), vae.encode(x, 7));
  EXPECT_FALSE(vae.encode(x, 7) == vae.encode(x, 8));
  EXPECT_EQ(vae.encode(x), vae.encode(x));
  EXPECT_FALSE(vae.encode(x) == vae.encode(x, 7));
}

TEST(Vae, DecodeIsDeterministicAndInRange) {
  const VaeModel vae = test::tiny_vae();
  const Latent zero{Tensor({4, 8, 8}), 4};
  EXPECT_EQ(vae.decode(zero), vae.decode(zero));
  const Latent z{test::random_tensor({4, 8, 8}, 5, 3.0f), 4};
  for (float v : vae.decode(z).tensor().values()) {
    EXPECT_GE(v, -1.0f);
    EXPECT_LE(v, 1.0f);
  }
}

TEST(Vae, RejectsWrongShapes) {
  const VaeModel vae = test::tiny_vae();
  EXPECT_THROW(vae.encode(test::random_image(64, 64, 1)), ShapeError);
  EXPECT_THROW(vae.decode(Latent{Tensor({4, 16, 16}), 4}), ShapeError);
  EXPECT_THROW(vae.decode(Latent{Tensor({3, 8, 8}), 4}), ShapeError);
}

TEST(Vae, ZeroEpochsReturnsTheInitialisation) {
  const auto corpus = small_corpus(8, 1);
  const VaeModel trained = train_vae(corpus, quick_vae(0), small_vae_arch());
  const VaeModel init = VaeModel::initialize(small_vae_arch(), quick_vae(0).seed);
  const Image x = corpus[0].image;
  EXPECT_LT(max_abs_diff(trained.decode(trained.encode(x)).tensor(), init.decode(init.encode(x)).tensor()), 1e-5f);
  EXPECT_TRUE(trained.training().loss_curve.empty());
}

TEST(Vae, TrainingIsSeedReproducibleAndResumable) {
  const auto corpus = small_corpus(24, 2);
  const VaeModel a = train_vae(corpus, quick_vae(2), small_vae_arch());
  const VaeModel b = train_vae(corpus, quick_vae(2), small_vae_arch());
  ASSERT_EQ(a.training().loss_curve.size(), 2u);
  for (int e = 0; e < 2; ++e) EXPECT_NEAR(a.training().loss_curve[e], b.training().loss_curve[e], 1e-6);
  EXPECT_LT(a.training().loss_curve[1], a.training().loss_curve[0]);

  const VaeModel half = train_vae(corpus, quick_vae(1), small_vae_arch());
  const VaeModel resumed = train_vae(corpus, quick_vae(2), small_vae_arch(), &half);
  ASSERT_EQ(resumed.training().loss_curve.size(), 2u);
  for (int e = 0; e < 2; ++e) EXPECT_NEAR(resumed.training().loss_curve[e], a.training().loss_curve[e], 1e-6);
  EXPECT_LT(max_abs_diff(resumed.decode(resumed.encode(corpus[0].image)).tensor(), a.decode(a.encode(corpus[0].image)).tensor()),
            1e-4f);
  EXPECT_GT(a.held_out_mse(), 0.0);

  VaeTrainConfig other = quick_vae(2);
  other.seed = 99;
  EXPECT_THROW(train_vae(corpus, other, small_vae_arch(), &half), TrainingError);
}

TEST(Vae, EmptyCorpusIsRejected) {
  EXPECT_THROW(train_vae({}, quick_vae(1), small_vae_arch()), TrainingError);
}

TEST(Vae, SaveLoadIsBitExact) {
  const VaeModel vae = test::tiny_vae();
  test::TempDir dir("bld-vae");
  vae.save(dir.path() / "v.ckpt");
  const VaeModel back = VaeModel::load(dir.path() / "v.ckpt");
  const Image x = test::random_image(32, 32, 4);
  EXPECT_EQ(back.encode(x), vae.encode(x));
  EXPECT_EQ(back.decode(vae.encode(x)), vae.decode(vae.encode(x)));
  EXPECT_EQ(back.latent_scale(), vae.latent_scale());
  EXPECT_THROW(DenoiserModel::load(dir.path() / "v.ckpt"), CheckpointError);
}

TEST(Vae, ReconstructionIsLossy) {
  const VaeModel vae = test::tiny_vae();
  const Image x = test::random_image(32, 32, 9);
  EXPECT_GT(region_mse(vae.decode(vae.encode(x)), x, Mask(32, 32), false), 0.0);
}

TEST(Prompt, ParsesVocabularyAndRejectsOthers) {
  EXPECT_EQ(Prompt::parse("red circle").label, Prompt::parse("Red_Circle").label);
  EXPECT_TRUE(Prompt::parse("").is_unconditional());
  EXPECT_TRUE(Prompt::parse("unconditional").is_unconditional());
  EXPECT_THROW(Prompt::parse("purple hexagon"), UnknownPrompt);
  EXPECT_THROW(Prompt::of_label(42), UnknownPrompt);
  for (int l = 0; l < Vocabulary::kNumClasses; ++l) EXPECT_EQ(Prompt::parse(Vocabulary::name(l)).label, l);
}

class DenoiserTest : public ::testing::Test {
 protected:
  DenoiserModel den = test::tiny_denoiser();
  NoiseSchedule sched = den.schedule(10);
  Tensor zt = test::random_tensor({3, 4, 8, 8}, 21);
  Prompt d = Prompt::parse("blue triangle");
};

TEST_F(DenoiserTest, GuidanceEndpointsAreExactBranches) {
  const EpsBranches br = predict_branches(den, sched, zt, d, 500);
  EXPECT_TRUE(bit_equal(predict_eps(den, sched, zt, d, 500, 1.0f), br.cond));
  EXPECT_TRUE(bit_equal(predict_eps(den, sched, zt, d, 500, 0.0f), br.uncond));
  const Tensor g = predict_eps(den, sched, zt, d, 500, 3.0f);
  for (std::size_t i = 0; i < g.size(); ++i) EXPECT_NEAR(g[i], br.uncond[i] + 3.0f * (br.cond[i] - br.uncond[i]), 1e-5);
}

TEST_F(DenoiserTest, DeterministicAndFinite) {
  EXPECT_TRUE(bit_equal(predict_eps(den, sched, zt, d, 123, 3.0f), predict_eps(den, sched, zt, d, 123, 3.0f)));
  for (int t : {0, 1, 250, 998, 999}) {
    const Tensor e = predict_eps(den, sched, test::random_tensor({2, 4, 8, 8}, 30 + t, 5.0f), d, t, 3.0f);
    EXPECT_EQ(e.shape(), (Shape{2, 4, 8, 8}));
    for (float v : e.values()) EXPECT_TRUE(std::isfinite(v));
  }
}

TEST_F(DenoiserTest, BatchRowsAreIndependent) {
  const Tensor all = predict_eps(den, sched, zt, d, 700, 3.0f);
  const Tensor one = predict_eps(den, sched, zt.batch_slice(1), d, 700, 3.0f);
  EXPECT_LT(max_abs_diff(all.batch_slice(1), one), 1e-5f);
}

TEST_F(DenoiserTest, RejectsForeignScheduleAndBadInputs) {
  const auto cosine = make_schedule(1000, 10, BetaSchedule::cosine);
  EXPECT_THROW(predict_eps(den, cosine, zt, d, 10, 3.0f), std::invalid_argument);
  EXPECT_THROW(predict_eps(den, sched, zt, d, 1000, 3.0f), std::invalid_argument);
  EXPECT_THROW(predict_eps(den, sched, zt, d, 10, -1.0f), std::invalid_argument);
  EXPECT_THROW(predict_eps(den, sched, Tensor({1, 4, 16, 16}), d, 10, 3.0f), ShapeError);
  EXPECT_EQ(schedule_fingerprint(sched), schedule_fingerprint(den.schedule(50)));
}

TEST_F(DenoiserTest, SaveLoadIsBitExact) {
  test::TempDir dir("bld-den");
  den.save(dir.path() / "d.ckpt");
  const DenoiserModel back = DenoiserModel::load(dir.path() / "d.ckpt");
  EXPECT_EQ(back.schedule_id(), den.schedule_id());
  EXPECT_TRUE(bit_equal(predict_eps(back, sched, zt, d, 400, 3.0f), predict_eps(den, sched, zt, d, 400, 3.0f)));
}

TEST(DenoiserTraining, ReproducibleResumableAndLearning) {
  const auto corpus = small_corpus(40, 3);
  const VaeModel vae = train_vae(corpus, quick_vae(1), small_vae_arch());
  const DenoiserModel a = train_denoiser(vae, corpus, quick_den(3), small_den_arch());
  const DenoiserModel b = train_denoiser(vae, corpus, quick_den(3), small_den_arch());
  ASSERT_EQ(a.training().loss_curve.size(), 3u);
  for (int e = 0; e < 3; ++e) EXPECT_NEAR(a.training().loss_curve[e], b.training().loss_curve[e], 1e-6);
  EXPECT_LT(a.training().val_curve.back(), a.held_out_initial());

  const DenoiserModel part = train_denoiser(vae, corpus, quick_den(1), small_den_arch());
  const DenoiserModel resumed = train_denoiser(vae, corpus, quick_den(3), small_den_arch(), &part);
  for (int e = 0; e < 3; ++e) EXPECT_NEAR(resumed.training().loss_curve[e], a.training().loss_curve[e], 1e-6);
  EXPECT_EQ(resumed.held_out_initial(), a.held_out_initial());

  EXPECT_THROW(train_denoiser(vae, {}, quick_den(1), small_den_arch()), TrainingError);
}

}  // namespace
}  // namespace bld
