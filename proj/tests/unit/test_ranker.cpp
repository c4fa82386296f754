#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "bld/corpus.hpp"
#include "bld/ranker.hpp"
#include "bld/vision.hpp"
#include "support.hpp"

namespace bld {
namespace {

TEST(Cosine, HandValues) {
  const std::vector<float> a{1.0f, 0.0f}, b{1.0f, 1.0f}, c{-2.0f, 0.0f}, z{0.0f, 0.0f};
  EXPECT_NEAR(cosine_similarity(a, b), 1.0 / std::sqrt(2.0), 1e-12);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, c), -1.0);
  EXPECT_DOUBLE_EQ(cosine_similarity(a, z), 0.0);
  EXPECT_THROW(cosine_similarity(a, std::vector<float>{1.0f}), ShapeError);
}

TEST(RankEmbeddings, OrdersByDescendingCosine) {
  const Tensor e({3, 2}, {0.0f, 1.0f, 1.0f, 0.0f, 1.0f, 1.0f});
  const std::vector<float> p{1.0f, 0.0f};
  const Ranking r = rank_embeddings(e, p);
  EXPECT_EQ(r.order, (std::vector<int>{1, 2, 0}));
  EXPECT_NEAR(r.scores[2], 1.0 / std::sqrt(2.0), 1e-12);
}

TEST(RankEmbeddings, TiesKeepInputOrder) {
  const Tensor e({4, 2}, {1.0f, 0.0f, 2.0f, 0.0f, 0.0f, 1.0f, 3.0f, 0.0f});
  EXPECT_EQ(rank_embeddings(e, std::vector<float>{1.0f, 0.0f}).order, (std::vector<int>{0, 1, 3, 2}));
}

TEST(RankEmbeddings, RejectsEmptyBatch) {
  EXPECT_THROW(rank_embeddings(Tensor({0, 4}), std::vector<float>(4)), std::invalid_argument);
}

TEST(RankEmbeddings, ArgmaxInvariantUnderPositiveScaling) {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> log_scale(-3.0, 3.0);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 2 + trial % 15, d = 4 + trial % 29;
    const Tensor e = test::random_tensor({n, d}, 1000 + trial);
    const Tensor p = test::random_tensor({d}, 5000 + trial);
    Tensor es = e, ps = p;
    for (int i = 0; i < n; ++i) {
      const float s = static_cast<float>(std::pow(10.0, log_scale(rng)));
      for (int k = 0; k < d; ++k) es[static_cast<std::size_t>(i * d + k)] *= s;
    }
    const float sp = static_cast<float>(std::pow(10.0, log_scale(rng)));
    for (auto& v : ps.values()) v *= sp;
    const Ranking a = rank_embeddings(e, p.values());
    const Ranking b = rank_embeddings(es, ps.values());
    EXPECT_EQ(a.order.front(), b.order.front()) << "trial " << trial;
    for (int i = 0; i < n; ++i) EXPECT_NEAR(a.scores[static_cast<std::size_t>(i)], b.scores[static_cast<std::size_t>(i)], 1e-6);
  }
}

class EmbedderTest : public ::testing::Test {
 protected:
  EmbedderModel emb = EmbedderModel::initialize(8, 8, 5);
  Mask m = rect_mask(Rect{4, 4, 12, 16}, 32, 32);
  Prompt d = Prompt::parse("green square");
};

TEST_F(EmbedderTest, BatchRankingMatchesPerImageScores) {
  std::vector<Image> batch;
  for (int i = 0; i < 5; ++i) batch.push_back(test::random_image(32, 32, 70 + i));
  const Ranking r = rank_batch(emb, batch, m, d);
  std::vector<int> sorted = r.order;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_EQ(sorted, (std::vector<int>{0, 1, 2, 3, 4}));
  for (int i = 0; i < 5; ++i) EXPECT_NEAR(r.scores[static_cast<std::size_t>(i)], score(emb, batch[static_cast<std::size_t>(i)], m, d), 1e-6);
  for (std::size_t i = 1; i < r.order.size(); ++i)
    EXPECT_GE(r.scores[static_cast<std::size_t>(r.order[i - 1])], r.scores[static_cast<std::size_t>(r.order[i])]);
  EXPECT_THROW(rank_batch(emb, {}, m, d), std::invalid_argument);
}

TEST_F(EmbedderTest, ScoreIgnoresPixelsOutsideTheMask) {
  Image a = test::random_image(32, 32, 1);
  Image b = a;
  b.at(0, 0, 0) = -a.at(0, 0, 0);
  b.at(2, 31, 31) = 1.0f;
  EXPECT_EQ(score(emb, a, m, d), score(emb, b, m, d));
}

TEST_F(EmbedderTest, SaveLoadIsBitExact) {
  test::TempDir dir("bld-emb");
  emb.save(dir.path() / "e.ckpt");
  const EmbedderModel back = EmbedderModel::load(dir.path() / "e.ckpt");
  const Image x = test::random_image(32, 32, 8);
  EXPECT_EQ(score(back, x, m, d), score(emb, x, m, d));
}

TEST(EmbedderTraining, ReproducibleAndValidated) {
  const auto corpus = make_corpus(40, 6, SceneOptions{.size = 32, .min_radius = 4, .max_radius = 8});
  EmbedderTrainConfig cfg;
  cfg.epochs = 2;
  cfg.embed_dim = 8;
  cfg.hidden = 8;
  cfg.batch_size = 8;
  const EmbedderModel a = train_embedder(corpus, cfg);
  const EmbedderModel b = train_embedder(corpus, cfg);
  ASSERT_EQ(a.training().loss_curve.size(), 2u);
  EXPECT_EQ(a.training().loss_curve, b.training().loss_curve);
  EXPECT_GE(a.held_out_accuracy(), 0.0);
  EXPECT_LE(a.held_out_accuracy(), 1.0);
  EXPECT_THROW(train_embedder({}, cfg), TrainingError);
}

}  // namespace
}  // namespace bld
