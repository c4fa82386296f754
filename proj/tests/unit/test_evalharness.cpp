#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>

#include "bld/evalharness.hpp"
#include "support.hpp"

namespace bld {
namespace {

// Fixture batches of up to 4 cases with up to 4 predictions each over a 4-label toy space.
std::vector<EvalCase> random_fixture(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> small(1, 4), label(0, 3), bit(0, 1);
  std::vector<EvalCase> cases(static_cast<std::size_t>(small(rng)));
  for (EvalCase& c : cases) {
    const int b = small(rng);
    c.target = label(rng);
    for (int i = 0; i < b; ++i) {
      c.verdicts.push_back(label(rng));
      c.features.push_back({static_cast<float>(bit(rng)), static_cast<float>(bit(rng)), static_cast<float>(bit(rng))});
    }
    c.ranking.resize(static_cast<std::size_t>(b));
    std::iota(c.ranking.begin(), c.ranking.end(), 0);
    std::shuffle(c.ranking.begin(), c.ranking.end(), rng);
  }
  return cases;
}

double recount_batch(const std::vector<EvalCase>& cases) {
  double total = 0.0;
  for (const EvalCase& c : cases) {
    int hits = 0, n = 0;
    for (int v : c.verdicts) {
      ++n;
      if (v == c.target) ++hits;
    }
    total += static_cast<double>(hits) / n;
  }
  return total / static_cast<double>(cases.size());
}

double recount_best(const std::vector<EvalCase>& cases) {
  int hits = 0;
  for (const EvalCase& c : cases)
    for (std::size_t i = 0; i < c.verdicts.size(); ++i)
      if (c.ranking[0] == static_cast<int>(i) && c.verdicts[i] == c.target) ++hits;
  return static_cast<double>(hits) / static_cast<double>(cases.size());
}

Diversity recount_diversity(const EvalCase& c) {
  double sum = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < c.verdicts.size(); ++i)
    for (std::size_t j = i + 1; j < c.verdicts.size(); ++j) {
      if (c.verdicts[i] != c.target || c.verdicts[j] != c.target) continue;
      double d2 = 0.0;
      for (std::size_t k = 0; k < 3; ++k) {
        const double diff = static_cast<double>(c.features[i][k]) - c.features[j][k];
        d2 += diff * diff;
      }
      sum += std::sqrt(d2);
      ++pairs;
    }
  if (pairs == 0) return {0.0, true};
  return {sum / pairs, false};
}

TEST(Metrics, HandFixture) {
  EvalCase a;
  a.target = 1;
  a.verdicts = {1, 0, 1, 1};
  a.ranking = {1, 0, 2, 3};
  a.features = {{0, 0, 0}, {5, 5, 5}, {3, 4, 0}, {0, 0, 0}};
  EvalCase b;
  b.target = 2;
  b.verdicts = {2, 0};
  b.ranking = {0, 1};
  b.features = {{1, 0, 0}, {0, 1, 0}};
  const std::vector<EvalCase> cases{a, b};
  EXPECT_DOUBLE_EQ(batch_precision(cases), (0.75 + 0.5) / 2.0);
  EXPECT_DOUBLE_EQ(best_result_precision(cases), 0.5);
  const Diversity da = batch_diversity(a);
  EXPECT_FALSE(da.insufficient);
  EXPECT_DOUBLE_EQ(da.value, (5.0 + 0.0 + 5.0) / 3.0);
  EXPECT_TRUE(batch_diversity(b).insufficient);
}

TEST(Metrics, MatchBruteForceRecounts) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 2000; ++trial) {
    const auto cases = random_fixture(rng);
    EXPECT_EQ(batch_precision(cases), recount_batch(cases));
    EXPECT_EQ(best_result_precision(cases), recount_best(cases));
    for (const EvalCase& c : cases) {
      const Diversity got = batch_diversity(c), want = recount_diversity(c);
      EXPECT_EQ(got.insufficient, want.insufficient);
      EXPECT_EQ(got.value, want.value);
    }
  }
}

TEST(Metrics, DiversityIsPermutationInvariant) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    EvalCase c = random_fixture(rng).front();
    EvalCase p = c;
    std::vector<int> perm(c.verdicts.size());
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    for (std::size_t i = 0; i < perm.size(); ++i) {
      p.verdicts[i] = c.verdicts[static_cast<std::size_t>(perm[i])];
      p.features[i] = c.features[static_cast<std::size_t>(perm[i])];
    }
    EXPECT_NEAR(batch_diversity(p).value, batch_diversity(c).value, 1e-12);
  }
}

TEST(Metrics, RejectEmptyInput) {
  EXPECT_THROW(batch_precision({}), std::invalid_argument);
  EXPECT_THROW(best_result_precision({}), std::invalid_argument);
  std::vector<EvalCase> one(1);
  EXPECT_THROW(batch_precision(one), std::invalid_argument);
  EXPECT_THROW(best_result_precision(one), std::invalid_argument);
}

TEST(RandomMask, SidesStayWithinBoundsOverManyDraws) {
  const std::pair<int, int> sizes[] = {{64, 64}, {5, 5}, {17, 40}, {128, 33}};
  for (auto [h, w] : sizes) {
    const int lo_h = (h + 4) / 5, hi_h = h / 2, lo_w = (w + 4) / 5, hi_w = w / 2;
    int min_h = h, max_h = 0;
    for (std::uint64_t s = 0; s < 10000; ++s) {
      const Rect r = random_mask_rect(s, h, w);
      ASSERT_GE(r.h, lo_h);
      ASSERT_LE(r.h, hi_h);
      ASSERT_GE(r.w, lo_w);
      ASSERT_LE(r.w, hi_w);
      ASSERT_GE(r.y, 0);
      ASSERT_GE(r.x, 0);
      ASSERT_LE(r.y + r.h, h);
      ASSERT_LE(r.x + r.w, w);
      min_h = std::min(min_h, r.h);
      max_h = std::max(max_h, r.h);
    }
    EXPECT_EQ(min_h, lo_h);
    EXPECT_EQ(max_h, hi_h);
  }
  EXPECT_THROW(random_mask_rect(1, 4, 64), std::invalid_argument);
}

TEST(RandomMask, MaskMatchesRect) {
  const Rect r = random_mask_rect(9, 64, 64);
  const Mask m = random_mask(9, 64, 64);
  EXPECT_EQ(m.count(), static_cast<std::size_t>(r.h * r.w));
  EXPECT_TRUE(m(r.y, r.x));
  EXPECT_TRUE(m(r.y + r.h - 1, r.x + r.w - 1));
}

TEST(RunEval, DeterministicReportWithTinyModels) {
  const ModelBundle models{test::tiny_vae(64), test::tiny_denoiser(16), EmbedderModel::initialize(8, 8, 3)};
  const ClassifierModel cls = ClassifierModel::initialize(8, 4);
  EditConfig cfg;
  cfg.batch_size = 2;
  cfg.num_sampler_steps = 4;
  const EvalReport a = run_eval(models, cls, 2, 31, cfg);
  const EvalReport b = run_eval(models, cls, 2, 31, cfg);
  ASSERT_EQ(a.cases.size(), 2u);
  EXPECT_EQ(a.to_json(), b.to_json());
  for (const EvalCase& c : a.cases) {
    EXPECT_EQ(c.batch_size(), 2);
    EXPECT_EQ(c.features.size(), 2u);
    EXPECT_GE(c.mask.h, 13);
    EXPECT_LE(c.mask.h, 32);
  }
  EXPECT_EQ(a.batch_precision, batch_precision(a.cases));
  EXPECT_EQ(a.best_result_precision, best_result_precision(a.cases));

  test::TempDir dir("bld-eval");
  a.write(dir.path());
  std::ifstream csv(dir.path() / "report.csv");
  std::string line;
  int rows = 0;
  while (std::getline(csv, line)) ++rows;
  EXPECT_EQ(rows, 3);
  EXPECT_TRUE(std::filesystem::exists(dir.path() / "report.json"));
  EXPECT_THROW(run_eval(models, cls, 0, 31, cfg), std::invalid_argument);
}

TEST(Classifier, SaveLoadAndTrainingValidation) {
  const ClassifierModel cls = ClassifierModel::initialize(8, 4);
  test::TempDir dir("bld-cls");
  cls.save(dir.path() / "c.ckpt");
  const ClassifierModel back = ClassifierModel::load(dir.path() / "c.ckpt");
  const Image x = test::random_image(32, 32, 2);
  EXPECT_EQ(back.predict(x), cls.predict(x));
  EXPECT_TRUE(bit_equal(back.features(x.batched()), cls.features(x.batched())));
  EXPECT_THROW(train_classifier({}, ClassifierTrainConfig{}), TrainingError);
}

}  // namespace
}  // namespace bld
