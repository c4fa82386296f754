#include "bld/training.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

namespace bld {

nlohmann::json TrainingState::to_json() const {
  return {{"seed", seed},
          {"epochs_done", epochs_done},
          {"loss_curve", loss_curve},
          {"val_curve", val_curve},
          {"optimizer_steps", optimizer_steps}};
}

TrainingState TrainingState::from_json(const nlohmann::json& j) {
  TrainingState s;
  s.seed = j.value("seed", std::uint64_t{0});
  s.epochs_done = j.value("epochs_done", 0);
  s.loss_curve = j.value("loss_curve", std::vector<double>{});
  s.val_curve = j.value("val_curve", std::vector<double>{});
  s.optimizer_steps = j.value("optimizer_steps", std::int64_t{0});
  return s;
}

void TrainingState::store(Checkpoint& ck) const {
  ck.header["training"] = to_json();
  for (std::size_t i = 0; i < optimizer_moments.size(); ++i) {
    ck.tensors.emplace_back("opt." + std::to_string(i), optimizer_moments[i]);
  }
}

TrainingState TrainingState::load(const Checkpoint& ck) {
  TrainingState s = from_json(ck.header.value("training", nlohmann::json::object()));
  // numeric order, not lexicographic
  std::vector<std::pair<int, Tensor>> moments;
  for (const auto& [name, t] : ck.tensors)
    if (name.rfind("opt.", 0) == 0) moments.emplace_back(std::stoi(name.substr(4)), t);
  std::sort(moments.begin(), moments.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (auto& [i, t] : moments) s.optimizer_moments.push_back(std::move(t));
  return s;
}

std::vector<int> epoch_order(int n, std::uint64_t seed, int epoch) {
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::iota(idx.begin(), idx.end(), 0);
  std::mt19937_64 rng(mix_seed(seed, 0x1000u + static_cast<std::uint64_t>(epoch)));
  // Fisher-Yates with an explicit draw so the order is stdlib-independent
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(idx[static_cast<std::size_t>(i)], idx[static_cast<std::size_t>(j)]);
  }
  return idx;
}

Tensor gather_images(std::span<const Scene> scenes, std::span<const int> idx) {
  if (idx.empty()) throw std::invalid_argument("empty batch");
  const Image& first = scenes[static_cast<std::size_t>(idx[0])].image;
  const std::size_t per = first.tensor().size();
  Tensor out({static_cast<int>(idx.size()), first.channels(), first.height(), first.width()});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Image& im = scenes[static_cast<std::size_t>(idx[i])].image;
    require_same_shape(im.tensor(), first.tensor(), "gather_images");
    std::memcpy(out.data() + i * per, im.tensor().data(), per * sizeof(float));
  }
  return out;
}

int held_out_count(int n, double fraction) {
  if (n < 2) return 0;
  return std::clamp(static_cast<int>(std::lround(n * fraction)), 1, n - 1);
}

void require_finite(double loss, const std::string& what, int epoch, int step) {
  if (!std::isfinite(loss)) {
    throw TrainingError(what + ": non-finite loss at epoch " + std::to_string(epoch) + ", step " + std::to_string(step));
  }
}

Rect random_rect(std::mt19937_64& rng, int height, int width) {
  const auto side = [&](int dim) {
    const int lo = (dim + 4) / 5;  // ceil(dim/5)
    const int hi = std::max(lo, dim / 2);
    return std::uniform_int_distribution<int>(lo, hi)(rng);
  };
  Rect r;
  r.h = side(height);
  r.w = side(width);
  r.y = std::uniform_int_distribution<int>(0, height - r.h)(rng);
  r.x = std::uniform_int_distribution<int>(0, width - r.w)(rng);
  return r;
}

}  // namespace bld
