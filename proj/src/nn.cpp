#include "bld/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace bld::nn {

ag::Var& ParamSet::add(const std::string& name, Tensor init) {
  if (contains(name)) throw std::invalid_argument("duplicate parameter " + name);
  items_.emplace_back(name, ag::Var(std::move(init), false));
  return items_.back().second;
}

const ag::Var& ParamSet::at(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return v;
  throw std::out_of_range("unknown parameter " + name);
}

bool ParamSet::contains(const std::string& name) const {
  for (const auto& [n, v] : items_)
    if (n == name) return true;
  return false;
}

ParamSet ParamSet::clone() const {
  ParamSet out;
  for (const auto& [n, v] : items_) out.items_.emplace_back(n, ag::Var(v.value(), v.requires_grad()));
  return out;
}

void ParamSet::assign_from(const ParamSet& other) {
  for (auto& [n, v] : items_) {
    const Tensor& src = other.at(n).value();
    require_same_shape(src, v.value(), n.c_str());
    v.mutable_value() = src;
  }
}

void ParamSet::set_requires_grad(bool on) {
  for (auto& [n, v] : items_) v.set_requires_grad(on);
}

std::vector<ag::Var> ParamSet::vars() const {
  std::vector<ag::Var> out;
  out.reserve(items_.size());
  for (const auto& [n, v] : items_) out.push_back(v);
  return out;
}

std::size_t ParamSet::num_values() const {
  std::size_t s = 0;
  for (const auto& [n, v] : items_) s += v.value().size();
  return s;
}

void add_conv(ParamSet& ps, const std::string& name, int cin, int cout, int k, std::mt19937_64& rng, float gain) {
  Tensor w = Tensor::randn({cout, cin, k, k}, rng);
  const float sd = gain * std::sqrt(2.0f / static_cast<float>(cin * k * k));
  for (auto& v : w.values()) v *= sd;
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor({cout}));
}

void add_linear(ParamSet& ps, const std::string& name, int in, int out, std::mt19937_64& rng, float gain) {
  Tensor w = Tensor::randn({out, in}, rng);
  const float sd = gain * std::sqrt(2.0f / static_cast<float>(in));
  for (auto& v : w.values()) v *= sd;
  ps.add(name + ".w", std::move(w));
  ps.add(name + ".b", Tensor({out}));
}

void add_group_norm(ParamSet& ps, const std::string& name, int channels) {
  ps.add(name + ".g", Tensor({channels}, 1.0f));
  ps.add(name + ".b", Tensor({channels}));
}

ag::Var conv(const ParamSet& ps, const std::string& name, const ag::Var& x, int stride) {
  const ag::Var& w = ps.at(name + ".w");
  const int k = w.value().dim(2);
  return ag::conv2d(x, w, ps.at(name + ".b"), stride, k / 2);
}

ag::Var linear(const ParamSet& ps, const std::string& name, const ag::Var& x) {
  return ag::linear(x, ps.at(name + ".w"), ps.at(name + ".b"));
}

ag::Var group_norm(const ParamSet& ps, const std::string& name, const ag::Var& x, int groups) {
  return ag::group_norm(x, ps.at(name + ".g"), ps.at(name + ".b"), groups);
}

Tensor timestep_embedding(const std::vector<int>& steps, int dim) {
  const int half = dim / 2;
  Tensor out({static_cast<int>(steps.size()), dim});
  for (std::size_t i = 0; i < steps.size(); ++i) {
    for (int j = 0; j < half; ++j) {
      const double freq = std::exp(-std::log(10000.0) * j / half);
      const double arg = steps[i] * freq;
      out[i * dim + j] = static_cast<float>(std::sin(arg));
      out[i * dim + half + j] = static_cast<float>(std::cos(arg));
    }
  }
  return out;
}

Adam::Adam(std::vector<ag::Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const auto& p : params_) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Adam::step() {
  ++t_;
  float clip = 1.0f;
  if (cfg_.grad_clip > 0.0f) {
    double sq = 0.0;
    for (const auto& p : params_)
      for (float g : p.grad().values()) sq += static_cast<double>(g) * g;
    const double norm = std::sqrt(sq);
    if (norm > cfg_.grad_clip) clip = static_cast<float>(cfg_.grad_clip / norm);
  }
  const float bc1 = 1.0f - std::pow(cfg_.beta1, static_cast<float>(t_));
  const float bc2 = 1.0f - std::pow(cfg_.beta2, static_cast<float>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    const Tensor& g = params_[k].grad();
    if (g.empty()) continue;
    Tensor& w = params_[k].mutable_value();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const float gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0f - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0f - cfg_.beta2) * gi * gi;
      w[i] -= cfg_.learning_rate * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
}

std::vector<Tensor> Adam::state() const {
  std::vector<Tensor> out;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    out.push_back(m_[k]);
    out.push_back(v_[k]);
  }
  return out;
}

void Adam::load_state(std::vector<Tensor> state, std::int64_t steps) {
  if (state.size() != 2 * params_.size()) throw std::invalid_argument("optimizer state size mismatch");
  for (std::size_t k = 0; k < params_.size(); ++k) {
    require_same_shape(state[2 * k], params_[k].value(), "adam state");
    m_[k] = std::move(state[2 * k]);
    v_[k] = std::move(state[2 * k + 1]);
  }
  t_ = steps;
}

}  // namespace bld::nn
