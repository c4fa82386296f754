#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "bld/autograd.hpp"

namespace bld::nn {

/// Ordered set of named trainable tensors. Copying shares nodes; use clone() for a private copy.
class ParamSet {
 public:
  ag::Var& add(const std::string& name, Tensor init);
  const ag::Var& at(const std::string& name) const;
  bool contains(const std::string& name) const;

  ParamSet clone() const;
  /// Copies values from other (matching names and shapes) into this set's nodes.
  void assign_from(const ParamSet& other);
  void set_requires_grad(bool on);
  std::vector<ag::Var> vars() const;
  std::size_t num_values() const;

  const std::vector<std::pair<std::string, ag::Var>>& items() const { return items_; }

 private:
  std::vector<std::pair<std::string, ag::Var>> items_;
};

// Parameter constructors (He-style init for conv/linear weights).
void add_conv(ParamSet& ps, const std::string& name, int cin, int cout, int k, std::mt19937_64& rng, float gain = 1.0f);
void add_linear(ParamSet& ps, const std::string& name, int in, int out, std::mt19937_64& rng, float gain = 1.0f);
void add_group_norm(ParamSet& ps, const std::string& name, int channels);

ag::Var conv(const ParamSet& ps, const std::string& name, const ag::Var& x, int stride = 1);
ag::Var linear(const ParamSet& ps, const std::string& name, const ag::Var& x);
ag::Var group_norm(const ParamSet& ps, const std::string& name, const ag::Var& x, int groups);

/// Sinusoidal embedding of integer timesteps, [N, dim].
Tensor timestep_embedding(const std::vector<int>& steps, int dim);

struct AdamConfig {
  float learning_rate = 1e-3f;
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float grad_clip = 0.0f;  // global-norm clip, 0 disables
};

/// Adam over an explicit list of leaf variables.
class Adam {
 public:
  Adam(std::vector<ag::Var> params, AdamConfig cfg);

  void zero_grad();
  void step();
  std::int64_t steps_taken() const { return t_; }
  void set_learning_rate(float lr) { cfg_.learning_rate = lr; }

  /// Moment buffers for checkpointing, in parameter order: m0, v0, m1, v1, ...
  std::vector<Tensor> state() const;
  void load_state(std::vector<Tensor> state, std::int64_t steps);

 private:
  std::vector<ag::Var> params_;
  AdamConfig cfg_;
  std::vector<Tensor> m_, v_;
  std::int64_t t_ = 0;
};

/// RAII switch that disables gradient requirement on a ParamSet for its lifetime.
class FrozenScope {
 public:
  explicit FrozenScope(ParamSet& ps) : ps_(ps) { ps_.set_requires_grad(false); }
  ~FrozenScope() { ps_.set_requires_grad(true); }
  FrozenScope(const FrozenScope&) = delete;
  FrozenScope& operator=(const FrozenScope&) = delete;

 private:
  ParamSet& ps_;
};

}  // namespace bld::nn
