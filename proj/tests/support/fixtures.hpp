#pragma once

#include <random>
#include <vector>

#include "refseg/model.hpp"

namespace refseg::testing {

inline ModelConfig tiny_config(std::size_t d = 8) {
  ModelConfig cfg;
  cfg.feature_dim = d;
  cfg.hidden_dim = d;
  cfg.t_iters = 2;
  cfg.k_g = 2;
  cfg.k_s = 2;
  cfg.interaction_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.decoder_hidden = d;
  cfg.grid_h = 2;
  cfg.grid_w = 3;
  return cfg;
}

template <typename T = double>
Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<T> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<T>(u(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

inline std::vector<double> row_sums(const Tensor<double>& x) {
  const std::size_t cols = x.dim(-1), rows = x.numel() / cols;
  std::vector<double> out(rows, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r] += x[r * cols + c];
  }
  return out;
}

/// Overwrites a leaf with values (for constructing probe inputs).
template <typename T>
void assign(Tensor<T> leaf, const std::vector<T>& values) {
  auto dst = leaf.mutable_data();
  std::copy(values.begin(), values.end(), dst.begin());
}

}  // namespace refseg::testing

namespace refseg::testing {

/// Moves every bias off zero. Zero-initialised biases put dead ReLU rows
/// exactly on the kink, where one-sided finite differences disagree.
template <typename T>
void jitter_biases(Model<T>& model, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-0.3, 0.3);
  for (auto [name, p] : model.params().entries()) {
    if (name.size() < 5 || name.compare(name.size() - 5, 5, ".bias") != 0) continue;
    for (auto& v : p.mutable_data()) v = static_cast<T>(u(rng));
  }
}

}  // namespace refseg::testing
