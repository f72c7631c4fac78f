#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "refseg/ops.hpp"
#include "refseg/tensor.hpp"

namespace refseg {

using Rng = std::mt19937_64;

/// Named, ordered collection of every learnable tensor in a model. Order is
/// registration order and is what checkpoints and the optimizer iterate.
template <typename T>
class ParamStore {
 public:
  using Entry = std::pair<std::string, Tensor<T>>;

  Tensor<T> add(std::string name, Shape shape, std::vector<T> values);

  const std::vector<Entry>& entries() const { return entries_; }
  const Tensor<T>& get(std::string_view name) const;
  bool contains(std::string_view name) const;
  std::size_t scalar_count() const;
  void zero_grad();

 private:
  std::vector<Entry> entries_;
};

template <typename T>
std::vector<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng);

template <typename T>
struct LinearLayer {
  Tensor<T> weight;  // [in, out]
  Tensor<T> bias;    // [out], undefined when the layer has no bias

  static LinearLayer create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                            bool with_bias, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }
};

template <typename T>
struct LayerNormLayer {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNormLayer create(ParamStore<T>& store, const std::string& name, std::size_t dim);
  Tensor<T> operator()(const Tensor<T>& x) const { return layer_norm(x, gain, bias); }
};

/// Linear(LayerNorm(x)): the q/k/v projections of both attention modules.
template <typename T>
struct NormedProjection {
  LayerNormLayer<T> norm;
  LinearLayer<T> proj;

  static NormedProjection create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t out,
                                 Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return proj(norm(x)); }
};

/// linear -> ReLU -> linear.
template <typename T>
struct Mlp {
  LinearLayer<T> fc1;
  LinearLayer<T> fc2;

  static Mlp create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
                    std::size_t out, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const { return fc2(relu(fc1(x))); }
};

/// Pre-norm transformer layer with multi-head self-attention over the
/// second-to-last axis: x + MHA(LN(x)), then h + MLP(LN(h)).
/// Input [G, S, D] runs G independent sequences through the same weights.
template <typename T>
struct SelfAttentionLayer {
  LayerNormLayer<T> attn_norm;
  LinearLayer<T> q, k, v, out;
  LayerNormLayer<T> mlp_norm;
  Mlp<T> mlp;
  std::size_t heads = 1;

  static SelfAttentionLayer create(ParamStore<T>& store, const std::string& name, std::size_t dim,
                                   std::size_t heads, std::size_t mlp_ratio, Rng& rng);
  Tensor<T> operator()(const Tensor<T>& x) const;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;

}  // namespace refseg
