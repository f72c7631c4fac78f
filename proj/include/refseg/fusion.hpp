#pragma once

#include "refseg/model_config.hpp"
#include "refseg/nn.hpp"

// Top-down attention: the textual feature queries the discovered entities
// through one single-head cross-attention transformer layer. The attention
// weights over entities are the relevance map; the layer output, l2
// normalised, is the cross-modal embedding z.
namespace refseg {

template <typename T>
struct FusionParams {
  NormedProjection<T> q, k, v;  // D -> D_h; q acts on the text, k and v on entities
  LinearLayer<T> out;           // D_h -> D
  LayerNormLayer<T> mlp_norm;
  Mlp<T> mlp;
  bool use_mlp = true;
  std::size_t hidden_dim = 0;

  static FusionParams create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);
};

template <typename T>
struct CrossModalOutput {
  Tensor<T> z;       // unit-norm embedding(s), last axis D
  Tensor<T> a_fuse;  // relevance over entities, last axis K, sums to 1
};

/// One image, one text: entities [K, D], text [D] -> z [D], a_fuse [K].
/// Paired batch: entities [B, K, D], texts [B, D] -> z [B, D], a_fuse [B, K].
template <typename T>
CrossModalOutput<T> fuse(const Tensor<T>& entities, const Tensor<T>& text, const FusionParams<T>& p);

/// Every image against every text: entities [B_i, K, D], texts [B_t, D]
/// -> z [B_i, B_t, D], a_fuse [B_i, B_t, K]. Entities are projected once
/// per image and shared by all of that image's fusions.
template <typename T>
CrossModalOutput<T> fuse_all_pairs(const Tensor<T>& entities, const Tensor<T>& texts, const FusionParams<T>& p);

}  // namespace refseg
