#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "refseg/model_config.hpp"
#include "refseg/nn.hpp"

// Bottom-up attention: slots compete for visual patches, then slots drawn
// from the same distribution exchange information through a shared
// self-attention layer. Repeated T times from the initial slots.
namespace refseg {

inline constexpr double kLogSigmaMin = -6.0;
inline constexpr double kLogSigmaMax = 2.0;

template <typename T>
struct SlotDistributionParams {
  SlotKind kind = SlotKind::Entity;
  std::size_t k_g = 1;
  std::size_t k_s = 1;
  Tensor<T> mu;           // [K_g, D] for Entity, [1, D] for Random
  Tensor<T> log_sigma;    // same shape as mu
  Tensor<T> query_table;  // [K, D] for Query

  static SlotDistributionParams create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);

  std::size_t num_slots() const { return k_g * k_s; }
  /// exp(clamp(log_sigma, -6, 2)).
  Tensor<T> sigma() const;
};

/// S^t for a batch: slots [B, K, D] in group-major order plus the grouping
/// used by the interaction block.
template <typename T>
struct SlotBank {
  Tensor<T> slots;
  std::vector<std::size_t> group_of;  // length K
  std::size_t k_g = 1;                // number of interaction groups
  std::size_t k_s = 1;                // slots per group

  std::size_t num_slots() const { return group_of.size(); }
};

template <typename T>
struct DiscoveryParams {
  NormedProjection<T> q, k, v;  // D -> D_h
  LinearLayer<T> w_o;           // D_h -> D, no bias
  LayerNormLayer<T> refine_norm;
  Mlp<T> refine_mlp;            // D -> D
  SelfAttentionLayer<T> interaction;
  std::size_t t_iters = 6;
  std::size_t hidden_dim = 0;
  bool use_interaction = true;
  AttentionNorm attention_norm = AttentionNorm::Slots;

  static DiscoveryParams create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);
};

template <typename T>
struct AggregationResult {
  SlotBank<T> bank;  // S-hat
  Tensor<T> a_slot;  // [B, N, K]
};

template <typename T>
struct DiscoveryResult {
  Tensor<T> entities;  // [K, D] or [B, K, D], matching the input rank
  Tensor<T> a_slot;    // [N, K] or [B, N, K]; from the final aggregation
};

/// Per-image seeds for a batch drawn from one run seed.
std::vector<std::uint64_t> batch_seeds(std::uint64_t seed, std::size_t batch);

/// S^0 for each image. Entity and Random use mu + sigma * eta with eta drawn
/// from N(0, I) under that image's seed; Query broadcasts the table.
template <typename T>
SlotBank<T> init_slots(const SlotDistributionParams<T>& dist, std::span<const std::uint64_t> image_seeds);
template <typename T>
SlotBank<T> init_slots(const SlotDistributionParams<T>& dist, std::size_t batch, std::uint64_t seed);

/// Competitive attention and slot update. x_v is [B, N, D] (or [N, D] with B = 1).
template <typename T>
AggregationResult<T> aggregation_block(const Tensor<T>& x_v, const SlotBank<T>& prev, const DiscoveryParams<T>& p);

/// Shared-weight self-attention applied to each group of slots separately.
template <typename T>
SlotBank<T> interaction_block(const SlotBank<T>& s_hat, const DiscoveryParams<T>& p);

template <typename T>
DiscoveryResult<T> discover(const Tensor<T>& x_v, const SlotDistributionParams<T>& dist, const DiscoveryParams<T>& p,
                            std::span<const std::uint64_t> image_seeds);
template <typename T>
DiscoveryResult<T> discover(const Tensor<T>& x_v, const SlotDistributionParams<T>& dist, const DiscoveryParams<T>& p,
                            std::uint64_t seed);

}  // namespace refseg
