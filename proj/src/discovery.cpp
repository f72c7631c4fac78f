#include "refseg/discovery.hpp"

#include <cmath>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

template <typename T>
Tensor<T> as_batch(const Tensor<T>& x, std::size_t feature_dim, const char* what) {
  if (x.rank() == 2 && x.dim(1) == feature_dim) return reshape(x, {1, x.dim(0), x.dim(1)});
  if (x.rank() == 3 && x.dim(2) == feature_dim) return x;
  throw DimensionError(std::string(what) + ": expected [N, " + std::to_string(feature_dim) + "] or [B, N, " +
                       std::to_string(feature_dim) + "], got " + shape_str(x.shape()));
}

template <typename T>
AggregationResult<T> aggregate(const Tensor<T>& kx, const Tensor<T>& vx, const SlotBank<T>& prev,
                               const DiscoveryParams<T>& p) {
  const auto qs = p.q(prev.slots);
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(p.hidden_dim));
  const auto logits = scale(matmul(kx, transpose(qs)), inv_sqrt);  // [B, N, K]
  Tensor<T> a_slot, weights;
  if (p.attention_norm == AttentionNorm::Slots) {
    a_slot = softmax(logits, -1);
    weights = l1_normalize_columns(a_slot);
  } else {
    a_slot = softmax(logits, -2);
    weights = a_slot;
  }
  const auto pooled = matmul(transpose(weights), vx);  // [B, K, D_h]
  auto s_hat = p.w_o(pooled) + prev.slots;
  s_hat = s_hat + p.refine_mlp(p.refine_norm(s_hat));
  SlotBank<T> bank = prev;
  bank.slots = s_hat;
  return {std::move(bank), a_slot};
}

}  // namespace

template <typename T>
SlotDistributionParams<T> SlotDistributionParams<T>::create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  SlotDistributionParams p;
  p.kind = cfg.slot_kind;
  p.k_g = cfg.k_g;
  p.k_s = cfg.k_s;
  const std::size_t d = cfg.feature_dim;
  std::normal_distribution<double> normal(0.0, 1.0);
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  auto gaussian = [&](std::size_t n) {
    std::vector<T> v(n);
    for (auto& x : v) x = static_cast<T>(normal(rng) * scale);
    return v;
  };
  switch (cfg.slot_kind) {
    case SlotKind::Entity:
      p.mu = store.add("slots.mu", {cfg.k_g, d}, gaussian(cfg.k_g * d));
      p.log_sigma = store.add("slots.log_sigma", {cfg.k_g, d}, std::vector<T>(cfg.k_g * d, T(0)));
      break;
    case SlotKind::Random:
      p.mu = store.add("slots.mu", {1, d}, gaussian(d));
      p.log_sigma = store.add("slots.log_sigma", {1, d}, std::vector<T>(d, T(0)));
      break;
    case SlotKind::Query:
      p.query_table = store.add("slots.query", {cfg.num_slots(), d}, gaussian(cfg.num_slots() * d));
      break;
  }
  return p;
}

template <typename T>
Tensor<T> SlotDistributionParams<T>::sigma() const {
  return exp(clamp(log_sigma, static_cast<T>(kLogSigmaMin), static_cast<T>(kLogSigmaMax)));
}

template <typename T>
DiscoveryParams<T> DiscoveryParams<T>::create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.feature_dim, dh = cfg.hidden_dim;
  DiscoveryParams p;
  p.q = NormedProjection<T>::create(store, "discovery.q", d, dh, rng);
  p.k = NormedProjection<T>::create(store, "discovery.k", d, dh, rng);
  p.v = NormedProjection<T>::create(store, "discovery.v", d, dh, rng);
  p.w_o = LinearLayer<T>::create(store, "discovery.w_o", dh, d, false, rng);
  p.refine_norm = LayerNormLayer<T>::create(store, "discovery.refine_norm", d);
  p.refine_mlp = Mlp<T>::create(store, "discovery.refine_mlp", d, d * cfg.mlp_ratio, d, rng);
  p.interaction =
      SelfAttentionLayer<T>::create(store, "discovery.interaction", d, cfg.interaction_heads, cfg.mlp_ratio, rng);
  p.t_iters = cfg.t_iters;
  p.hidden_dim = dh;
  p.use_interaction = cfg.use_interaction;
  p.attention_norm = cfg.attention_norm;
  return p;
}

std::vector<std::uint64_t> batch_seeds(std::uint64_t seed, std::size_t batch) {
  std::vector<std::uint64_t> seeds(batch);
  for (std::size_t b = 0; b < batch; ++b) seeds[b] = splitmix64(seed ^ splitmix64(b + 1));
  return seeds;
}

template <typename T>
SlotBank<T> init_slots(const SlotDistributionParams<T>& dist, std::span<const std::uint64_t> image_seeds) {
  if (dist.k_g == 0 || dist.k_s == 0) throw ConfigError("K_g and K_s must be positive");
  if (image_seeds.empty()) throw DimensionError("init_slots needs at least one image");
  const std::size_t batch = image_seeds.size(), k = dist.num_slots();
  SlotBank<T> bank;
  bank.group_of.resize(k, 0);

  auto noise = [&](std::size_t per_image) {
    std::vector<T> eta(batch * per_image);
    for (std::size_t b = 0; b < batch; ++b) {
      Rng rng(image_seeds[b]);
      std::normal_distribution<double> normal(0.0, 1.0);
      for (std::size_t i = 0; i < per_image; ++i) eta[b * per_image + i] = static_cast<T>(normal(rng));
    }
    return eta;
  };

  switch (dist.kind) {
    case SlotKind::Entity: {
      const std::size_t d = dist.mu.dim(1);
      if (dist.mu.dim(0) != dist.k_g) throw ConfigError("entity mu rows must equal K_g");
      const Tensor<T> eta({batch, dist.k_g, dist.k_s, d}, noise(k * d));
      const auto mu = reshape(dist.mu, {1, dist.k_g, 1, d});
      const auto sigma = reshape(dist.sigma(), {1, dist.k_g, 1, d});
      bank.slots = reshape(mu + sigma * eta, {batch, k, d});
      for (std::size_t s = 0; s < k; ++s) bank.group_of[s] = s / dist.k_s;
      bank.k_g = dist.k_g;
      bank.k_s = dist.k_s;
      break;
    }
    case SlotKind::Random: {
      const std::size_t d = dist.mu.dim(1);
      const Tensor<T> eta({batch, k, d}, noise(k * d));
      bank.slots = reshape(dist.mu, {1, 1, d}) + reshape(dist.sigma(), {1, 1, d}) * eta;
      bank.k_g = 1;
      bank.k_s = k;
      break;
    }
    case SlotKind::Query: {
      const std::size_t d = dist.query_table.dim(1);
      if (dist.query_table.dim(0) != k) throw ConfigError("query table rows must equal K");
      bank.slots = broadcast_to(reshape(dist.query_table, {1, k, d}), {batch, k, d});
      bank.k_g = 1;
      bank.k_s = k;
      break;
    }
  }
  return bank;
}

template <typename T>
SlotBank<T> init_slots(const SlotDistributionParams<T>& dist, std::size_t batch, std::uint64_t seed) {
  const auto seeds = batch_seeds(seed, batch);
  return init_slots(dist, std::span<const std::uint64_t>(seeds));
}

template <typename T>
AggregationResult<T> aggregation_block(const Tensor<T>& x_v, const SlotBank<T>& prev, const DiscoveryParams<T>& p) {
  const std::size_t d = prev.slots.dim(-1);
  const auto x = as_batch(x_v, d, "aggregation_block");
  if (x.dim(0) != prev.slots.dim(0)) throw DimensionError("aggregation_block: batch of features and slots differ");
  auto result = aggregate(p.k(x), p.v(x), prev, p);
  if (x_v.rank() == 2) result.a_slot = reshape(result.a_slot, {x.dim(1), prev.num_slots()});
  return result;
}

template <typename T>
SlotBank<T> interaction_block(const SlotBank<T>& s_hat, const DiscoveryParams<T>& p) {
  if (!p.use_interaction) return s_hat;
  const std::size_t b = s_hat.slots.dim(0), k = s_hat.slots.dim(1), d = s_hat.slots.dim(2);
  if (s_hat.k_g * s_hat.k_s != k) throw DimensionError("slot bank grouping does not cover K slots");
  // Group-major order makes each group a contiguous run of k_s rows.
  const auto grouped = reshape(s_hat.slots, {b * s_hat.k_g, s_hat.k_s, d});
  SlotBank<T> out = s_hat;
  out.slots = reshape(p.interaction(grouped), {b, k, d});
  return out;
}

template <typename T>
DiscoveryResult<T> discover(const Tensor<T>& x_v, const SlotDistributionParams<T>& dist, const DiscoveryParams<T>& p,
                            std::span<const std::uint64_t> image_seeds) {
  if (p.t_iters == 0) throw ConfigError("entity discovery needs T >= 1");
  SlotBank<T> bank = init_slots(dist, image_seeds);
  const std::size_t d = bank.slots.dim(-1);
  const auto x = as_batch(x_v, d, "discover");
  if (x.dim(0) != image_seeds.size()) {
    throw DimensionError("discover: " + std::to_string(x.dim(0)) + " images but " +
                         std::to_string(image_seeds.size()) + " seeds");
  }
  // Keys and values of the patches do not depend on the slots.
  const auto kx = p.k(x);
  const auto vx = p.v(x);
  Tensor<T> a_slot;
  for (std::size_t t = 0; t < p.t_iters; ++t) {
    auto agg = aggregate(kx, vx, bank, p);
    a_slot = agg.a_slot;
    bank = interaction_block(agg.bank, p);
  }
  if (x_v.rank() == 2) {
    const std::size_t k = bank.num_slots();
    return {reshape(bank.slots, {k, d}), reshape(a_slot, {x.dim(1), k})};
  }
  return {bank.slots, a_slot};
}

template <typename T>
DiscoveryResult<T> discover(const Tensor<T>& x_v, const SlotDistributionParams<T>& dist, const DiscoveryParams<T>& p,
                            std::uint64_t seed) {
  const std::size_t batch = x_v.rank() == 3 ? x_v.dim(0) : 1;
  const auto seeds = batch_seeds(seed, batch);
  return discover(x_v, dist, p, std::span<const std::uint64_t>(seeds));
}

#define REFSEG_INSTANTIATE_DISCOVERY(T)                                                                         \
  template struct SlotDistributionParams<T>;                                                                    \
  template struct DiscoveryParams<T>;                                                                           \
  template SlotBank<T> init_slots(const SlotDistributionParams<T>&, std::span<const std::uint64_t>);            \
  template SlotBank<T> init_slots(const SlotDistributionParams<T>&, std::size_t, std::uint64_t);                \
  template AggregationResult<T> aggregation_block(const Tensor<T>&, const SlotBank<T>&, const DiscoveryParams<T>&); \
  template SlotBank<T> interaction_block(const SlotBank<T>&, const DiscoveryParams<T>&);                        \
  template DiscoveryResult<T> discover(const Tensor<T>&, const SlotDistributionParams<T>&,                      \
                                       const DiscoveryParams<T>&, std::span<const std::uint64_t>);               \
  template DiscoveryResult<T> discover(const Tensor<T>&, const SlotDistributionParams<T>&,                      \
                                       const DiscoveryParams<T>&, std::uint64_t);

REFSEG_INSTANTIATE_DISCOVERY(float)
REFSEG_INSTANTIATE_DISCOVERY(double)

#undef REFSEG_INSTANTIATE_DISCOVERY

}  // namespace refseg
