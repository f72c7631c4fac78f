#include "refseg/model.hpp"

#include <algorithm>

#include "refseg/errors.hpp"

namespace refseg {

std::string to_string(SlotKind kind) {
  switch (kind) {
    case SlotKind::Entity: return "entity";
    case SlotKind::Random: return "random";
    case SlotKind::Query: return "query";
  }
  return "?";
}

std::string to_string(AttentionNorm norm) { return norm == AttentionNorm::Slots ? "slots" : "keys"; }

std::string to_string(PositionalEncoding pe) { return pe == PositionalEncoding::OneD ? "1d" : "2d"; }

std::string to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

SlotKind parse_slot_kind(std::string_view s) {
  if (s == "entity") return SlotKind::Entity;
  if (s == "random") return SlotKind::Random;
  if (s == "query") return SlotKind::Query;
  throw ConfigError("unknown slot kind '" + std::string(s) + "' (entity|random|query)");
}

AttentionNorm parse_attention_norm(std::string_view s) {
  if (s == "slots") return AttentionNorm::Slots;
  if (s == "keys") return AttentionNorm::Keys;
  throw ConfigError("unknown attention normalisation '" + std::string(s) + "' (slots|keys)");
}

PositionalEncoding parse_positional_encoding(std::string_view s) {
  if (s == "1d") return PositionalEncoding::OneD;
  if (s == "2d") return PositionalEncoding::TwoD;
  throw ConfigError("unknown positional encoding '" + std::string(s) + "' (1d|2d)");
}

Precision parse_precision(std::string_view s) {
  if (s == "f32") return Precision::F32;
  if (s == "f64") return Precision::F64;
  throw ConfigError("unknown precision '" + std::string(s) + "' (f32|f64)");
}

void ModelConfig::validate() const {
  if (feature_dim == 0 || hidden_dim == 0) throw ConfigError("D and D_h must be positive");
  if (k_g == 0 || k_s == 0) throw ConfigError("K_g and K_s must be positive");
  if (t_iters == 0) throw ConfigError("T must be at least 1");
  if (grid_h == 0 || grid_w == 0) throw ConfigError("patch grid must be non-empty");
  if (interaction_heads == 0 || feature_dim % interaction_heads != 0) {
    throw ConfigError("D must be divisible by the interaction head count");
  }
  if (mlp_ratio == 0) throw ConfigError("mlp_ratio must be positive");
  if (positional_encoding == PositionalEncoding::TwoD && feature_dim < 2) {
    throw ConfigError("2-D positional encoding needs D >= 2");
  }
}

template <typename T>
Model<T>::Model(const ModelConfig& config, std::uint64_t init_seed) : config_(config) {
  config_.validate();
  Rng rng(init_seed);
  slots_ = SlotDistributionParams<T>::create(store_, config_, rng);
  discovery_ = DiscoveryParams<T>::create(store_, config_, rng);
  fusion_ = FusionParams<T>::create(store_, config_, rng);
  decoder_ = DecoderParams<T>::create(store_, config_, rng);
}

template <typename T>
DiscoveryResult<T> Model<T>::discover(const Tensor<T>& x_v, std::uint64_t seed) const {
  const std::size_t batch = x_v.rank() == 3 ? x_v.dim(0) : 1;
  const auto seeds = batch_seeds(seed, batch);
  return discover(x_v, std::span<const std::uint64_t>(seeds));
}

template <typename T>
DiscoveryResult<T> Model<T>::discover(const Tensor<T>& x_v, std::span<const std::uint64_t> image_seeds) const {
  auto result = refseg::discover(x_v, slots_, discovery_, image_seeds);
  discovered_images_ += image_seeds.size();
  return result;
}

template class Model<float>;
template class Model<double>;

}  // namespace refseg
