#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>

namespace refseg {

/// How the initial slots S^0 are produced.
///   Entity: K_s samples from each of K_g learnable Gaussians (group-major).
///   Random: all K slots from one learnable Gaussian.
///   Query:  a learnable K x D embedding table, no sampling.
enum class SlotKind { Entity, Random, Query };

/// Which axis the aggregation softmax normalises. Slots is the competitive
/// slot-attention form; Keys is the plain transformer form (ablation only).
enum class AttentionNorm { Slots, Keys };

enum class PositionalEncoding { OneD, TwoD };

enum class Precision { F32, F64 };

std::string to_string(SlotKind kind);
std::string to_string(AttentionNorm norm);
std::string to_string(PositionalEncoding pe);
std::string to_string(Precision p);
SlotKind parse_slot_kind(std::string_view s);
AttentionNorm parse_attention_norm(std::string_view s);
PositionalEncoding parse_positional_encoding(std::string_view s);
Precision parse_precision(std::string_view s);

struct ModelConfig {
  std::size_t feature_dim = 512;  // D
  std::size_t hidden_dim = 1024;  // D_h
  std::size_t t_iters = 6;
  SlotKind slot_kind = SlotKind::Entity;
  std::size_t k_g = 18;
  std::size_t k_s = 2;
  std::size_t interaction_heads = 4;
  std::size_t mlp_ratio = 4;
  bool use_interaction = true;
  AttentionNorm attention_norm = AttentionNorm::Slots;
  bool fusion_mlp = true;
  std::size_t decoder_hidden = 0;  // 0 selects 2 * D
  PositionalEncoding positional_encoding = PositionalEncoding::OneD;
  std::size_t grid_h = 24;
  std::size_t grid_w = 24;

  std::size_t num_slots() const { return k_g * k_s; }
  std::size_t num_patches() const { return grid_h * grid_w; }
  std::size_t decoder_width() const { return decoder_hidden ? decoder_hidden : 2 * feature_dim; }
  /// Throws ConfigError on inconsistent settings.
  void validate() const;
};

}  // namespace refseg
