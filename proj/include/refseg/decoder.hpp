#pragma once

#include "refseg/model_config.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// Sinusoidal table [N, D]. OneD encodes the patch index; TwoD spends half
/// the channels on the row and half on the column of an h x w grid.
template <typename T>
Tensor<T> sinusoidal_positions(std::size_t grid_h, std::size_t grid_w, std::size_t dim, PositionalEncoding kind);

/// Spatial broadcast decoder: a four-layer ReLU MLP D -> H -> H -> H -> D+1
/// applied to (slot + position) for every slot and position.
template <typename T>
struct DecoderParams {
  LinearLayer<T> l1, l2, l3, l4;
  Tensor<T> positions;  // [N, D], constant

  static DecoderParams create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng);
  std::size_t num_positions() const { return positions.dim(0); }
};

/// Fused layers 2-4 plus slot mixing. slot_hidden is l1(slots) [B, K, H] and
/// pos_hidden is positions . W1 [N, H]; layer one is relu(slot + pos). The
/// result is [B, N * D + K * N]: per image the reconstruction [N, D]
/// followed by the mixing weights [K, N].
template <typename T>
Tensor<T> decoder_core(const Tensor<T>& slot_hidden, const Tensor<T>& pos_hidden, const LinearLayer<T>& l2,
                       const LinearLayer<T>& l3, const LinearLayer<T>& l4);

template <typename T>
struct DecodeResult {
  Tensor<T> reconstruction;  // [N, D] or [B, N, D]
  Tensor<T> weights;         // [K, N] or [B, K, N]; sums to 1 over slots at each position
};

/// The last MLP channel is softmaxed across slots at each position, and the
/// reconstruction is the weighted sum of the slots' first D channels.
/// entities is [K, D] or [B, K, D]; n must equal the positional table length.
template <typename T>
DecodeResult<T> spatial_broadcast_decode(const Tensor<T>& entities, std::size_t n, const DecoderParams<T>& p);

}  // namespace refseg
