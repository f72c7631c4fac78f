#pragma once

#include <cstdint>
#include <span>

#include "refseg/decoder.hpp"
#include "refseg/discovery.hpp"
#include "refseg/fusion.hpp"
#include "refseg/model_config.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// Every learnable piece of the segmentation model, registered in one
/// ParamStore. Not copyable: copies would alias the parameter tensors.
template <typename T>
class Model {
 public:
  Model(const ModelConfig& config, std::uint64_t init_seed);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) = default;
  Model& operator=(Model&&) = default;

  const ModelConfig& config() const { return config_; }
  ParamStore<T>& params() { return store_; }
  const ParamStore<T>& params() const { return store_; }

  const SlotDistributionParams<T>& slot_distribution() const { return slots_; }
  const DiscoveryParams<T>& discovery() const { return discovery_; }
  const FusionParams<T>& fusion() const { return fusion_; }
  const DecoderParams<T>& decoder() const { return decoder_; }

  /// Entity discovery on [N, D] or [B, N, D] features.
  DiscoveryResult<T> discover(const Tensor<T>& x_v, std::uint64_t seed) const;
  DiscoveryResult<T> discover(const Tensor<T>& x_v, std::span<const std::uint64_t> image_seeds) const;

  /// Number of images pushed through entity discovery since construction
  /// or the last reset.
  std::size_t discovered_images() const { return discovered_images_; }
  void reset_counters() { discovered_images_ = 0; }

 private:
  ModelConfig config_;
  ParamStore<T> store_;
  SlotDistributionParams<T> slots_;
  DiscoveryParams<T> discovery_;
  FusionParams<T> fusion_;
  DecoderParams<T> decoder_;
  mutable std::size_t discovered_images_ = 0;
};

extern template class Model<float>;
extern template class Model<double>;

}  // namespace refseg
