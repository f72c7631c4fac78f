#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "refseg/inference.hpp"
#include "refseg/tensor.hpp"

// Planted-entity scenes standing in for backbone features: rectangles of
// patches carry a group prototype plus an instance offset, everything else
// carries a background prototype. The text feature names one or more of the
// planted instances.
namespace refseg {

struct SyntheticSpec {
  std::size_t grid_h = 24;
  std::size_t grid_w = 24;
  std::size_t num_groups = 6;
  std::size_t max_instances = 4;
  std::size_t feature_dim = 64;
  double noise_std = 0.05;
  double offset_scale = 0.4;  // norm of the per-instance offset
  std::size_t min_side = 4;   // rectangle side range, in patches
  std::size_t max_side = 10;
  std::size_t referent_arity = 1;
  std::size_t patch_px = 16;  // image pixels per patch side
  std::size_t num_items = 2500;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t num_patches() const { return grid_h * grid_w; }
  std::size_t image_h() const { return grid_h * patch_px; }
  std::size_t image_w() const { return grid_w * patch_px; }
};

struct PlantedInstance {
  std::size_t group = 0;
  std::size_t top = 0, left = 0, height = 0, width = 0;  // in patches

  bool covers(std::size_t r, std::size_t c) const {
    return r >= top && r < top + height && c >= left && c < left + width;
  }
};

struct SyntheticItem {
  std::vector<float> visual;   // [N, D]
  std::vector<float> textual;  // [D]
  std::vector<PlantedInstance> instances;
  std::vector<std::size_t> referred;  // indices into instances
  Mask gt_grid;                       // [grid_h, grid_w]
};

struct SyntheticDataset {
  SyntheticSpec spec;
  std::vector<std::vector<float>> prototypes;  // num_groups group prototypes, then background
  std::vector<SyntheticItem> items;

  /// Ground truth at image resolution (nearest upscale of the patch mask).
  Mask gt_mask(std::size_t item) const;
  /// Patch mask of one planted instance.
  Mask instance_grid(std::size_t item, std::size_t instance) const;
};

/// Orthonormal rows from Gram-Schmidt on Gaussian draws; count <= dim.
std::vector<std::vector<float>> orthonormal_prototypes(std::size_t count, std::size_t dim, std::uint64_t seed);

SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

Mask upscale(const Mask& grid, std::size_t factor);

/// Per-patch nearest prototype (index num_groups is background).
std::vector<std::size_t> nearest_prototype(const SyntheticDataset& data, std::size_t item);

/// Deterministic 80/20 split by seeded shuffle: first train, then eval indices.
struct Split {
  std::vector<std::size_t> train;
  std::vector<std::size_t> eval;
};
Split split_items(std::size_t count, std::uint64_t seed, double train_fraction = 0.8);

/// Stacks the selected items into [B, N, D] and [B, D] tensors.
template <typename T>
Tensor<T> stack_visual(const SyntheticDataset& data, std::span<const std::size_t> idx);
template <typename T>
Tensor<T> stack_textual(const SyntheticDataset& data, std::span<const std::size_t> idx);

/// Directory layout: spec.json, visual.sgft [M, N, D], textual.sgft [M, D],
/// gt.pgm (the M patch masks stacked vertically), instances.json.
void save_dataset(const SyntheticDataset& data, const std::filesystem::path& dir);
SyntheticDataset load_dataset(const std::filesystem::path& dir);

}  // namespace refseg
