#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "refseg/tensor.hpp"

namespace refseg {

enum class FeatureRole : std::uint8_t { Visual = 0, Textual = 1 };

inline constexpr std::uint16_t kFeatureFileVersion = 1;

struct FeatureFile {
  FeatureRole role = FeatureRole::Visual;
  std::vector<std::uint32_t> dims;
  std::vector<float> payload;  // row-major
};

/// "SGFT", u16 version, u8 role, u32 rank, u32 extents, little-endian f32.
void write_feature_file(const std::filesystem::path& path, const FeatureFile& file);
FeatureFile read_feature_file(const std::filesystem::path& path);

template <typename T>
void write_feature_file(const std::filesystem::path& path, const Tensor<T>& tensor, FeatureRole role);
/// The payload as a tensor of the requested precision.
template <typename T>
Tensor<T> read_feature_tensor(const std::filesystem::path& path, FeatureRole* role = nullptr);

}  // namespace refseg
