#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "refseg/tensor.hpp"

namespace refseg {

enum class InferenceScheme { Compose, Avg, Max, Min };

std::string to_string(InferenceScheme scheme);
InferenceScheme parse_scheme(std::string_view s);

inline constexpr double kDefaultTau = 0.5;
/// A map whose range is at most this fraction of its magnitude is treated
/// as constant and yields an empty mask.
inline constexpr double kDegenerateRange = 1e-5;

struct Mask {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<std::uint8_t> bits;  // row-major, 0 or 1

  Mask() = default;
  Mask(std::size_t h, std::size_t w, std::uint8_t fill = 0);

  std::uint8_t at(std::size_t r, std::size_t c) const { return bits[r * width + c]; }
  std::size_t count() const;
  bool operator==(const Mask& other) const = default;
};

/// Patch-level relevance v (length N) in double precision.
///   Compose: v = A_slot . A_fuse     Avg: A_slot . (1/K, ..., 1/K)
///   Max / Min: the A_slot column of the most / least relevant slot.
template <typename T>
std::vector<double> relevance_map(const Tensor<T>& a_slot, const Tensor<T>& a_fuse, InferenceScheme scheme);

/// Relevance -> grid -> bilinear upsample -> min-max normalise. Returns the
/// [out_h, out_w] map in [0, 1], or all zeros when the map is degenerate.
std::vector<double> normalized_map(const std::vector<double>& v, std::size_t grid_h, std::size_t grid_w,
                                   std::size_t out_h, std::size_t out_w);

/// Full pipeline; pixels strictly above tau are foreground.
template <typename T>
Mask predict_mask(const Tensor<T>& a_slot, const Tensor<T>& a_fuse, std::size_t grid_h, std::size_t grid_w,
                  std::size_t out_h, std::size_t out_w, double tau = kDefaultTau,
                  InferenceScheme scheme = InferenceScheme::Compose);

Mask binarize(const std::vector<double>& map, std::size_t height, std::size_t width, double tau);

}  // namespace refseg
