#include "refseg/inference.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "refseg/errors.hpp"
#include "refseg/ops.hpp"

namespace refseg {

std::string to_string(InferenceScheme scheme) {
  switch (scheme) {
    case InferenceScheme::Compose: return "compose";
    case InferenceScheme::Avg: return "avg";
    case InferenceScheme::Max: return "max";
    case InferenceScheme::Min: return "min";
  }
  return "?";
}

InferenceScheme parse_scheme(std::string_view s) {
  if (s == "compose") return InferenceScheme::Compose;
  if (s == "avg") return InferenceScheme::Avg;
  if (s == "max") return InferenceScheme::Max;
  if (s == "min") return InferenceScheme::Min;
  throw ConfigError("unknown inference scheme '" + std::string(s) + "' (compose|avg|max|min)");
}

Mask::Mask(std::size_t h, std::size_t w, std::uint8_t fill) : height(h), width(w), bits(h * w, fill) {
  if (h == 0 || w == 0) throw DimensionError("mask extents must be positive");
}

std::size_t Mask::count() const {
  return static_cast<std::size_t>(std::count(bits.begin(), bits.end(), std::uint8_t{1}));
}

template <typename T>
std::vector<double> relevance_map(const Tensor<T>& a_slot, const Tensor<T>& a_fuse, InferenceScheme scheme) {
  if (a_slot.rank() != 2 || a_fuse.rank() != 1 || a_fuse.dim(0) != a_slot.dim(1)) {
    throw DimensionError("relevance map needs A_slot [N, K] and A_fuse [K], got " + shape_str(a_slot.shape()) +
                         " and " + shape_str(a_fuse.shape()));
  }
  const std::size_t n = a_slot.dim(0), k = a_slot.dim(1);
  const auto fuse = a_fuse.data();
  std::vector<double> weights(k, 0.0);
  switch (scheme) {
    case InferenceScheme::Compose:
      for (std::size_t j = 0; j < k; ++j) weights[j] = static_cast<double>(fuse[j]);
      break;
    case InferenceScheme::Avg:
      // Same rounding as a uniform A_fuse stored at precision T.
      std::fill(weights.begin(), weights.end(), static_cast<double>(T(1) / static_cast<T>(k)));
      break;
    case InferenceScheme::Max:
      weights[static_cast<std::size_t>(std::max_element(fuse.begin(), fuse.end()) - fuse.begin())] = 1.0;
      break;
    case InferenceScheme::Min:
      weights[static_cast<std::size_t>(std::min_element(fuse.begin(), fuse.end()) - fuse.begin())] = 1.0;
      break;
  }
  const auto slot = a_slot.data();
  std::vector<double> v(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += static_cast<double>(slot[i * k + j]) * weights[j];
    v[i] = acc;
  }
  return v;
}

std::vector<double> normalized_map(const std::vector<double>& v, std::size_t grid_h, std::size_t grid_w,
                                   std::size_t out_h, std::size_t out_w) {
  if (v.size() != grid_h * grid_w) {
    throw DimensionError("relevance map has " + std::to_string(v.size()) + " entries, grid is " +
                         std::to_string(grid_h) + "x" + std::to_string(grid_w));
  }
  NoGradGuard no_grad;
  auto up = bilinear_upsample(Tensor<double>({grid_h, grid_w}, v), out_h, out_w).to_vector();
  const auto [lo_it, hi_it] = std::minmax_element(up.begin(), up.end());
  const double lo = *lo_it, hi = *hi_it;
  const double range = hi - lo;
  if (!(range > kDegenerateRange * std::max(std::fabs(hi), std::fabs(lo)))) {
    std::fill(up.begin(), up.end(), 0.0);
    return up;
  }
  for (auto& x : up) x = (x - lo) / range;
  return up;
}

Mask binarize(const std::vector<double>& map, std::size_t height, std::size_t width, double tau) {
  if (map.size() != height * width) throw DimensionError("binarize: map size does not match extents");
  Mask mask(height, width);
  for (std::size_t i = 0; i < map.size(); ++i) mask.bits[i] = map[i] > tau ? 1 : 0;
  return mask;
}

template <typename T>
Mask predict_mask(const Tensor<T>& a_slot, const Tensor<T>& a_fuse, std::size_t grid_h, std::size_t grid_w,
                  std::size_t out_h, std::size_t out_w, double tau, InferenceScheme scheme) {
  if (!(tau > 0.0 && tau < 1.0)) throw DomainError("tau must lie in (0, 1)");
  if (a_slot.rank() != 2 || a_slot.dim(0) != grid_h * grid_w) {
    throw DimensionError("A_slot " + shape_str(a_slot.shape()) + " does not cover a " + std::to_string(grid_h) +
                         "x" + std::to_string(grid_w) + " grid");
  }
  const auto v = relevance_map(a_slot, a_fuse, scheme);
  return binarize(normalized_map(v, grid_h, grid_w, out_h, out_w), out_h, out_w, tau);
}

#define REFSEG_INSTANTIATE_INFERENCE(T)                                                                   \
  template std::vector<double> relevance_map(const Tensor<T>&, const Tensor<T>&, InferenceScheme);       \
  template Mask predict_mask(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t, std::size_t, \
                             std::size_t, double, InferenceScheme);

REFSEG_INSTANTIATE_INFERENCE(float)
REFSEG_INSTANTIATE_INFERENCE(double)

#undef REFSEG_INSTANTIATE_INFERENCE

}  // namespace refseg
