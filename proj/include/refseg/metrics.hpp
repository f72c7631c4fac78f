#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "refseg/inference.hpp"

namespace refseg {

inline constexpr std::array<double, 3> kAccuracyThresholds = {0.3, 0.5, 0.7};

/// |pred & gt| / |pred | gt|, with 1.0 when both masks are empty.
double iou(const Mask& pred, const Mask& gt);

struct Metrics {
  double ciou = 0.0;
  double miou = 0.0;
  std::array<double, 3> acc{};  // at kAccuracyThresholds, IoU >= t

  std::string to_json() const;
  static Metrics from_json(const std::string& text);
};

class EvalRecord {
 public:
  void accumulate(const Mask& pred, const Mask& gt);
  /// Concatenates another shard; order of per-image IoUs is this then other.
  void merge(const EvalRecord& other);
  Metrics finalize() const;

  std::size_t count() const { return ious_.size(); }
  std::uint64_t total_intersection() const { return intersection_; }
  std::uint64_t total_union() const { return union_; }
  const std::vector<double>& ious() const { return ious_; }

 private:
  std::uint64_t intersection_ = 0;
  std::uint64_t union_ = 0;
  std::vector<double> ious_;
};

/// Binary PGM (P5, maxval 255). Foreground is written as 255; on read any
/// pixel above 127 is foreground.
void write_pgm(const std::filesystem::path& path, const Mask& mask);
Mask read_pgm(const std::filesystem::path& path);

}  // namespace refseg
