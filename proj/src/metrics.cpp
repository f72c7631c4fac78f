#include "refseg/metrics.hpp"

#include <cstdio>
#include <json.hpp>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

struct Counts {
  std::uint64_t intersection = 0;
  std::uint64_t uni = 0;
};

Counts count_overlap(const Mask& pred, const Mask& gt) {
  if (pred.height != gt.height || pred.width != gt.width) {
    throw DimensionError("mask sizes differ: " + std::to_string(pred.height) + "x" + std::to_string(pred.width) +
                         " vs " + std::to_string(gt.height) + "x" + std::to_string(gt.width));
  }
  Counts c;
  for (std::size_t i = 0; i < pred.bits.size(); ++i) {
    c.intersection += static_cast<std::uint64_t>(pred.bits[i] & gt.bits[i]);
    c.uni += static_cast<std::uint64_t>(pred.bits[i] | gt.bits[i]);
  }
  return c;
}

double ratio(const Counts& c) {
  return c.uni == 0 ? 1.0 : static_cast<double>(c.intersection) / static_cast<double>(c.uni);
}

std::string fixed4(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

}  // namespace

double iou(const Mask& pred, const Mask& gt) { return ratio(count_overlap(pred, gt)); }

void EvalRecord::accumulate(const Mask& pred, const Mask& gt) {
  const auto c = count_overlap(pred, gt);
  intersection_ += c.intersection;
  union_ += c.uni;
  ious_.push_back(ratio(c));
}

void EvalRecord::merge(const EvalRecord& other) {
  intersection_ += other.intersection_;
  union_ += other.union_;
  ious_.insert(ious_.end(), other.ious_.begin(), other.ious_.end());
}

Metrics EvalRecord::finalize() const {
  if (ious_.empty()) throw StateError("cannot finalize an empty evaluation record");
  Metrics m;
  m.ciou = union_ == 0 ? 1.0 : static_cast<double>(intersection_) / static_cast<double>(union_);
  double sum = 0.0;
  for (double v : ious_) sum += v;
  m.miou = sum / static_cast<double>(ious_.size());
  for (std::size_t t = 0; t < kAccuracyThresholds.size(); ++t) {
    std::size_t hits = 0;
    for (double v : ious_) hits += v >= kAccuracyThresholds[t] ? 1 : 0;
    m.acc[t] = static_cast<double>(hits) / static_cast<double>(ious_.size());
  }
  return m;
}

std::string Metrics::to_json() const {
  return "{\"ciou\": " + fixed4(ciou) + ", \"miou\": " + fixed4(miou) + ", \"acc@0.3\": " + fixed4(acc[0]) +
         ", \"acc@0.5\": " + fixed4(acc[1]) + ", \"acc@0.7\": " + fixed4(acc[2]) + "}";
}

Metrics Metrics::from_json(const std::string& text) {
  try {
    const auto j = nlohmann::json::parse(text);
    Metrics m;
    m.ciou = j.at("ciou").get<double>();
    m.miou = j.at("miou").get<double>();
    m.acc[0] = j.at("acc@0.3").get<double>();
    m.acc[1] = j.at("acc@0.5").get<double>();
    m.acc[2] = j.at("acc@0.7").get<double>();
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("metrics json: ") + e.what());
  }
}

}  // namespace refseg
