#pragma once

#include <functional>
#include <string>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/metrics.hpp"
#include "refseg/synthetic.hpp"

namespace refseg {

struct AblationRow {
  std::string axis;
  std::string value;
  std::uint64_t seed = 0;
  Metrics metrics;
};

/// slot_kind, kgks, t_iters, tau, scheme, loss, components.
const std::vector<std::string>& ablation_axes();

/// Grid values of an axis as they appear in the CSV value column.
std::vector<std::string> ablation_values(const std::string& axis);

/// Trains and evaluates every grid point of the axis for every seed. Axes
/// that only change inference (tau, scheme) reuse one trained model per seed.
std::vector<AblationRow> run_ablation(const std::string& axis, const RunConfig& base, const SyntheticDataset& data,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const AblationRow&)>& on_row = {});

std::string rows_to_csv(const std::vector<AblationRow>& rows);
std::vector<AblationRow> rows_from_csv(const std::string& text);

}  // namespace refseg
