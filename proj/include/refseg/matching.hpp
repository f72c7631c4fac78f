#pragma once

#include <cstddef>
#include <vector>

namespace refseg {

inline constexpr std::size_t kExhaustiveMatchLimit = 8;

/// Assigns each row to a distinct column maximising the summed score.
/// rows <= cols is required. Exact (optimal over all assignments) for up to
/// kExhaustiveMatchLimit rows, greedy on the largest remaining score beyond.
std::vector<std::size_t> match_rows(const std::vector<std::vector<double>>& score);

}  // namespace refseg
