#include "refseg/matching.hpp"

#include <limits>

#include "refseg/errors.hpp"

namespace refseg {

namespace {

// Exact optimum by dynamic programming over the subset of rows already
// placed, sweeping columns one at a time: O(cols * 2^rows * rows).
std::vector<std::size_t> exact_match(const std::vector<std::vector<double>>& score, std::size_t cols) {
  const std::size_t rows = score.size(), full = (std::size_t{1} << rows) - 1;
  const double none = -std::numeric_limits<double>::infinity();
  // best[c][mask]: best total using columns < c with rows in mask assigned.
  std::vector<std::vector<double>> best(cols + 1, std::vector<double>(full + 1, none));
  std::vector<std::vector<int>> choice(cols + 1, std::vector<int>(full + 1, -1));
  best[0][0] = 0.0;
  for (std::size_t c = 0; c < cols; ++c) {
    for (std::size_t mask = 0; mask <= full; ++mask) {
      if (best[c][mask] == none) continue;
      if (best[c][mask] > best[c + 1][mask]) {
        best[c + 1][mask] = best[c][mask];
        choice[c + 1][mask] = -1;
      }
      for (std::size_t r = 0; r < rows; ++r) {
        if (mask & (std::size_t{1} << r)) continue;
        const std::size_t next = mask | (std::size_t{1} << r);
        const double total = best[c][mask] + score[r][c];
        if (total > best[c + 1][next]) {
          best[c + 1][next] = total;
          choice[c + 1][next] = static_cast<int>(r);
        }
      }
    }
  }
  std::vector<std::size_t> out(rows);
  std::size_t mask = full;
  for (std::size_t c = cols; c > 0; --c) {
    const int r = choice[c][mask];
    if (r >= 0) {
      out[static_cast<std::size_t>(r)] = c - 1;
      mask &= ~(std::size_t{1} << r);
    }
  }
  return out;
}

}  // namespace

std::vector<std::size_t> match_rows(const std::vector<std::vector<double>>& score) {
  if (score.empty()) return {};
  const std::size_t cols = score.front().size();
  for (const auto& row : score) {
    if (row.size() != cols) throw DimensionError("match_rows: ragged score matrix");
  }
  if (score.size() > cols) throw DimensionError("match_rows: more rows than columns");
  if (score.size() <= kExhaustiveMatchLimit) {
    return exact_match(score, cols);
  }
  std::vector<std::size_t> out(score.size());
  std::vector<bool> row_done(score.size(), false), col_used(cols, false);
  for (std::size_t k = 0; k < score.size(); ++k) {
    double best = -std::numeric_limits<double>::infinity();
    std::size_t br = 0, bc = 0;
    for (std::size_t r = 0; r < score.size(); ++r) {
      if (row_done[r]) continue;
      for (std::size_t c = 0; c < cols; ++c) {
        if (!col_used[c] && score[r][c] > best) {
          best = score[r][c];
          br = r;
          bc = c;
        }
      }
    }
    row_done[br] = true;
    col_used[bc] = true;
    out[br] = bc;
  }
  return out;
}

}  // namespace refseg
