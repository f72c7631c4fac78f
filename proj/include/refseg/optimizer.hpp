#pragma once

#include <cstdint>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/nn.hpp"

namespace refseg {

/// lr0 * (1 + cos(pi * step / (total - 1))) / 2: lr0 at the first step and
/// exactly 0 at the last.
double cosine_lr(double lr0, std::size_t step, std::size_t total_steps);

/// AdamW with decoupled weight decay over every tensor of a ParamStore.
template <typename T>
class AdamW {
 public:
  AdamW(ParamStore<T>& store, const OptimizerConfig& cfg);

  /// One update at learning rate lr using the gradients currently stored
  /// on the parameters. Parameters with no gradient only decay.
  void step(double lr);

  std::uint64_t steps() const { return steps_; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<std::vector<T>>& first_moments() const { return m_; }
  const std::vector<std::vector<T>>& second_moments() const { return v_; }
  void set_steps(std::uint64_t steps) { steps_ = steps; }

 private:
  ParamStore<T>* store_;
  OptimizerConfig cfg_;
  std::vector<std::vector<T>> m_, v_;
  std::uint64_t steps_ = 0;
};

extern template class AdamW<float>;
extern template class AdamW<double>;

}  // namespace refseg
