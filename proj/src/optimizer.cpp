#include "refseg/optimizer.hpp"

#include <cmath>
#include <numbers>

#include "refseg/errors.hpp"

namespace refseg {

double cosine_lr(double lr0, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) throw ConfigError("cosine schedule needs at least one step");
  if (total_steps == 1) return lr0;
  const double progress = static_cast<double>(std::min(step, total_steps - 1)) / static_cast<double>(total_steps - 1);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template <typename T>
AdamW<T>::AdamW(ParamStore<T>& store, const OptimizerConfig& cfg) : store_(&store), cfg_(cfg) {
  for (const auto& [name, p] : store.entries()) {
    m_.emplace_back(p.numel(), T(0));
    v_.emplace_back(p.numel(), T(0));
  }
}

template <typename T>
void AdamW<T>::step(double lr) {
  ++steps_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(steps_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(steps_));
  const double decay = 1.0 - lr * cfg_.weight_decay;
  const auto& entries = store_->entries();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    Tensor<T> param = entries[i].second;
    const auto grad = param.grad();
    auto value = param.mutable_data();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < value.size(); ++j) {
      const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
      const double mj = b1 * static_cast<double>(m[j]) + (1.0 - b1) * g;
      const double vj = b2 * static_cast<double>(v[j]) + (1.0 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      const double update = (mj / c1) / (std::sqrt(vj / c2) + cfg_.eps);
      value[j] = static_cast<T>(static_cast<double>(value[j]) * decay - lr * update);
    }
  }
}

template class AdamW<float>;
template class AdamW<double>;

}  // namespace refseg
