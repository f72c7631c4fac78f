#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <type_traits>
#include <string>
#include <utility>
#include <vector>

#include "refseg/errors.hpp"
#include "refseg/tensor.hpp"

namespace refseg::detail {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
using BackwardFn = std::function<void(Node<T>&)>;

template <typename T>
void check_finite(const char* op, std::span<const T> values) {
  // Exponent all ones means inf or nan. The integer OR reduction vectorises;
  // the index is only searched for once something was found.
  using Bits = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
  constexpr Bits exponent = sizeof(T) == 4 ? Bits(0x7f800000u) : Bits(0x7ff0000000000000ull);
  Bits bad = 0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    const Bits b = std::bit_cast<Bits>(values[i]);
    bad |= Bits((b & exponent) == exponent);
  }
  if (!bad) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string(op) + ": non-finite value at flat index " + std::to_string(i));
    }
  }
}

// Wraps an op's output value into a tensor. The backward closure and the
// input edges are kept only when recording is on and some input needs a
// gradient.
template <typename T>
Tensor<T> record(const char* op, Shape shape, Buffer<T> value, std::vector<NodePtr<T>> inputs,
                 BackwardFn<T> backward) {
  check_finite<T>(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  bool needs_grad = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || (in && in->requires_grad);
  }
  if (needs_grad) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor<T>::from_node(std::move(node));
}

template <typename T>
bool wants_grad(const NodePtr<T>& n) {
  return n && n->requires_grad;
}

}  // namespace refseg::detail
