#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace refseg {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Cache-line aligned storage, so that vectorised kernels see the same
/// alignment (and hence the same summation order) on every run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const { return true; }
};

template <typename T>
using Buffer = std::vector<T, AlignedAllocator<T>>;

namespace detail {

// One recorded value. Leaves have no inputs; op outputs keep their inputs
// alive and carry the closure that pushes their gradient into them.
template <typename T>
struct Node {
  Shape shape;
  Buffer<T> value;
  Buffer<T> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }

  Buffer<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// True unless a NoGradGuard is alive on the calling thread.
bool grad_enabled();

/// Suspends graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Dense row-major array with reverse-mode gradient tracking.
///
/// A Tensor is a cheap handle; copies share the underlying node. Values are
/// immutable once an op has produced them. Leaves (parameters, inputs) may be
/// rewritten through mutable_data(), which is how the optimizer steps.
template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;
  explicit Tensor(Shape shape, T fill = T(0));
  Tensor(Shape shape, std::vector<T> values);

  static Tensor scalar(T value);
  static Tensor parameter(Shape shape, std::vector<T> values);
  static Tensor from_node(NodePtr node);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  /// Extent of `axis`; negative values count from the last axis.
  std::size_t dim(int axis) const;

  std::span<const T> data() const;
  T item() const;
  T operator[](std::size_t flat_index) const { return data()[flat_index]; }
  std::vector<T> to_vector() const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  /// Accumulated gradient; empty when nothing has flowed into this tensor.
  std::span<const T> grad() const;
  std::vector<T> grad_or_zeros() const;
  void zero_grad();

  /// In-place access for leaves only; throws StateError on op outputs.
  std::span<T> mutable_data();

  const char* op_name() const;
  const NodePtr& node() const { return node_; }

  /// Copy into another precision as a fresh leaf without gradient tracking.
  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return Tensor<U>(shape(), std::move(out));
  }

 private:
  NodePtr node_;
};

/// Recorded operations reachable from a root, in topological order (every
/// op after its inputs). Only nodes that require gradients are listed.
template <typename T>
class Graph {
 public:
  explicit Graph(const Tensor<T>& root);

  std::size_t size() const { return order_.size(); }
  const std::vector<detail::Node<T>*>& order() const { return order_; }

  /// Seeds d(root)/d(root) = 1 and runs every backward closure once, in
  /// reverse topological order. Root must hold a single element.
  void backward();
  void backward(std::span<const T> seed);

 private:
  Tensor<T> root_;
  std::vector<detail::Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& root) {
  Graph<T>(root).backward();
}

extern template class Tensor<float>;
extern template class Tensor<double>;
extern template class Graph<float>;
extern template class Graph<double>;

}  // namespace refseg
