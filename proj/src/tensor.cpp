#include "refseg/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "record.hpp"
#include "refseg/errors.hpp"

namespace refseg {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
  }
}

}  // namespace

template <typename T>
Tensor<T>::Tensor(Shape shape, T fill) {
  validate_shape(shape);
  node_ = std::make_shared<detail::Node<T>>();
  node_->value.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  validate_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " needs " + std::to_string(shape_numel(shape)) +
                         " values, got " + std::to_string(values.size()));
  }
  detail::check_finite<T>("tensor", values);
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->value.assign(values.begin(), values.end());
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  Tensor t(std::move(shape), std::move(values));
  t.node_->requires_grad = true;
  return t;
}

template <typename T>
Tensor<T> Tensor<T>::from_node(NodePtr node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

template <typename T>
const Shape& Tensor<T>::shape() const {
  if (!node_) throw StateError("use of an undefined tensor");
  return node_->shape;
}

template <typename T>
std::size_t Tensor<T>::numel() const {
  return shape_numel(shape());
}

template <typename T>
std::size_t Tensor<T>::dim(int axis) const {
  const auto r = static_cast<int>(rank());
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(r));
  }
  return shape()[static_cast<std::size_t>(a)];
}

template <typename T>
std::span<const T> Tensor<T>::data() const {
  if (!node_) throw StateError("use of an undefined tensor");
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
  return node_->value[0];
}

template <typename T>
std::vector<T> Tensor<T>::to_vector() const {
  auto d = data();
  return {d.begin(), d.end()};
}

template <typename T>
bool Tensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <typename T>
void Tensor<T>::set_requires_grad(bool flag) {
  if (!node_) throw StateError("use of an undefined tensor");
  if (!node_->is_leaf()) throw StateError("requires_grad can only be changed on leaves");
  node_->requires_grad = flag;
}

template <typename T>
std::span<const T> Tensor<T>::grad() const {
  if (!node_) return {};
  return node_->grad;
}

template <typename T>
std::vector<T> Tensor<T>::grad_or_zeros() const {
  if (!node_ || node_->grad.empty()) return std::vector<T>(numel(), T(0));
  return {node_->grad.begin(), node_->grad.end()};
}

template <typename T>
void Tensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_) throw StateError("use of an undefined tensor");
  if (!node_->is_leaf()) throw StateError(std::string("cannot mutate output of op '") + node_->op + "'");
  return node_->value;
}

template <typename T>
const char* Tensor<T>::op_name() const {
  return node_ ? node_->op : "undefined";
}

template <typename T>
Graph<T>::Graph(const Tensor<T>& root) : root_(root) {
  if (!root.defined()) throw StateError("backward from an undefined tensor");
  auto* start = root.node().get();
  if (!start->requires_grad) return;

  // Iterative post-order DFS; a node is emitted after all of its inputs.
  std::unordered_set<detail::Node<T>*> seen;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(start, 0);
  seen.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child && child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order_.push_back(node);
      stack.pop_back();
    }
  }
}

template <typename T>
void Graph<T>::backward() {
  if (root_.numel() != 1) {
    throw DimensionError("backward() without a seed needs a single-element root, got " + shape_str(root_.shape()));
  }
  const T one = T(1);
  backward(std::span<const T>(&one, 1));
}

template <typename T>
void Graph<T>::backward(std::span<const T> seed) {
  if (order_.empty()) return;
  auto* root = order_.back();
  if (seed.size() != root->value.size()) throw DimensionError("backward seed size does not match root");
  auto& g = root->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
    auto* node = *it;
    if (node->is_leaf()) continue;
    if (!node->grad.empty() && node->backward) node->backward(*node);
    // Intermediate gradients are dead once pushed to the inputs.
    Buffer<T>().swap(node->grad);
  }
}

template class Tensor<float>;
template class Tensor<double>;
template class Graph<float>;
template class Graph<double>;

}  // namespace refseg
