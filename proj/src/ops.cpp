#include "refseg/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "record.hpp"
#include "refseg/errors.hpp"

namespace refseg {

namespace {

using detail::Node;
using detail::NodePtr;
using detail::record;
using detail::wants_grad;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

std::size_t normalize_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw DimensionError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

// View of a shape as [outer, len, inner] around one axis.
struct AxisSplit {
  std::size_t outer = 1;
  std::size_t len = 1;
  std::size_t inner = 1;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit out;
  for (std::size_t i = 0; i < axis; ++i) out.outer *= s[i];
  out.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) out.inner *= s[i];
  return out;
}

// Strides of `in` laid against `out` (right-aligned); 0 on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::size_t> strides(out.size(), 0);
  std::size_t stride = 1;
  const std::size_t offset = out.size() - in.size();
  for (std::size_t i = in.size(); i-- > 0;) {
    strides[offset + i] = in[i] == 1 ? 0 : stride;
    stride *= in[i];
  }
  return strides;
}

// Calls f(out_index, a_index, b_index) for every element of `out`.
template <class F>
void for_each_broadcast(const Shape& out, const std::vector<std::size_t>& sa, const std::vector<std::size_t>& sb,
                        F&& f) {
  const std::size_t r = out.size();
  if (r == 0) {
    f(std::size_t{0}, std::size_t{0}, std::size_t{0});
    return;
  }
  const std::size_t inner = out[r - 1];
  const std::size_t ia_step = sa[r - 1];
  const std::size_t ib_step = sb[r - 1];
  const std::size_t outer = shape_numel(out) / inner;
  std::vector<std::size_t> idx(r, 0);
  std::size_t ia = 0, ib = 0, o = 0;
  for (std::size_t row = 0; row < outer; ++row) {
    for (std::size_t j = 0; j < inner; ++j) f(o++, ia + j * ia_step, ib + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      ia += sa[d];
      ib += sb[d];
      if (idx[d] < out[d]) break;
      ia -= sa[d] * out[d];
      ib -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

template <typename T, class Fwd, class GradA, class GradB>
Tensor<T> binary_op(const char* name, const Tensor<T>& a, const Tensor<T>& b, Fwd fwd, GradA grad_a, GradB grad_b) {
  const Shape out_shape = broadcast_shape(a.shape(), b.shape());
  const auto av = a.data();
  const auto bv = b.data();
  Buffer<T> out(shape_numel(out_shape));
  const bool same = a.shape() == b.shape();
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    const auto sa = broadcast_strides(a.shape(), out_shape);
    const auto sb = broadcast_strides(b.shape(), out_shape);
    for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) { out[o] = fwd(av[i], bv[j]); });
  }
  return record<T>(name, out_shape, std::move(out), {a.node(), b.node()},
                   [out_shape, same, grad_a, grad_b](Node<T>& n) {
                     auto& na = *n.inputs[0];
                     auto& nb = *n.inputs[1];
                     const auto& g = n.grad;
                     const auto& av = na.value;
                     const auto& bv = nb.value;
                     T* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
                     T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
                     if (same) {
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (ga) ga[i] += grad_a(g[i], av[i], bv[i]);
                         if (gb) gb[i] += grad_b(g[i], av[i], bv[i]);
                       }
                       return;
                     }
                     const auto sa = broadcast_strides(na.shape, out_shape);
                     const auto sb = broadcast_strides(nb.shape, out_shape);
                     for_each_broadcast(out_shape, sa, sb, [&](std::size_t o, std::size_t i, std::size_t j) {
                       if (ga) ga[i] += grad_a(g[o], av[i], bv[j]);
                       if (gb) gb[j] += grad_b(g[o], av[i], bv[j]);
                     });
                   });
}

// dfn(x, y) is dy/dx at input x with output y.
template <typename T, class Fwd, class Deriv>
Tensor<T> unary_op(const char* name, const Tensor<T>& a, Fwd fwd, Deriv dfn) {
  const auto av = a.data();
  Buffer<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  return record<T>(name, a.shape(), std::move(out), {a.node()}, [dfn](Node<T>& n) {
    auto& in = *n.inputs[0];
    auto& ga = in.grad_buffer();
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += n.grad[i] * dfn(in.value[i], n.value[i]);
  });
}

template <typename T>
void add_into(Buffer<T>& dst, const Buffer<T>& src) {
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

}  // namespace

Shape broadcast_shape(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::size_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::size_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw DimensionError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul needs rank >= 2 operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.dim(-2), k = a.dim(-1), n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  Shape out_shape = a.shape();
  out_shape.back() = n;

  if (b.rank() == 2) {
    const auto rows = static_cast<Eigen::Index>(a.numel() / k);
    const auto K = static_cast<Eigen::Index>(k), Nn = static_cast<Eigen::Index>(n);
    Buffer<T> out(static_cast<std::size_t>(rows) * n);
    MatMap<T>(out.data(), rows, Nn).noalias() =
        ConstMatMap<T>(a.data().data(), rows, K) * ConstMatMap<T>(b.data().data(), K, Nn);
    return record<T>("matmul", out_shape, std::move(out), {a.node(), b.node()}, [rows, K, Nn](Node<T>& node) {
      auto& na = *node.inputs[0];
      auto& nb = *node.inputs[1];
      ConstMatMap<T> g(node.grad.data(), rows, Nn);
      if (na.requires_grad) {
        MatMap<T>(na.grad_buffer().data(), rows, K).noalias() += g * ConstMatMap<T>(nb.value.data(), K, Nn).transpose();
      }
      if (nb.requires_grad) {
        MatMap<T>(nb.grad_buffer().data(), K, Nn).noalias() += ConstMatMap<T>(na.value.data(), rows, K).transpose() * g;
      }
    });
  }

  if (a.rank() != b.rank() ||
      !std::equal(a.shape().begin(), a.shape().end() - 2, b.shape().begin(), b.shape().end() - 2)) {
    throw DimensionError("batched matmul needs identical leading axes: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  const std::size_t batch = a.numel() / (m * k);
  const auto M = static_cast<Eigen::Index>(m), K = static_cast<Eigen::Index>(k), Nn = static_cast<Eigen::Index>(n);
  Buffer<T> out(batch * m * n);
  for (std::size_t bi = 0; bi < batch; ++bi) {
    MatMap<T>(out.data() + bi * m * n, M, Nn).noalias() =
        ConstMatMap<T>(a.data().data() + bi * m * k, M, K) * ConstMatMap<T>(b.data().data() + bi * k * n, K, Nn);
  }
  return record<T>("bmm", out_shape, std::move(out), {a.node(), b.node()}, [batch, M, K, Nn](Node<T>& node) {
    auto& na = *node.inputs[0];
    auto& nb = *node.inputs[1];
    const std::size_t sa = static_cast<std::size_t>(M * K), sb = static_cast<std::size_t>(K * Nn),
                      sc = static_cast<std::size_t>(M * Nn);
    T* ga = na.requires_grad ? na.grad_buffer().data() : nullptr;
    T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
    for (std::size_t bi = 0; bi < batch; ++bi) {
      ConstMatMap<T> g(node.grad.data() + bi * sc, M, Nn);
      if (ga) {
        MatMap<T>(ga + bi * sa, M, K).noalias() += g * ConstMatMap<T>(nb.value.data() + bi * sb, K, Nn).transpose();
      }
      if (gb) {
        MatMap<T>(gb + bi * sb, K, Nn).noalias() += ConstMatMap<T>(na.value.data() + bi * sa, M, K).transpose() * g;
      }
    }
  });
}

namespace {

template <typename T>
Tensor<T> linear_impl(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>* bias) {
  if (weight.rank() != 2) throw DimensionError("linear weight must be [in, out], got " + shape_str(weight.shape()));
  if (x.rank() < 1 || x.dim(-1) != weight.dim(0)) {
    throw DimensionError("linear input " + shape_str(x.shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const std::size_t in = weight.dim(0), outd = weight.dim(1);
  if (bias && (bias->rank() != 1 || bias->dim(0) != outd)) {
    throw DimensionError("linear bias " + shape_str(bias->shape()) + " does not match weight " +
                         shape_str(weight.shape()));
  }
  const auto rows = static_cast<Eigen::Index>(x.numel() / in);
  const auto I = static_cast<Eigen::Index>(in), O = static_cast<Eigen::Index>(outd);
  Shape out_shape = x.shape();
  out_shape.back() = outd;
  Buffer<T> out(static_cast<std::size_t>(rows) * outd);
  MatMap<T> y(out.data(), rows, O);
  y.noalias() = ConstMatMap<T>(x.data().data(), rows, I) * ConstMatMap<T>(weight.data().data(), I, O);
  std::vector<NodePtr<T>> inputs{x.node(), weight.node()};
  if (bias) {
    y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(bias->data().data(), O);
    inputs.push_back(bias->node());
  }
  return record<T>("linear", out_shape, std::move(out), std::move(inputs), [rows, I, O](Node<T>& node) {
    auto& nx = *node.inputs[0];
    auto& nw = *node.inputs[1];
    ConstMatMap<T> g(node.grad.data(), rows, O);
    if (nx.requires_grad) {
      MatMap<T>(nx.grad_buffer().data(), rows, I).noalias() += g * ConstMatMap<T>(nw.value.data(), I, O).transpose();
    }
    if (nw.requires_grad) {
      MatMap<T>(nw.grad_buffer().data(), I, O).noalias() += ConstMatMap<T>(nx.value.data(), rows, I).transpose() * g;
    }
    if (node.inputs.size() > 2 && node.inputs[2]->requires_grad) {
      Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(node.inputs[2]->grad_buffer().data(), O) += g.colwise().sum();
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  return linear_impl(x, weight, &bias);
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight) {
  return linear_impl<T>(x, weight, nullptr);
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() < 2) throw DimensionError("transpose needs rank >= 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(-2), n = a.dim(-1), batch = a.numel() / (m * n);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const auto av = a.data();
  Buffer<T> out(av.size());
  for (std::size_t b = 0; b < batch; ++b) {
    const T* src = av.data() + b * m * n;
    T* dst = out.data() + b * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  return record<T>("transpose", out_shape, std::move(out), {a.node()}, [m, n, batch](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    for (std::size_t b = 0; b < batch; ++b) {
      const T* g = node.grad.data() + b * m * n;
      T* dst = ga.data() + b * m * n;
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
    }
  });
}

template <typename T>
Tensor<T> permute(const Tensor<T>& a, const std::vector<std::size_t>& axes) {
  const std::size_t r = a.rank();
  if (axes.size() != r) throw DimensionError("permute needs " + std::to_string(r) + " axes");
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    if (ax >= r || used[ax]) throw DimensionError("permute axes must be a permutation of 0.." + std::to_string(r - 1));
    used[ax] = true;
  }
  const Shape& in_shape = a.shape();
  Shape out_shape(r);
  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r; i-- > 1;) in_strides[i - 1] = in_strides[i] * in_shape[i];
  std::vector<std::size_t> gather(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in_shape[axes[i]];
    gather[i] = in_strides[axes[i]];
  }
  // Input offset of every output element, in output order.
  std::vector<std::size_t> offsets(a.numel());
  {
    const std::vector<std::size_t> zero(r, 0);
    for_each_broadcast(out_shape, gather, zero,
                       [&](std::size_t o, std::size_t i, std::size_t) { offsets[o] = i; });
  }
  const auto av = a.data();
  Buffer<T> out(av.size());
  for (std::size_t o = 0; o < out.size(); ++o) out[o] = av[offsets[o]];
  return record<T>("permute", out_shape, std::move(out), {a.node()},
                   [offsets = std::move(offsets)](Node<T>& node) {
                     auto& ga = node.inputs[0]->grad_buffer();
                     for (std::size_t o = 0; o < offsets.size(); ++o) ga[offsets[o]] += node.grad[o];
                   });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("cannot reshape " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  return record<T>("reshape", std::move(shape), Buffer<T>(a.data().begin(), a.data().end()), {a.node()},
                   [](Node<T>& node) { add_into(node.inputs[0]->grad_buffer(), node.grad); });
}

template <typename T>
Tensor<T> broadcast_to(const Tensor<T>& a, const Shape& shape) {
  if (broadcast_shape(a.shape(), shape) != shape) {
    throw DimensionError("cannot broadcast " + shape_str(a.shape()) + " to " + shape_str(shape));
  }
  const auto sa = broadcast_strides(a.shape(), shape);
  const std::vector<std::size_t> zero(shape.size(), 0);
  const auto av = a.data();
  Buffer<T> out(shape_numel(shape));
  for_each_broadcast(shape, sa, zero, [&](std::size_t o, std::size_t i, std::size_t) { out[o] = av[i]; });
  return record<T>("broadcast_to", shape, std::move(out), {a.node()}, [shape, sa, zero](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    for_each_broadcast(shape, sa, zero, [&](std::size_t o, std::size_t i, std::size_t) { ga[i] += node.grad[o]; });
  });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return g; });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T g, T, T) { return g; }, [](T g, T, T) { return -g; });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T g, T, T y) { return g * y; },
      [](T g, T x, T) { return g * x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  for (T v : b.data()) {
    if (v == T(0)) throw DomainError("div: division by zero");
  }
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T g, T, T y) { return g / y; },
      [](T g, T x, T y) { return -g * x / (y * y); });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary_op<T>("neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary_op<T>("scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T offset) {
  return unary_op<T>("add_scalar", a, [offset](T x) { return x + offset; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary_op<T>("exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T v : a.data()) {
    if (!(v > T(0))) throw DomainError("log of a nonpositive value");
  }
  return unary_op<T>("log", a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary_op<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); }, [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> square(const Tensor<T>& a) {
  return unary_op<T>("square", a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Tensor<T> clamp(const Tensor<T>& a, T lo, T hi) {
  if (lo > hi) throw DomainError("clamp: lo > hi");
  return unary_op<T>(
      "clamp", a, [lo, hi](T x) { return std::clamp(x, lo, hi); },
      [lo, hi](T x, T) { return (x > lo && x < hi) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a, int axis, bool keepdim) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "sum");
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  if (keepdim) {
    out_shape[ax] = 1;
  } else {
    out_shape.erase(out_shape.begin() + static_cast<std::ptrdiff_t>(ax));
  }
  const auto av = a.data();
  Buffer<T> out(s.outer * s.inner, T(0));
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t l = 0; l < s.len; ++l) {
      const T* src = av.data() + (o * s.len + l) * s.inner;
      T* dst = out.data() + o * s.inner;
      for (std::size_t i = 0; i < s.inner; ++i) dst[i] += src[i];
    }
  return record<T>("sum", out_shape, std::move(out), {a.node()}, [s](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t l = 0; l < s.len; ++l) {
        T* dst = ga.data() + (o * s.len + l) * s.inner;
        const T* g = node.grad.data() + o * s.inner;
        for (std::size_t i = 0; i < s.inner; ++i) dst[i] += g[i];
      }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a, int axis, bool keepdim) {
  const T len = static_cast<T>(a.dim(axis));
  return scale(sum(a, axis, keepdim), T(1) / len);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  T total = T(0);
  for (T v : a.data()) total += v;
  return record<T>("sum_all", Shape{}, Buffer<T>{total}, {a.node()}, [](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    const T g = node.grad[0];
    for (auto& v : ga) v += g;
  });
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& a) {
  return scale(sum_all(a), T(1) / static_cast<T>(a.numel()));
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  const auto av = a.data();
  Buffer<T> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.len; ++l) {
        const T e = std::exp(av[base + l * s.inner] - mx);
        out[base + l * s.inner] = e;
        total += e;
      }
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] /= total;
    }
  return record<T>("softmax", a.shape(), std::move(out), {a.node()}, [s](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    const auto& y = node.value;
    const auto& g = node.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T dot = T(0);
        for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * y[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          ga[k] += y[k] * (g[k] - dot);
        }
      }
  });
}

template <typename T>
Tensor<T> log_softmax(const Tensor<T>& a, int axis) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "log_softmax");
  const AxisSplit s = split_at(a.shape(), ax);
  const auto av = a.data();
  Buffer<T> out(av.size());
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t l = 0; l < s.len; ++l) mx = std::max(mx, av[base + l * s.inner]);
      T total = T(0);
      for (std::size_t l = 0; l < s.len; ++l) total += std::exp(av[base + l * s.inner] - mx);
      const T lse = mx + std::log(total);
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = av[base + l * s.inner] - lse;
    }
  return record<T>("log_softmax", a.shape(), std::move(out), {a.node()}, [s](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    const auto& y = node.value;
    const auto& g = node.grad;
    for (std::size_t o = 0; o < s.outer; ++o)
      for (std::size_t i = 0; i < s.inner; ++i) {
        const std::size_t base = o * s.len * s.inner + i;
        T gsum = T(0);
        for (std::size_t l = 0; l < s.len; ++l) gsum += g[base + l * s.inner];
        for (std::size_t l = 0; l < s.len; ++l) {
          const std::size_t k = base + l * s.inner;
          ga[k] += g[k] - std::exp(y[k]) * gsum;
        }
      }
  });
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm needs rank >= 1");
  const std::size_t d = x.dim(-1);
  if (gain.shape() != Shape{d} || bias.shape() != Shape{d}) {
    throw DimensionError("layer_norm gain/bias must be [" + std::to_string(d) + "], got " +
                         shape_str(gain.shape()) + " and " + shape_str(bias.shape()));
  }
  const std::size_t rows = x.numel() / d;
  const auto xv = x.data();
  const auto gv = gain.data();
  const auto bv = bias.data();
  Buffer<T> out(xv.size());
  std::vector<T> means(rows), rstds(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * d;
    T mu = T(0);
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<T>(d);
    T var = T(0);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<T>(d);
    const T rstd = T(1) / std::sqrt(var + eps);
    means[r] = mu;
    rstds[r] = rstd;
    T* dst = out.data() + r * d;
    for (std::size_t j = 0; j < d; ++j) dst[j] = (row[j] - mu) * rstd * gv[j] + bv[j];
  }
  return record<T>("layer_norm", x.shape(), std::move(out), {x.node(), gain.node(), bias.node()},
                   [d, rows, means = std::move(means), rstds = std::move(rstds)](Node<T>& node) {
                     auto& nx = *node.inputs[0];
                     auto& ng = *node.inputs[1];
                     auto& nb = *node.inputs[2];
                     const auto& g = node.grad;
                     T* gx = nx.requires_grad ? nx.grad_buffer().data() : nullptr;
                     T* gg = ng.requires_grad ? ng.grad_buffer().data() : nullptr;
                     T* gb = nb.requires_grad ? nb.grad_buffer().data() : nullptr;
                     std::vector<T> xhat(d), dxhat(d);
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* row = nx.value.data() + r * d;
                       const T* grow = g.data() + r * d;
                       T mean_dxhat = T(0), mean_dxhat_xhat = T(0);
                       for (std::size_t j = 0; j < d; ++j) {
                         xhat[j] = (row[j] - means[r]) * rstds[r];
                         dxhat[j] = grow[j] * ng.value[j];
                         if (gg) gg[j] += grow[j] * xhat[j];
                         if (gb) gb[j] += grow[j];
                         mean_dxhat += dxhat[j];
                         mean_dxhat_xhat += dxhat[j] * xhat[j];
                       }
                       if (!gx) continue;
                       mean_dxhat /= static_cast<T>(d);
                       mean_dxhat_xhat /= static_cast<T>(d);
                       T* dst = gx + r * d;
                       for (std::size_t j = 0; j < d; ++j) {
                         dst[j] += rstds[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> l1_normalize(const Tensor<T>& a, int axis, T eps) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "l1_normalize");
  const AxisSplit s = split_at(a.shape(), ax);
  const auto av = a.data();
  for (std::size_t i = 0; i < av.size(); ++i) {
    if (av[i] < T(0)) throw DomainError("l1_normalize: negative entry at flat index " + std::to_string(i));
  }
  Buffer<T> out(av.size());
  std::vector<T> sums(s.outer * s.inner);
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.len * s.inner + i;
      T total = eps;
      for (std::size_t l = 0; l < s.len; ++l) total += av[base + l * s.inner];
      sums[o * s.inner + i] = total;
      for (std::size_t l = 0; l < s.len; ++l) out[base + l * s.inner] = av[base + l * s.inner] / total;
    }
  return record<T>("l1_normalize", a.shape(), std::move(out), {a.node()},
                   [s, sums = std::move(sums)](Node<T>& node) {
                     auto& in = *node.inputs[0];
                     auto& ga = in.grad_buffer();
                     const auto& g = node.grad;
                     for (std::size_t o = 0; o < s.outer; ++o)
                       for (std::size_t i = 0; i < s.inner; ++i) {
                         const std::size_t base = o * s.len * s.inner + i;
                         const T total = sums[o * s.inner + i];
                         // Sum of g * out, i.e. (g . a) / total.
                         T dot = T(0);
                         for (std::size_t l = 0; l < s.len; ++l) dot += g[base + l * s.inner] * node.value[base + l * s.inner];
                         for (std::size_t l = 0; l < s.len; ++l) {
                           const std::size_t k = base + l * s.inner;
                           ga[k] += (g[k] - dot) / total;
                         }
                       }
                   });
}

template <typename T>
Tensor<T> l1_normalize_columns(const Tensor<T>& a, T eps) {
  if (a.rank() < 2) throw DimensionError("l1_normalize_columns needs rank >= 2");
  return l1_normalize(a, -2, eps);
}

template <typename T>
Tensor<T> l2_normalize(const Tensor<T>& a, T eps) {
  if (a.rank() < 1) throw DimensionError("l2_normalize needs rank >= 1");
  const std::size_t d = a.dim(-1), rows = a.numel() / d;
  const auto av = a.data();
  Buffer<T> out(av.size()), norms(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = av.data() + r * d;
    T sq = T(0);
    for (std::size_t j = 0; j < d; ++j) sq += row[j] * row[j];
    const T n = std::sqrt(sq);
    norms[r] = n;
    for (std::size_t j = 0; j < d; ++j) out[r * d + j] = row[j] / (n + eps);
  }
  return record<T>("l2_normalize", a.shape(), std::move(out), {a.node()},
                   [d, rows, eps, norms = std::move(norms)](Node<T>& node) {
                     auto& in = *node.inputs[0];
                     auto& ga = in.grad_buffer();
                     for (std::size_t r = 0; r < rows; ++r) {
                       const T* x = in.value.data() + r * d;
                       const T* g = node.grad.data() + r * d;
                       const T n = norms[r], s = n + eps;
                       T dot = T(0);
                       for (std::size_t j = 0; j < d; ++j) dot += g[j] * x[j];
                       const T coef = n > T(0) ? dot / (s * s * n) : T(0);
                       for (std::size_t j = 0; j < d; ++j) ga[r * d + j] += g[j] / s - x[j] * coef;
                     }
                   });
}

template <typename T>
Tensor<T> stop_gradient(const Tensor<T>& a) {
  return Tensor<T>(a.shape(), a.to_vector());
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  const std::size_t ax = normalize_axis(axis, parts[0].rank(), "concat");
  Shape reference = parts[0].shape();
  reference[ax] = 0;
  Shape out_shape = reference;
  std::vector<std::size_t> lens;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != reference.size()) throw DimensionError("concat rank mismatch");
    lens.push_back(probe[ax]);
    probe[ax] = 0;
    if (probe != reference) throw DimensionError("concat extents differ off the concat axis");
    out_shape[ax] += lens.back();
  }
  const AxisSplit s = split_at(out_shape, ax);
  Buffer<T> out(shape_numel(out_shape));
  std::vector<NodePtr<T>> inputs;
  std::size_t start = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const auto pv = parts[p].data();
    const std::size_t chunk = lens[p] * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(pv.data() + o * chunk, chunk, out.data() + (o * s.len + start) * s.inner);
    }
    start += lens[p];
    inputs.push_back(parts[p].node());
  }
  return record<T>("concat", out_shape, std::move(out), std::move(inputs), [s, lens](Node<T>& node) {
    std::size_t start = 0;
    for (std::size_t p = 0; p < lens.size(); ++p) {
      auto& in = *node.inputs[p];
      const std::size_t chunk = lens[p] * s.inner;
      if (in.requires_grad) {
        auto& ga = in.grad_buffer();
        for (std::size_t o = 0; o < s.outer; ++o) {
          const T* g = node.grad.data() + (o * s.len + start) * s.inner;
          for (std::size_t i = 0; i < chunk; ++i) ga[o * chunk + i] += g[i];
        }
      }
      start += lens[p];
    }
  });
}

template <typename T>
Tensor<T> narrow(const Tensor<T>& a, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = normalize_axis(axis, a.rank(), "narrow");
  if (length == 0 || start + length > a.shape()[ax]) {
    throw DimensionError("narrow [" + std::to_string(start) + ", " + std::to_string(start + length) +
                         ") outside axis of extent " + std::to_string(a.shape()[ax]));
  }
  const AxisSplit s = split_at(a.shape(), ax);
  Shape out_shape = a.shape();
  out_shape[ax] = length;
  const auto av = a.data();
  const std::size_t chunk = length * s.inner;
  Buffer<T> out(s.outer * chunk);
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(av.data() + (o * s.len + start) * s.inner, chunk, out.data() + o * chunk);
  }
  return record<T>("narrow", out_shape, std::move(out), {a.node()}, [s, start, chunk](Node<T>& node) {
    auto& ga = node.inputs[0]->grad_buffer();
    for (std::size_t o = 0; o < s.outer; ++o) {
      T* dst = ga.data() + (o * s.len + start) * s.inner;
      const T* g = node.grad.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += g[i];
    }
  });
}

namespace {

struct Tap {
  std::size_t lo = 0;
  std::size_t hi = 0;
  double frac = 0.0;
};

std::vector<Tap> bilinear_taps(std::size_t in, std::size_t out) {
  std::vector<Tap> taps(out);
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::size_t i = 0; i < out; ++i) {
    double src = (static_cast<double>(i) + 0.5) * ratio - 0.5;
    if (src < 0.0) src = 0.0;
    auto lo = static_cast<std::size_t>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    const std::size_t hi = lo + 1 < in ? lo + 1 : lo;
    taps[i] = {lo, hi, src - static_cast<double>(lo)};
  }
  return taps;
}

}  // namespace

template <typename T>
Tensor<T> bilinear_upsample(const Tensor<T>& map, std::size_t out_h, std::size_t out_w) {
  if (map.rank() != 2) throw DimensionError("bilinear_upsample needs an [h, w] map, got " + shape_str(map.shape()));
  if (out_h == 0 || out_w == 0) throw DimensionError("bilinear_upsample target extent must be positive");
  const std::size_t h = map.dim(0), w = map.dim(1);
  const auto ty = bilinear_taps(h, out_h);
  const auto tx = bilinear_taps(w, out_w);
  const auto v = map.data();
  Buffer<T> out(out_h * out_w);
  for (std::size_t i = 0; i < out_h; ++i) {
    const T wy = static_cast<T>(ty[i].frac);
    const T* r0 = v.data() + ty[i].lo * w;
    const T* r1 = v.data() + ty[i].hi * w;
    for (std::size_t j = 0; j < out_w; ++j) {
      const T wx = static_cast<T>(tx[j].frac);
      const T top = (T(1) - wx) * r0[tx[j].lo] + wx * r0[tx[j].hi];
      const T bottom = (T(1) - wx) * r1[tx[j].lo] + wx * r1[tx[j].hi];
      out[i * out_w + j] = (T(1) - wy) * top + wy * bottom;
    }
  }
  return record<T>("bilinear_upsample", Shape{out_h, out_w}, std::move(out), {map.node()},
                   [w, out_w, ty, tx](Node<T>& node) {
                     auto& ga = node.inputs[0]->grad_buffer();
                     for (std::size_t i = 0; i < ty.size(); ++i) {
                       const T wy = static_cast<T>(ty[i].frac);
                       for (std::size_t j = 0; j < out_w; ++j) {
                         const T wx = static_cast<T>(tx[j].frac);
                         const T g = node.grad[i * out_w + j];
                         ga[ty[i].lo * w + tx[j].lo] += g * (T(1) - wy) * (T(1) - wx);
                         ga[ty[i].lo * w + tx[j].hi] += g * (T(1) - wy) * wx;
                         ga[ty[i].hi * w + tx[j].lo] += g * wy * (T(1) - wx);
                         ga[ty[i].hi * w + tx[j].hi] += g * wy * wx;
                       }
                     }
                   });
}

#define REFSEG_INSTANTIATE_OPS(T)                                                               \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> transpose(const Tensor<T>&);                                               \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<std::size_t>&);                \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                          \
  template Tensor<T> broadcast_to(const Tensor<T>&, const Shape&);                              \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> neg(const Tensor<T>&);                                                     \
  template Tensor<T> scale(const Tensor<T>&, T);                                                \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                           \
  template Tensor<T> exp(const Tensor<T>&);                                                     \
  template Tensor<T> log(const Tensor<T>&);                                                     \
  template Tensor<T> relu(const Tensor<T>&);                                                    \
  template Tensor<T> square(const Tensor<T>&);                                                  \
  template Tensor<T> clamp(const Tensor<T>&, T, T);                                             \
  template Tensor<T> sum(const Tensor<T>&, int, bool);                                          \
  template Tensor<T> mean(const Tensor<T>&, int, bool);                                         \
  template Tensor<T> sum_all(const Tensor<T>&);                                                 \
  template Tensor<T> mean_all(const Tensor<T>&);                                                \
  template Tensor<T> softmax(const Tensor<T>&, int);                                            \
  template Tensor<T> log_softmax(const Tensor<T>&, int);                                        \
  template Tensor<T> layer_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);       \
  template Tensor<T> l1_normalize(const Tensor<T>&, int, T);                                    \
  template Tensor<T> l1_normalize_columns(const Tensor<T>&, T);                                 \
  template Tensor<T> l2_normalize(const Tensor<T>&, T);                                         \
  template Tensor<T> stop_gradient(const Tensor<T>&);                                           \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                \
  template Tensor<T> narrow(const Tensor<T>&, int, std::size_t, std::size_t);                   \
  template Tensor<T> bilinear_upsample(const Tensor<T>&, std::size_t, std::size_t);

REFSEG_INSTANTIATE_OPS(float)
REFSEG_INSTANTIATE_OPS(double)

#undef REFSEG_INSTANTIATE_OPS

}  // namespace refseg
