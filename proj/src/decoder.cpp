#include "refseg/decoder.hpp"

#include <Eigen/Core>
#include <cmath>

#include "record.hpp"

namespace refseg {

using detail::Node;
using detail::record;

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

// y[r, :] = relu(y[r, :] + bias)
template <typename T>
void bias_relu(T* y, const T* bias, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    T* row = y + r * cols;
    for (std::size_t c = 0; c < cols; ++c) row[c] = std::max(row[c] + bias[c], T(0));
  }
}

template <typename T>
void add_column_sums(T* dst, const T* src, std::size_t rows, std::size_t cols) {
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) dst[c] += src[r * cols + c];
  }
}

// dh <- dh * (h > 0)
template <typename T>
void relu_mask(T* dh, const T* h, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) dh[i] = h[i] > T(0) ? dh[i] : T(0);
}

}  // namespace

template <typename T>
Tensor<T> sinusoidal_positions(std::size_t grid_h, std::size_t grid_w, std::size_t dim, PositionalEncoding kind) {
  const std::size_t n = grid_h * grid_w;
  std::vector<T> table(n * dim, T(0));
  // Fills channels [offset, offset + width) of row `row` with the encoding of `pos`.
  auto encode = [&](std::size_t row, double pos, std::size_t offset, std::size_t width) {
    for (std::size_t c = 0; c < width; ++c) {
      const double freq = std::pow(10000.0, -static_cast<double>(2 * (c / 2)) / static_cast<double>(width));
      table[row * dim + offset + c] = static_cast<T>(c % 2 == 0 ? std::sin(pos * freq) : std::cos(pos * freq));
    }
  };
  for (std::size_t i = 0; i < n; ++i) {
    if (kind == PositionalEncoding::OneD) {
      encode(i, static_cast<double>(i), 0, dim);
    } else {
      const std::size_t half = dim / 2;
      encode(i, static_cast<double>(i / grid_w), 0, half);
      encode(i, static_cast<double>(i % grid_w), half, dim - half);
    }
  }
  return Tensor<T>({n, dim}, std::move(table));
}

template <typename T>
DecoderParams<T> DecoderParams<T>::create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.feature_dim, h = cfg.decoder_width();
  DecoderParams p;
  p.l1 = LinearLayer<T>::create(store, "decoder.l1", d, h, true, rng);
  p.l2 = LinearLayer<T>::create(store, "decoder.l2", h, h, true, rng);
  p.l3 = LinearLayer<T>::create(store, "decoder.l3", h, h, true, rng);
  p.l4 = LinearLayer<T>::create(store, "decoder.l4", h, d + 1, true, rng);
  p.positions = sinusoidal_positions<T>(cfg.grid_h, cfg.grid_w, d, cfg.positional_encoding);
  return p;
}

namespace {

// Activations of one tile: every slot at positions [n0, n0 + np) of one
// image. Rows are position-major (r = pi * k + ki) so the softmax across
// slots stays inside the tile. Sized to sit in L2.
template <typename T>
struct DecoderTile {
  std::size_t k, h, o;
  Buffer<T> a1, a2, a3, y;

  DecoderTile(std::size_t rows, std::size_t k_, std::size_t h_, std::size_t o_)
      : k(k_), h(h_), o(o_), a1(rows * h_), a2(rows * h_), a3(rows * h_), y(rows * o_) {}

  void forward(const T* slots, const T* pos, std::size_t np, const T* w2, const T* b2, const T* w3, const T* b3,
               const T* w4, const T* b4) {
    const std::size_t rows = np * k;
    const auto R = static_cast<Eigen::Index>(rows), H = static_cast<Eigen::Index>(h), O = static_cast<Eigen::Index>(o);
    for (std::size_t pi = 0; pi < np; ++pi) {
      const T* p = pos + pi * h;
      for (std::size_t ki = 0; ki < k; ++ki) {
        const T* sl = slots + ki * h;
        T* row = a1.data() + (pi * k + ki) * h;
        for (std::size_t c = 0; c < h; ++c) row[c] = std::max(sl[c] + p[c], T(0));
      }
    }
    MatMap<T>(a2.data(), R, H).noalias() = ConstMatMap<T>(a1.data(), R, H) * ConstMatMap<T>(w2, H, H);
    bias_relu(a2.data(), b2, rows, h);
    MatMap<T>(a3.data(), R, H).noalias() = ConstMatMap<T>(a2.data(), R, H) * ConstMatMap<T>(w3, H, H);
    bias_relu(a3.data(), b3, rows, h);
    MatMap<T>(y.data(), R, O).noalias() = ConstMatMap<T>(a3.data(), R, H) * ConstMatMap<T>(w4, H, O);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t c = 0; c < o; ++c) y[r * o + c] += b4[c];
    }
  }

  // Softmax of the last channel across the k slots of position pi.
  void mixing(std::size_t pi, T* alpha) const {
    const std::size_t d = o - 1;
    const T* base = y.data() + pi * k * o;
    T mx = base[d];
    for (std::size_t ki = 1; ki < k; ++ki) mx = std::max(mx, base[ki * o + d]);
    T total = T(0);
    for (std::size_t ki = 0; ki < k; ++ki) total += (alpha[ki] = std::exp(base[ki * o + d] - mx));
    for (std::size_t ki = 0; ki < k; ++ki) alpha[ki] /= total;
  }
};

std::size_t tile_positions(std::size_t k, std::size_t n) { return std::min(n, std::max<std::size_t>(1, 384 / k)); }

}  // namespace

template <typename T>
Tensor<T> decoder_core(const Tensor<T>& slot_hidden, const Tensor<T>& pos_hidden, const LinearLayer<T>& l2,
                       const LinearLayer<T>& l3, const LinearLayer<T>& l4) {
  if (slot_hidden.rank() != 3 || pos_hidden.rank() != 2 || slot_hidden.dim(2) != pos_hidden.dim(1)) {
    throw DimensionError("decoder_core needs [B, K, H] and [N, H], got " + shape_str(slot_hidden.shape()) + " and " +
                         shape_str(pos_hidden.shape()));
  }
  const std::size_t b = slot_hidden.dim(0), k = slot_hidden.dim(1), h = slot_hidden.dim(2), n = pos_hidden.dim(0);
  if (l2.in_features() != h || l2.out_features() != h || l3.in_features() != h || l3.out_features() != h ||
      l4.in_features() != h || !l2.bias.defined() || !l3.bias.defined() || !l4.bias.defined()) {
    throw DimensionError("decoder_core layer widths do not match hidden width " + std::to_string(h));
  }
  const std::size_t o = l4.out_features(), d = o - 1;
  const std::size_t packed = n * d + k * n;
  const std::size_t tile = tile_positions(k, n);
  Buffer<T> result(b * packed, T(0));

  // Nothing is saved for backward; each tile is recomputed there instead.
  {
    DecoderTile<T> t(tile * k, k, h, o);
    std::vector<T> alpha(k);
    for (std::size_t bi = 0; bi < b; ++bi) {
      T* recon = result.data() + bi * packed;
      T* weights = recon + n * d;
      for (std::size_t n0 = 0; n0 < n; n0 += tile) {
        const std::size_t np = std::min(tile, n - n0);
        t.forward(slot_hidden.data().data() + bi * k * h, pos_hidden.data().data() + n0 * h, np,
                  l2.weight.data().data(), l2.bias.data().data(), l3.weight.data().data(), l3.bias.data().data(),
                  l4.weight.data().data(), l4.bias.data().data());
        for (std::size_t pi = 0; pi < np; ++pi) {
          const std::size_t ni = n0 + pi;
          t.mixing(pi, alpha.data());
          for (std::size_t ki = 0; ki < k; ++ki) {
            weights[ki * n + ni] = alpha[ki];
            const T* feat = t.y.data() + (pi * k + ki) * o;
            for (std::size_t c = 0; c < d; ++c) recon[ni * d + c] += alpha[ki] * feat[c];
          }
        }
      }
    }
  }

  return record<T>(
      "decoder_core", Shape{b, packed}, std::move(result),
      {slot_hidden.node(), pos_hidden.node(), l2.weight.node(), l2.bias.node(), l3.weight.node(), l3.bias.node(),
       l4.weight.node(), l4.bias.node()},
      [=](Node<T>& node) {
        auto& in = node.inputs;
        auto grad_of = [&](std::size_t i) -> T* { return in[i]->requires_grad ? in[i]->grad_buffer().data() : nullptr; };
        T* g_sp = grad_of(0);
        T* g_pp = grad_of(1);
        T* g_w2 = grad_of(2);
        T* g_b2 = grad_of(3);
        T* g_w3 = grad_of(4);
        T* g_b3 = grad_of(5);
        T* g_w4 = grad_of(6);
        T* g_b4 = grad_of(7);
        const T* sp = in[0]->value.data();
        const T* pp = in[1]->value.data();
        const T* w2 = in[2]->value.data();
        const T* w3 = in[4]->value.data();
        const T* w4 = in[6]->value.data();
        const auto H = static_cast<Eigen::Index>(h), O = static_cast<Eigen::Index>(o);

        DecoderTile<T> t(tile * k, k, h, o);
        Buffer<T> d_out(tile * k * o), dh(tile * k * h), dh_prev(tile * k * h), d_alpha(k);
        std::vector<T> alpha(k);
        for (std::size_t bi = 0; bi < b; ++bi) {
          const T* g_recon = node.grad.data() + bi * packed;
          const T* g_weights = g_recon + n * d;
          for (std::size_t n0 = 0; n0 < n; n0 += tile) {
            const std::size_t np = std::min(tile, n - n0), rows = np * k;
            const auto R = static_cast<Eigen::Index>(rows);
            t.forward(sp + bi * k * h, pp + n0 * h, np, w2, in[3]->value.data(), w3, in[5]->value.data(), w4,
                      in[7]->value.data());

            for (std::size_t pi = 0; pi < np; ++pi) {
              const std::size_t ni = n0 + pi;
              const T* gr = g_recon + ni * d;
              t.mixing(pi, alpha.data());
              // d_alpha = Y_pi[:, :d] . g_recon + g_weights
              using Strided = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
              Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>(d_alpha.data(), static_cast<Eigen::Index>(k)).noalias() =
                  Strided(t.y.data() + pi * k * o, static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d),
                          Eigen::OuterStride<>(O)) *
                  Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>(gr, static_cast<Eigen::Index>(d));
              T s = T(0);
              for (std::size_t ki = 0; ki < k; ++ki) {
                T* dr = d_out.data() + (pi * k + ki) * o;
                for (std::size_t c = 0; c < d; ++c) dr[c] = alpha[ki] * gr[c];
                d_alpha[ki] += g_weights[ki * n + ni];
                s += alpha[ki] * d_alpha[ki];
              }
              for (std::size_t ki = 0; ki < k; ++ki) d_out[(pi * k + ki) * o + d] = alpha[ki] * (d_alpha[ki] - s);
            }

            ConstMatMap<T> dO(d_out.data(), R, O);
            if (g_w4) MatMap<T>(g_w4, H, O).noalias() += ConstMatMap<T>(t.a3.data(), R, H).transpose() * dO;
            if (g_b4) add_column_sums(g_b4, d_out.data(), rows, o);
            MatMap<T>(dh.data(), R, H).noalias() = dO * ConstMatMap<T>(w4, H, O).transpose();
            relu_mask(dh.data(), t.a3.data(), rows * h);

            if (g_w3) {
              MatMap<T>(g_w3, H, H).noalias() +=
                  ConstMatMap<T>(t.a2.data(), R, H).transpose() * ConstMatMap<T>(dh.data(), R, H);
            }
            if (g_b3) add_column_sums(g_b3, dh.data(), rows, h);
            MatMap<T>(dh_prev.data(), R, H).noalias() =
                ConstMatMap<T>(dh.data(), R, H) * ConstMatMap<T>(w3, H, H).transpose();
            relu_mask(dh_prev.data(), t.a2.data(), rows * h);

            if (g_w2) {
              MatMap<T>(g_w2, H, H).noalias() +=
                  ConstMatMap<T>(t.a1.data(), R, H).transpose() * ConstMatMap<T>(dh_prev.data(), R, H);
            }
            if (g_b2) add_column_sums(g_b2, dh_prev.data(), rows, h);
            MatMap<T>(dh.data(), R, H).noalias() =
                ConstMatMap<T>(dh_prev.data(), R, H) * ConstMatMap<T>(w2, H, H).transpose();
            relu_mask(dh.data(), t.a1.data(), rows * h);

            for (std::size_t pi = 0; pi < np; ++pi) {
              for (std::size_t ki = 0; ki < k; ++ki) {
                const T* g = dh.data() + (pi * k + ki) * h;
                if (g_sp) {
                  T* dst = g_sp + (bi * k + ki) * h;
                  for (std::size_t c = 0; c < h; ++c) dst[c] += g[c];
                }
                if (g_pp) {
                  T* dst = g_pp + (n0 + pi) * h;
                  for (std::size_t c = 0; c < h; ++c) dst[c] += g[c];
                }
              }
            }
          }
        }
      });
}

template <typename T>
DecodeResult<T> spatial_broadcast_decode(const Tensor<T>& entities, std::size_t n, const DecoderParams<T>& p) {
  if (n != p.num_positions()) {
    throw DimensionError("decoder built for " + std::to_string(p.num_positions()) + " positions, asked for " +
                         std::to_string(n));
  }
  const std::size_t d = p.positions.dim(1);
  if (entities.dim(-1) != d || (entities.rank() != 2 && entities.rank() != 3)) {
    throw DimensionError("decoder expects [K, D] or [B, K, D] entities, got " + shape_str(entities.shape()));
  }
  const bool single = entities.rank() == 2;
  const auto slots = single ? reshape(entities, {1, entities.dim(0), d}) : entities;
  const std::size_t b = slots.dim(0), k = slots.dim(1);

  // The first layer is affine, so l1(slot + pos) = l1(slot) + pos . W1; the
  // broadcast over positions happens inside the fused core.
  const auto packed = decoder_core(p.l1(slots), linear(p.positions, p.l1.weight), p.l2, p.l3, p.l4);
  const auto recon = reshape(narrow(packed, 1, 0, n * d), {b, n, d});
  const auto weights = reshape(narrow(packed, 1, n * d, k * n), {b, k, n});
  if (single) return {reshape(recon, {n, d}), reshape(weights, {k, n})};
  return {recon, weights};
}

#define REFSEG_INSTANTIATE_DECODER(T)                                                                        \
  template Tensor<T> sinusoidal_positions<T>(std::size_t, std::size_t, std::size_t, PositionalEncoding);     \
  template struct DecoderParams<T>;                                                                          \
  template Tensor<T> decoder_core(const Tensor<T>&, const Tensor<T>&, const LinearLayer<T>&,                 \
                                  const LinearLayer<T>&, const LinearLayer<T>&);                             \
  template DecodeResult<T> spatial_broadcast_decode(const Tensor<T>&, std::size_t, const DecoderParams<T>&);

REFSEG_INSTANTIATE_DECODER(float)
REFSEG_INSTANTIATE_DECODER(double)

#undef REFSEG_INSTANTIATE_DECODER

}  // namespace refseg
