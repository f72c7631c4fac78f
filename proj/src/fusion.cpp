#include "refseg/fusion.hpp"

#include <cmath>

#include "refseg/errors.hpp"

namespace refseg {

template <typename T>
FusionParams<T> FusionParams<T>::create(ParamStore<T>& store, const ModelConfig& cfg, Rng& rng) {
  const std::size_t d = cfg.feature_dim, dh = cfg.hidden_dim;
  FusionParams p;
  p.q = NormedProjection<T>::create(store, "fusion.q", d, dh, rng);
  p.k = NormedProjection<T>::create(store, "fusion.k", d, dh, rng);
  p.v = NormedProjection<T>::create(store, "fusion.v", d, dh, rng);
  p.out = LinearLayer<T>::create(store, "fusion.out", dh, d, true, rng);
  p.use_mlp = cfg.fusion_mlp;
  if (p.use_mlp) {
    p.mlp_norm = LayerNormLayer<T>::create(store, "fusion.mlp_norm", d);
    p.mlp = Mlp<T>::create(store, "fusion.mlp", d, d * cfg.mlp_ratio, d, rng);
  }
  p.hidden_dim = dh;
  return p;
}

namespace {

// entities [B, K, D]; texts broadcastable against [B, Q, D]; query_keys is
// q(texts) transposed so that matmul(k(entities), query_keys) -> [B, K, Q].
template <typename T>
CrossModalOutput<T> cross_attend(const Tensor<T>& entities, const Tensor<T>& texts, const Tensor<T>& query_keys,
                                 const FusionParams<T>& p) {
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(p.hidden_dim));
  const auto keys = p.k(entities);
  const auto values = p.v(entities);
  const auto weights = softmax(scale(matmul(keys, query_keys), inv_sqrt), 1);  // [B, K, Q]
  const auto a_fuse = transpose(weights);                                      // [B, Q, K]
  auto h = p.out(matmul(a_fuse, values)) + texts;                              // [B, Q, D]
  if (p.use_mlp) h = h + p.mlp(p.mlp_norm(h));
  return {l2_normalize(h), a_fuse};
}

template <typename T>
void check_dims(const Tensor<T>& entities, const Tensor<T>& texts, std::size_t entity_rank, std::size_t text_rank) {
  if (entities.rank() != entity_rank || texts.rank() != text_rank || entities.dim(-1) != texts.dim(-1)) {
    throw DimensionError("fuse: incompatible entities " + shape_str(entities.shape()) + " and text " +
                         shape_str(texts.shape()));
  }
}

}  // namespace

template <typename T>
CrossModalOutput<T> fuse(const Tensor<T>& entities, const Tensor<T>& text, const FusionParams<T>& p) {
  if (entities.rank() == 2) {
    check_dims(entities, text, 2, 1);
    const std::size_t k = entities.dim(0), d = entities.dim(1);
    auto out = fuse(reshape(entities, {1, k, d}), reshape(text, {1, d}), p);
    return {reshape(out.z, {d}), reshape(out.a_fuse, {k})};
  }
  check_dims(entities, text, 3, 2);
  const std::size_t b = entities.dim(0), k = entities.dim(1), d = entities.dim(2);
  if (text.dim(0) != b) throw DimensionError("fuse: paired batch sizes differ");
  const auto texts = reshape(text, {b, 1, d});
  auto out = cross_attend(entities, texts, transpose(p.q(texts)), p);
  return {reshape(out.z, {b, d}), reshape(out.a_fuse, {b, k})};
}

template <typename T>
CrossModalOutput<T> fuse_all_pairs(const Tensor<T>& entities, const Tensor<T>& texts, const FusionParams<T>& p) {
  check_dims(entities, texts, 3, 2);
  return cross_attend(entities, texts, transpose(p.q(texts)), p);
}

#define REFSEG_INSTANTIATE_FUSION(T)                                                                        \
  template struct FusionParams<T>;                                                                          \
  template CrossModalOutput<T> fuse(const Tensor<T>&, const Tensor<T>&, const FusionParams<T>&);            \
  template CrossModalOutput<T> fuse_all_pairs(const Tensor<T>&, const Tensor<T>&, const FusionParams<T>&);

REFSEG_INSTANTIATE_FUSION(float)
REFSEG_INSTANTIATE_FUSION(double)

#undef REFSEG_INSTANTIATE_FUSION

}  // namespace refseg
