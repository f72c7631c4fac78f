#include "refseg/objectives.hpp"

#include <cmath>

#include "refseg/errors.hpp"

namespace refseg {

template <typename T>
Tensor<T> c3_loss_from_embeddings(const Tensor<T>& z, const Tensor<T>& textual, double temperature) {
  if (z.rank() != 3 || textual.rank() != 2 || z.dim(0) != z.dim(1) || z.dim(1) != textual.dim(0) ||
      z.dim(2) != textual.dim(1)) {
    throw DimensionError("c3 loss needs z [B, B, D] and text [B, D], got " + shape_str(z.shape()) + " and " +
                         shape_str(textual.shape()));
  }
  if (!(temperature > 0.0)) throw ConfigError("c3 temperature must be positive");
  const std::size_t b = textual.dim(0), d = textual.dim(1);
  // logits[i, j] = <z_ij, sg(x_j)>; the softmax runs over images i for each text j.
  const auto targets = reshape(stop_gradient(textual), {1, b, d});
  auto logits = sum(z * targets, -1);
  if (temperature != 1.0) logits = scale(logits, static_cast<T>(1.0 / temperature));
  const auto log_probs = log_softmax(logits, 0);
  std::vector<T> eye(b * b, T(0));
  for (std::size_t i = 0; i < b; ++i) eye[i * b + i] = T(1);
  const Tensor<T> diag_mask({b, b}, std::move(eye));
  return scale(sum_all(log_probs * diag_mask), T(-1) / static_cast<T>(b));
}

template <typename T>
Tensor<T> recon_loss_from(const Tensor<T>& reconstruction, const Tensor<T>& visual) {
  if (reconstruction.shape() != visual.shape() || visual.rank() != 3) {
    throw DimensionError("reconstruction " + shape_str(reconstruction.shape()) + " does not match features " +
                         shape_str(visual.shape()));
  }
  const auto residual = stop_gradient(visual) - reconstruction;
  return scale(sum_all(square(residual)), T(1) / static_cast<T>(visual.dim(0)));
}

template <typename T>
void Batch<T>::validate() const {
  if (visual.rank() != 3 || textual.rank() != 2 || visual.dim(0) != textual.dim(0) ||
      visual.dim(2) != textual.dim(1)) {
    throw DimensionError("batch needs visual [B, N, D] and textual [B, D], got " + shape_str(visual.shape()) +
                         " and " + shape_str(textual.shape()));
  }
}

template <typename T>
LossTerms<T> compute_losses(const Model<T>& model, const Batch<T>& batch, const LossOptions& options,
                            std::uint64_t seed) {
  batch.validate();
  if (options.lambda_recon < 0.0) throw ConfigError("lambda_recon must be >= 0");
  // One discovery pass per image, shared by its B fusions and the decoder.
  const auto found = model.discover(batch.visual, seed);
  const auto fused = fuse_all_pairs(found.entities, batch.textual, model.fusion());
  LossTerms<T> terms;
  terms.c3 = c3_loss_from_embeddings(fused.z, batch.textual, options.temperature);
  if (options.lambda_recon > 0.0) {
    const auto decoded = spatial_broadcast_decode(found.entities, batch.visual.dim(1), model.decoder());
    terms.recon = recon_loss_from(decoded.reconstruction, batch.visual);
  } else {
    terms.recon = Tensor<T>::scalar(T(0));
  }
  terms.total = options.lambda_recon > 0.0
                    ? terms.c3 + scale(terms.recon, static_cast<T>(options.lambda_recon))
                    : terms.c3;
  return terms;
}

template <typename T>
Tensor<T> c3_loss(const Batch<T>& batch, const Model<T>& model, std::uint64_t seed, double temperature) {
  batch.validate();
  const auto found = model.discover(batch.visual, seed);
  const auto fused = fuse_all_pairs(found.entities, batch.textual, model.fusion());
  return c3_loss_from_embeddings(fused.z, batch.textual, temperature);
}

template <typename T>
Tensor<T> recon_loss(const Batch<T>& batch, const Model<T>& model, std::uint64_t seed) {
  batch.validate();
  const auto found = model.discover(batch.visual, seed);
  const auto decoded = spatial_broadcast_decode(found.entities, batch.visual.dim(1), model.decoder());
  return recon_loss_from(decoded.reconstruction, batch.visual);
}

template <typename T>
Tensor<T> total_loss(const Batch<T>& batch, const Model<T>& model, double lambda_recon, std::uint64_t seed) {
  LossOptions options;
  options.lambda_recon = lambda_recon;
  return compute_losses(model, batch, options, seed).total;
}

#define REFSEG_INSTANTIATE_OBJECTIVES(T)                                                                        \
  template Tensor<T> c3_loss_from_embeddings(const Tensor<T>&, const Tensor<T>&, double);                       \
  template Tensor<T> recon_loss_from(const Tensor<T>&, const Tensor<T>&);                                       \
  template struct Batch<T>;                                                                                     \
  template LossTerms<T> compute_losses(const Model<T>&, const Batch<T>&, const LossOptions&, std::uint64_t);    \
  template Tensor<T> c3_loss(const Batch<T>&, const Model<T>&, std::uint64_t, double);                          \
  template Tensor<T> recon_loss(const Batch<T>&, const Model<T>&, std::uint64_t);                               \
  template Tensor<T> total_loss(const Batch<T>&, const Model<T>&, double, std::uint64_t);

REFSEG_INSTANTIATE_OBJECTIVES(float)
REFSEG_INSTANTIATE_OBJECTIVES(double)

#undef REFSEG_INSTANTIATE_OBJECTIVES

}  // namespace refseg
