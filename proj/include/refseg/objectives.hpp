#pragma once

#include <cstdint>

#include "refseg/model.hpp"

namespace refseg {

/// B visual/text pairs; row i of each is a ground-truth match.
template <typename T>
struct Batch {
  Tensor<T> visual;   // [B, N, D]
  Tensor<T> textual;  // [B, D]

  std::size_t size() const { return textual.dim(0); }
  void validate() const;
};

struct LossOptions {
  double lambda_recon = 1.0;
  double temperature = 1.0;  // divides the c3 logits
};

template <typename T>
struct LossTerms {
  Tensor<T> total;
  Tensor<T> c3;
  Tensor<T> recon;  // scalar zero when lambda_recon == 0 (not evaluated)
};

/// Contrastive cycle-consistency loss over all image/text pairs:
///   -(1/B) sum_j log( exp<z_jj, sg(x_j)> / sum_i exp<z_ij, sg(x_j)> )
/// z is [B_images, B_texts, D]. Text features never receive gradient.
template <typename T>
Tensor<T> c3_loss_from_embeddings(const Tensor<T>& z, const Tensor<T>& textual, double temperature = 1.0);

/// (1/B) sum_i || sg(x_i) - reconstruction_i ||^2 over [B, N, D].
template <typename T>
Tensor<T> recon_loss_from(const Tensor<T>& reconstruction, const Tensor<T>& visual);

/// c3 + lambda * recon with a single discovery pass per image.
template <typename T>
LossTerms<T> compute_losses(const Model<T>& model, const Batch<T>& batch, const LossOptions& options,
                            std::uint64_t seed);

template <typename T>
Tensor<T> c3_loss(const Batch<T>& batch, const Model<T>& model, std::uint64_t seed, double temperature = 1.0);
template <typename T>
Tensor<T> recon_loss(const Batch<T>& batch, const Model<T>& model, std::uint64_t seed);
template <typename T>
Tensor<T> total_loss(const Batch<T>& batch, const Model<T>& model, double lambda_recon, std::uint64_t seed);

}  // namespace refseg
