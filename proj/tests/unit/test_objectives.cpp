#include <cmath>

#include "doctest.h"
#include "refseg/errors.hpp"
#include "refseg/objectives.hpp"
#include "support/fixtures.hpp"
#include "support/gradcheck.hpp"

using namespace refseg;
using refseg::testing::random_tensor;
using refseg::testing::tiny_config;

namespace {

// -(1/B) sum_j log(exp<z_jj, x_j> / sum_i exp<z_ij, x_j>), by plain loops.
double c3_oracle(const std::vector<double>& z, const std::vector<double>& x, std::size_t b, std::size_t d) {
  double loss = 0.0;
  for (std::size_t j = 0; j < b; ++j) {
    std::vector<double> logit(b);
    for (std::size_t i = 0; i < b; ++i) {
      double s = 0.0;
      for (std::size_t c = 0; c < d; ++c) s += z[(i * b + j) * d + c] * x[j * d + c];
      logit[i] = s;
    }
    double denom = 0.0;
    for (double l : logit) denom += std::exp(l);
    loss -= std::log(std::exp(logit[j]) / denom);
  }
  return loss / static_cast<double>(b);
}

Tensor<double> reference_decode_row(const DecoderParams<double>& p, const Tensor<double>& slot) {
  // slot [1, D] broadcast over positions [N, D]
  const auto h1 = relu(p.l1(slot + p.positions));
  const auto h2 = relu(p.l2(h1));
  const auto h3 = relu(p.l3(h2));
  return p.l4(h3);  // [N, D + 1]
}

Batch<double> random_batch(const ModelConfig& cfg, std::size_t b, std::uint64_t seed) {
  return {random_tensor({b, cfg.num_patches(), cfg.feature_dim}, seed), random_tensor({b, cfg.feature_dim}, seed + 1)};
}

}  // namespace

TEST_CASE("c3 loss: hand-set B = 2") {
  // z[i][j] for i, j in {0, 1}; D = 2.
  const std::vector<double> z = {1, 0, 0.6, 0.8, 0, 1, -0.6, 0.8};
  const std::vector<double> x = {0.5, -1.0, 2.0, 0.25};
  const double l00 = 0.5, l10 = -1.0;      // text 0 against images 0 and 1
  const double l01 = 1.4, l11 = -1.0;      // text 1
  const double hand = -0.5 * (l00 - std::log(std::exp(l00) + std::exp(l10)) + l11 -
                              std::log(std::exp(l01) + std::exp(l11)));
  const auto loss = c3_loss_from_embeddings(Tensor<double>({2, 2, 2}, z), Tensor<double>({2, 2}, x));
  CHECK(loss.item() == doctest::Approx(hand).epsilon(1e-14));
  CHECK(c3_oracle(z, x, 2, 2) == doctest::Approx(hand).epsilon(1e-14));
}

TEST_CASE("c3 loss matches the scalar oracle") {
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto z = random_tensor({4, 4, 6}, s, -2, 2);
    const auto x = random_tensor({4, 6}, 50 + s, -2, 2);
    const double got = c3_loss_from_embeddings(z, x).item();
    CHECK(std::fabs(got - c3_oracle(z.to_vector(), x.to_vector(), 4, 6)) < 1e-12);
    CHECK(got >= 0.0);
  }
}

TEST_CASE("c3 loss degenerate cases") {
  const auto one = c3_loss_from_embeddings(random_tensor({1, 1, 5}, 1), random_tensor({1, 5}, 2));
  CHECK(one.item() == 0.0);
  for (std::size_t b : {2, 4, 8}) {
    const auto z = Tensor<double>({b, b, 3}, 0.3);
    const auto x = Tensor<double>({b, 3}, -0.7);
    CHECK(c3_loss_from_embeddings(z, x).item() == std::log(static_cast<double>(b)));
  }
  CHECK(c3_loss_from_embeddings(Tensor<double>({3, 3, 2}, 0.1), Tensor<double>({3, 2}, 1.0)).item() ==
        doctest::Approx(std::log(3.0)).epsilon(1e-15));
  CHECK_THROWS_AS(c3_loss_from_embeddings(random_tensor({2, 3, 5}, 1), random_tensor({2, 5}, 2)), DimensionError);
}

TEST_CASE("temperature divides the logits") {
  const auto z = random_tensor({3, 3, 4}, 3);
  const auto x = random_tensor({3, 4}, 4);
  const auto scaled = c3_loss_from_embeddings(z, Tensor<double>({3, 4}, x.to_vector()), 0.5).item();
  auto x2 = x.to_vector();
  for (auto& v : x2) v *= 2.0;
  CHECK(scaled == doctest::Approx(c3_oracle(z.to_vector(), x2, 3, 4)).epsilon(1e-12));
}

TEST_CASE("reconstruction loss formula") {
  const auto x = random_tensor({3, 4, 2}, 5);
  CHECK(recon_loss_from(x, x).item() == 0.0);
  double expected = 0.0;
  for (double v : x.data()) expected += v * v;
  expected /= 3.0;
  CHECK(recon_loss_from(Tensor<double>({3, 4, 2}, 0.0), x).item() == doctest::Approx(expected).epsilon(1e-14));
  CHECK_THROWS_AS(recon_loss_from(random_tensor({3, 4, 3}, 1), x), DimensionError);
}

TEST_CASE("targets never receive gradient") {
  auto x = random_tensor({2, 3, 2}, 6);
  x.set_requires_grad(true);
  auto r = Tensor<double>::parameter({2, 3, 2}, random_tensor({2, 3, 2}, 7).to_vector());
  backward(recon_loss_from(r, x));
  for (double g : x.grad_or_zeros()) CHECK(g == 0.0);

  auto text = random_tensor({3, 4}, 8);
  text.set_requires_grad(true);
  auto z = Tensor<double>::parameter({3, 3, 4}, random_tensor({3, 3, 4}, 9).to_vector());
  backward(c3_loss_from_embeddings(z, text));
  for (double g : text.grad_or_zeros()) CHECK(g == 0.0);
}

TEST_CASE("in the full model the target branch adds nothing to the input gradients") {
  // The text also queries the fusion layer and the features feed discovery,
  // so their gradients are not zero; swapping the targets for detached
  // copies must leave them bit-identical.
  const auto cfg = tiny_config();
  Model<double> model(cfg, 1);
  auto batch = random_batch(cfg, 3, 8);
  batch.visual.set_requires_grad(true);
  batch.textual.set_requires_grad(true);
  const Tensor<double> text_copy(batch.textual.shape(), batch.textual.to_vector());
  const Tensor<double> visual_copy(batch.visual.shape(), batch.visual.to_vector());

  auto input_grads = [&](bool detached_targets) {
    batch.visual.zero_grad();
    batch.textual.zero_grad();
    const auto found = model.discover(batch.visual, 2);
    const auto z = fuse_all_pairs(found.entities, batch.textual, model.fusion()).z;
    const auto rec = spatial_broadcast_decode(found.entities, cfg.num_patches(), model.decoder()).reconstruction;
    const auto loss = c3_loss_from_embeddings(z, detached_targets ? text_copy : batch.textual) +
                      recon_loss_from(rec, detached_targets ? visual_copy : batch.visual);
    backward(loss);
    return std::make_pair(batch.visual.grad_or_zeros(), batch.textual.grad_or_zeros());
  };
  const auto shared = input_grads(false);
  const auto detached = input_grads(true);
  CHECK(shared.first == detached.first);
  CHECK(shared.second == detached.second);
}

TEST_CASE("decoder with one slot is the plain MLP") {
  auto cfg = tiny_config();
  cfg.k_g = 1;
  cfg.k_s = 1;
  Model<double> model(cfg, 2);
  const auto& p = model.decoder();
  CHECK(p.l4.out_features() == cfg.feature_dim + 1);
  const auto slot = random_tensor({1, cfg.feature_dim}, 9);
  const auto out = spatial_broadcast_decode(slot, cfg.num_patches(), p);
  for (double w : out.weights.data()) CHECK(w == 1.0);
  const auto ref = reference_decode_row(p, slot);
  const std::size_t d = cfg.feature_dim;
  for (std::size_t n = 0; n < cfg.num_patches(); ++n) {
    for (std::size_t c = 0; c < d; ++c) {
      CHECK(out.reconstruction[n * d + c] == doctest::Approx(ref[n * (d + 1) + c]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(spatial_broadcast_decode(slot, cfg.num_patches() + 1, p), DimensionError);
}

TEST_CASE("decoder with two identical slots") {
  auto cfg = tiny_config();
  cfg.k_g = 1;
  cfg.k_s = 2;
  Model<double> model(cfg, 3);
  const auto row = random_tensor({1, cfg.feature_dim}, 10).to_vector();
  std::vector<double> both = row;
  both.insert(both.end(), row.begin(), row.end());
  const auto two = spatial_broadcast_decode(Tensor<double>({2, cfg.feature_dim}, both), cfg.num_patches(),
                                            model.decoder());
  const auto one = spatial_broadcast_decode(Tensor<double>({1, cfg.feature_dim}, row), cfg.num_patches(),
                                            model.decoder());
  for (double w : two.weights.data()) CHECK(w == doctest::Approx(0.5).epsilon(1e-15));
  for (std::size_t i = 0; i < one.reconstruction.numel(); ++i) {
    CHECK(two.reconstruction[i] == doctest::Approx(one.reconstruction[i]).epsilon(1e-12));
  }
}

TEST_CASE("decoder weights sum to one per position") {
  const auto cfg = tiny_config();
  Model<double> model(cfg, 4);
  const auto out = spatial_broadcast_decode(random_tensor({3, cfg.num_slots(), cfg.feature_dim}, 11, -2, 2),
                                            cfg.num_patches(), model.decoder());
  const std::size_t k = cfg.num_slots(), n = cfg.num_patches();
  for (std::size_t b = 0; b < 3; ++b) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += out.weights[(b * k + j) * n + i];
      CHECK(std::fabs(s - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("positional tables") {
  const auto one = sinusoidal_positions<double>(2, 3, 4, PositionalEncoding::OneD);
  CHECK(one.shape() == Shape{6, 4});
  CHECK(one[5 * 4 + 0] == doctest::Approx(std::sin(5.0)));
  CHECK(one[5 * 4 + 1] == doctest::Approx(std::cos(5.0)));
  CHECK(one[5 * 4 + 2] == doctest::Approx(std::sin(5.0 / 100.0)));
  const auto two = sinusoidal_positions<double>(2, 3, 4, PositionalEncoding::TwoD);
  // patch 5 sits at row 1, column 2
  CHECK(two[5 * 4 + 0] == doctest::Approx(std::sin(1.0)));
  CHECK(two[5 * 4 + 2] == doctest::Approx(std::sin(2.0)));
}

TEST_CASE("total loss composition") {
  const auto cfg = tiny_config();
  Model<double> model(cfg, 5);
  const auto batch = random_batch(cfg, 3, 12);
  const auto full = compute_losses(model, batch, LossOptions{1.0, 1.0}, 7);
  CHECK(full.total.item() == doctest::Approx(full.c3.item() + full.recon.item()).epsilon(1e-14));
  CHECK(full.c3.item() == c3_loss(batch, model, 7).item());
  CHECK(full.recon.item() == recon_loss(batch, model, 7).item());
  CHECK(total_loss(batch, model, 1.0, 7).item() == full.total.item());
  const auto no_recon = compute_losses(model, batch, LossOptions{0.0, 1.0}, 7);
  CHECK(no_recon.total.item() == full.c3.item());
  CHECK(total_loss(batch, model, 0.0, 7).item() == c3_loss(batch, model, 7).item());
  CHECK_THROWS_AS(compute_losses(model, batch, LossOptions{-1.0, 1.0}, 7), ConfigError);
}

TEST_CASE("each image is discovered once per loss evaluation") {
  const auto cfg = tiny_config();
  Model<double> model(cfg, 6);
  const auto batch = random_batch(cfg, 4, 13);
  model.reset_counters();
  compute_losses(model, batch, LossOptions{1.0, 1.0}, 1);
  CHECK(model.discovered_images() == 4);
  model.reset_counters();
  c3_loss(batch, model, 1);
  CHECK(model.discovered_images() == 4);
}

TEST_CASE("loss gradients match finite differences") {
  const auto cfg = tiny_config();
  Model<double> model(cfg, 7);
  refseg::testing::jitter_biases(model, 7);
  const auto batch = random_batch(cfg, 3, 14);
  std::vector<Tensor<double>> leaves;
  for (const auto& [name, t] : model.params().entries()) leaves.push_back(t);
  auto check = [&](const std::string& what, const std::function<Tensor<double>()>& f) {
    const auto r = refseg::testing::grad_check(leaves, f, 3, 300);
    INFO(what << ": " << r.worst);
    CHECK(r.max_rel_error < 1e-5);
  };
  check("c3", [&] { return c3_loss(batch, model, 5); });
  check("recon", [&] { return recon_loss(batch, model, 5); });
  check("total", [&] { return total_loss(batch, model, 1.0, 5); });
}

TEST_CASE("a gradient step lowers c3 on a frozen batch") {
  const auto cfg = tiny_config();
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Model<double> model(cfg, seed);
    const auto batch = random_batch(cfg, 4, 100 + seed);
    const auto before = c3_loss(batch, model, seed);
    model.params().zero_grad();
    backward(before);
    for (auto [name, p] : model.params().entries()) {
      auto g = p.grad_or_zeros();
      auto v = p.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= 1e-3 * g[i];
    }
    CHECK(c3_loss(batch, model, seed).item() < before.item());
  }
}
