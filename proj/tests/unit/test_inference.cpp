#include <random>

#include "doctest.h"
#include "refseg/errors.hpp"
#include "refseg/inference.hpp"
#include "support/mask_oracle.hpp"

using namespace refseg;
using refseg::testing::oracle_mask;

namespace {

struct Instance {
  std::size_t gh, gw, k, oh, ow;
  std::vector<double> a_slot, a_fuse;
  double tau;
};

Instance random_instance(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](std::size_t lo, std::size_t hi) { return std::uniform_int_distribution<std::size_t>(lo, hi)(rng); };
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Instance in;
  in.gh = pick(1, 6);
  in.gw = pick(1, 6);
  in.k = pick(1, 6);
  in.oh = pick(1, 20);
  in.ow = pick(1, 20);
  in.a_slot.resize(in.gh * in.gw * in.k);
  for (std::size_t i = 0; i < in.gh * in.gw; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < in.k; ++j) s += (in.a_slot[i * in.k + j] = std::exp(3.0 * u(rng)));
    for (std::size_t j = 0; j < in.k; ++j) in.a_slot[i * in.k + j] /= s;
  }
  in.a_fuse.resize(in.k);
  double s = 0.0;
  for (auto& a : in.a_fuse) s += (a = std::exp(3.0 * u(rng)));
  for (auto& a : in.a_fuse) a /= s;
  in.tau = 0.05 + 0.9 * u(rng);
  return in;
}

Mask run(const Instance& in, InferenceScheme scheme, double tau) {
  return predict_mask(Tensor<double>({in.gh * in.gw, in.k}, in.a_slot), Tensor<double>({in.k}, in.a_fuse), in.gh,
                      in.gw, in.oh, in.ow, tau, scheme);
}

}  // namespace

TEST_CASE("predict_mask equals the per-pixel oracle") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto in = random_instance(s);
    CHECK(run(in, InferenceScheme::Compose, in.tau) ==
          oracle_mask(in.a_slot, in.a_fuse, in.k, in.gh, in.gw, in.oh, in.ow, in.tau));
  }
}

TEST_CASE("2x2 grid example") {
  // Two slots; slot 1 holds patches 1 and 3, so v = [0, 1, 0, 1].
  const std::vector<double> slots = {1, 0, 0, 1, 1, 0, 0, 1};
  const std::vector<double> fuse = {0, 1};
  const auto m = predict_mask(Tensor<double>({4, 2}, slots), Tensor<double>({2}, fuse), 2, 2, 4, 4, 0.5);
  CHECK(m == oracle_mask(slots, fuse, 2, 2, 2, 4, 4, 0.5));
  // Columns map to source x = -0.25, 0.25, 0.75, 1.25 -> values 0, .25, .75, 1.
  for (std::size_t r = 0; r < 4; ++r) {
    CHECK(m.at(r, 0) == 0);
    CHECK(m.at(r, 1) == 0);
    CHECK(m.at(r, 2) == 1);
    CHECK(m.at(r, 3) == 1);
  }
}

TEST_CASE("Compose with uniform relevance equals Avg") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    auto in = random_instance(s);
    const double u = 1.0 / static_cast<double>(in.k);
    std::fill(in.a_fuse.begin(), in.a_fuse.end(), u);
    CHECK(run(in, InferenceScheme::Compose, in.tau) == run(in, InferenceScheme::Avg, in.tau));
    CHECK(relevance_map(Tensor<double>({in.gh * in.gw, in.k}, in.a_slot), Tensor<double>({in.k}, in.a_fuse),
                        InferenceScheme::Compose) ==
          relevance_map(Tensor<double>({in.gh * in.gw, in.k}, in.a_slot), Tensor<double>({in.k}, in.a_fuse),
                        InferenceScheme::Avg));
  }
  // The same holds at single precision.
  const auto in = random_instance(7);
  std::vector<float> slot(in.a_slot.begin(), in.a_slot.end());
  std::vector<float> fuse(in.k, 1.0f / static_cast<float>(in.k));
  const Tensor<float> ts({in.gh * in.gw, in.k}, slot), tf({in.k}, fuse);
  CHECK(predict_mask(ts, tf, in.gh, in.gw, in.oh, in.ow, 0.5, InferenceScheme::Compose) ==
        predict_mask(ts, tf, in.gh, in.gw, in.oh, in.ow, 0.5, InferenceScheme::Avg));
}

TEST_CASE("Compose with one-hot relevance equals Max") {
  auto in = random_instance(3);
  std::fill(in.a_fuse.begin(), in.a_fuse.end(), 0.0);
  in.a_fuse[in.k - 1] = 1.0;
  CHECK(run(in, InferenceScheme::Compose, 0.5) == run(in, InferenceScheme::Max, 0.5));
}

TEST_CASE("Max and Min pick the extreme slots") {
  const std::vector<double> slots = {0.9, 0.1, 0.2, 0.8, 0.6, 0.4};  // 3 patches, 2 slots
  const Tensor<double> a({3, 2}, slots);
  const Tensor<double> f({2}, std::vector<double>{0.3, 0.7});
  CHECK(relevance_map(a, f, InferenceScheme::Max) == std::vector<double>{0.1, 0.8, 0.4});
  CHECK(relevance_map(a, f, InferenceScheme::Min) == std::vector<double>{0.9, 0.2, 0.6});
}

TEST_CASE("a constant map gives an empty mask") {
  const Tensor<double> a({4, 2}, std::vector<double>(8, 0.5));
  const Tensor<double> f({2}, std::vector<double>{0.5, 0.5});
  CHECK(predict_mask(a, f, 2, 2, 8, 8).count() == 0);
  // Values that differ only by rounding noise count as constant too.
  const Tensor<double> nearly({4, 1}, std::vector<double>{1.0, 1.0 + 1e-12, 1.0, 1.0});
  CHECK(predict_mask(nearly, Tensor<double>({1}, std::vector<double>{1.0}), 2, 2, 4, 4).count() == 0);
}

TEST_CASE("raising tau never adds pixels") {
  for (std::uint64_t s = 0; s < 100; ++s) {
    const auto in = random_instance(s);
    Mask prev = run(in, InferenceScheme::Compose, 0.01);
    for (double tau = 0.05; tau < 1.0; tau += 0.05) {
      const Mask next = run(in, InferenceScheme::Compose, tau);
      for (std::size_t i = 0; i < next.bits.size(); ++i) CHECK(next.bits[i] <= prev.bits[i]);
      prev = next;
    }
  }
}

TEST_CASE("argument checks") {
  const Tensor<double> a({4, 2}, std::vector<double>(8, 0.5));
  const Tensor<double> f({2}, std::vector<double>{0.5, 0.5});
  CHECK_THROWS_AS(predict_mask(a, f, 2, 2, 4, 4, 0.0), DomainError);
  CHECK_THROWS_AS(predict_mask(a, f, 2, 2, 4, 4, 1.0), DomainError);
  CHECK_THROWS_AS(predict_mask(a, f, 3, 2, 4, 4), DimensionError);
  CHECK_THROWS_AS(predict_mask(a, Tensor<double>({3}, 0.3), 2, 2, 4, 4), DimensionError);
  CHECK(parse_scheme("min") == InferenceScheme::Min);
  CHECK(to_string(InferenceScheme::Avg) == "avg");
  CHECK_THROWS_AS(parse_scheme("mean"), ConfigError);
}
