#include "doctest.h"
#include "refseg/errors.hpp"
#include "refseg/nn.hpp"
#include "support/gradcheck.hpp"

using namespace refseg;

TEST_CASE("tensor construction") {
  CHECK(Tensor<double>({2, 3}, 1.5).numel() == 6);
  CHECK(Tensor<double>::scalar(2.0).rank() == 0);
  CHECK(Tensor<double>::scalar(2.0).item() == 2.0);
  CHECK_THROWS_AS(Tensor<double>({2, 0}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  CHECK_THROWS_AS(Tensor<double>().shape(), StateError);
  CHECK_THROWS_AS(Tensor<double>({2}, 1.0).item(), DimensionError);
  CHECK(Tensor<double>({2, 3, 4}).dim(-1) == 4);
  CHECK_THROWS_AS(Tensor<double>({2, 3}).dim(2), DimensionError);
}

TEST_CASE("leaves versus op outputs") {
  auto p = Tensor<double>::parameter({2}, {1, 2});
  const auto y = scale(p, 3.0);
  CHECK(y.requires_grad());
  CHECK(std::string(y.op_name()) == "scale");
  auto out = y;
  CHECK_THROWS_AS(out.mutable_data(), StateError);
  CHECK_THROWS_AS(out.set_requires_grad(false), StateError);
  p.mutable_data()[0] = 5.0;
  CHECK(p[0] == 5.0);
  CHECK(reshape(p, {1, 2}).shape() == Shape{1, 2});
  CHECK_THROWS_AS(reshape(p, {3}), DimensionError);
}

TEST_CASE("no-grad guard") {
  auto p = Tensor<double>::parameter({2}, {1, 2});
  {
    NoGradGuard guard;
    CHECK_FALSE(grad_enabled());
    CHECK_FALSE(exp(p).requires_grad());
    {
      NoGradGuard inner;
    }
    CHECK_FALSE(grad_enabled());
  }
  CHECK(grad_enabled());
  CHECK(exp(p).requires_grad());
}

TEST_CASE("graph order and accumulation") {
  auto a = Tensor<double>::parameter({1}, {3});
  const auto b = square(a);        // 9
  const auto c = b * a;            // a^3
  const auto loss = sum_all(c + b);  // a^3 + a^2
  Graph<double> g(loss);
  // Every op appears after its inputs.
  const auto& order = g.order();
  for (std::size_t i = 0; i < order.size(); ++i) {
    for (const auto& in : order[i]->inputs) {
      if (!in->requires_grad) continue;
      const auto pos = std::find(order.begin(), order.end(), in.get()) - order.begin();
      CHECK(static_cast<std::size_t>(pos) < i);
    }
  }
  g.backward();
  CHECK(a.grad()[0] == doctest::Approx(3 * 9 + 2 * 3));
  // Intermediate gradients are released after the pass.
  CHECK(b.grad().empty());

  // A second pass accumulates into the leaf.
  backward(loss);
  CHECK(a.grad()[0] == doctest::Approx(2 * 33));
  a.zero_grad();
  CHECK(a.grad().empty());
  CHECK(a.grad_or_zeros() == std::vector<double>{0.0});
}

TEST_CASE("seeded backward and root checks") {
  auto a = Tensor<double>::parameter({2}, {1, 2});
  const auto y = scale(a, 2.0);
  CHECK_THROWS_AS(backward(y), DimensionError);
  Graph<double> g(y);
  const std::vector<double> seed = {1.0, -1.0};
  g.backward(seed);
  CHECK(a.grad_or_zeros() == std::vector<double>{2.0, -2.0});
  CHECK_THROWS_AS(g.backward(std::vector<double>{1.0}), DimensionError);
  // Nothing requires gradient: a no-op.
  backward(sum_all(Tensor<double>({2}, 1.0)));
}

TEST_CASE("precision casts") {
  const auto d = Tensor<double>({2}, std::vector<double>{0.1, 1e-3});
  const auto f = d.cast<float>();
  CHECK(f[0] == 0.1f);
  CHECK_FALSE(f.requires_grad());
}

TEST_CASE("MLP block gradients") {
  ParamStore<double> store;
  Rng rng(3);
  auto mlp = Mlp<double>::create(store, "mlp", 4, 6, 3, rng);
  for (auto [name, p] : store.entries()) {
    if (name.find("bias") != std::string::npos) {
      auto v = p.mutable_data();
      for (std::size_t i = 0; i < v.size(); ++i) v[i] = 0.1 * static_cast<double>(i + 1) - 0.25;
    }
  }
  auto x = Tensor<double>::parameter({5, 4}, std::vector<double>(20));
  for (std::size_t i = 0; i < 20; ++i) x.mutable_data()[i] = std::sin(1.7 * static_cast<double>(i));
  std::vector<Tensor<double>> leaves = {x};
  for (const auto& [name, p] : store.entries()) leaves.push_back(p);
  const auto w = Tensor<double>({5, 3}, std::vector<double>{1, -2, 3, 0.5, 1, -1, 2, 2, 0.1, -0.3, 1, 1, 0.2, 0.7, -1});
  const auto r = refseg::testing::grad_check(leaves, [&] { return sum_all(mlp(x) * w); });
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-6);

  CHECK_THROWS_AS(store.add("mlp.fc1.weight", {1}, {0.0}), StateError);
  CHECK(store.scalar_count() == 4 * 6 + 6 + 6 * 3 + 3);
}

TEST_CASE("self-attention layer gradients") {
  ParamStore<double> store;
  Rng rng(5);
  auto layer = SelfAttentionLayer<double>::create(store, "sa", 4, 2, 2, rng);
  auto x = Tensor<double>::parameter({2, 3, 4}, std::vector<double>(24));
  for (std::size_t i = 0; i < 24; ++i) x.mutable_data()[i] = std::cos(0.9 * static_cast<double>(i));
  std::vector<Tensor<double>> leaves = {x};
  for (const auto& [name, p] : store.entries()) leaves.push_back(p);
  for (std::size_t i = 1; i < leaves.size(); ++i) {
    if (store.entries()[i - 1].first.find("bias") == std::string::npos) continue;
    auto v = leaves[i].mutable_data();
    for (std::size_t j = 0; j < v.size(); ++j) v[j] = 0.05 * static_cast<double>(j % 5) - 0.1;
  }
  std::vector<double> wv(24);
  for (std::size_t i = 0; i < 24; ++i) wv[i] = std::sin(0.3 * static_cast<double>(i) + 1.0);
  const Tensor<double> w({2, 3, 4}, wv);
  const auto r = refseg::testing::grad_check(leaves, [&] { return sum_all(layer(x) * w); });
  INFO(r.worst);
  CHECK(r.max_rel_error < 1e-6);
}
