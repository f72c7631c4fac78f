#include "refseg/nn.hpp"

#include <algorithm>
#include <cmath>

#include "refseg/errors.hpp"

namespace refseg {

template <typename T>
Tensor<T> ParamStore<T>::add(std::string name, Shape shape, std::vector<T> values) {
  if (contains(name)) throw StateError("duplicate parameter name '" + name + "'");
  auto t = Tensor<T>::parameter(std::move(shape), std::move(values));
  entries_.emplace_back(std::move(name), t);
  return t;
}

template <typename T>
const Tensor<T>& ParamStore<T>::get(std::string_view name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw StateError("no parameter named '" + std::string(name) + "'");
}

template <typename T>
bool ParamStore<T>::contains(std::string_view name) const {
  return std::any_of(entries_.begin(), entries_.end(), [&](const Entry& e) { return e.first == name; });
}

template <typename T>
std::size_t ParamStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.second.numel();
  return n;
}

template <typename T>
void ParamStore<T>::zero_grad() {
  for (auto& e : entries_) e.second.zero_grad();
}

template <typename T>
std::vector<T> glorot_uniform(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::uniform_real_distribution<double> dist(-limit, limit);
  std::vector<T> w(fan_in * fan_out);
  for (auto& v : w) v = static_cast<T>(dist(rng));
  return w;
}

template <typename T>
LinearLayer<T> LinearLayer<T>::create(ParamStore<T>& store, const std::string& name, std::size_t in,
                                      std::size_t out, bool with_bias, Rng& rng) {
  LinearLayer layer;
  layer.weight = store.add(name + ".weight", {in, out}, glorot_uniform<T>(in, out, rng));
  if (with_bias) layer.bias = store.add(name + ".bias", {out}, std::vector<T>(out, T(0)));
  return layer;
}

template <typename T>
Tensor<T> LinearLayer<T>::operator()(const Tensor<T>& x) const {
  return bias.defined() ? linear(x, weight, bias) : linear(x, weight);
}

template <typename T>
LayerNormLayer<T> LayerNormLayer<T>::create(ParamStore<T>& store, const std::string& name, std::size_t dim) {
  LayerNormLayer layer;
  layer.gain = store.add(name + ".gain", {dim}, std::vector<T>(dim, T(1)));
  layer.bias = store.add(name + ".bias", {dim}, std::vector<T>(dim, T(0)));
  return layer;
}

template <typename T>
NormedProjection<T> NormedProjection<T>::create(ParamStore<T>& store, const std::string& name, std::size_t in,
                                                std::size_t out, Rng& rng) {
  NormedProjection p;
  p.norm = LayerNormLayer<T>::create(store, name + ".norm", in);
  p.proj = LinearLayer<T>::create(store, name + ".proj", in, out, false, rng);
  return p;
}

template <typename T>
Mlp<T> Mlp<T>::create(ParamStore<T>& store, const std::string& name, std::size_t in, std::size_t hidden,
                      std::size_t out, Rng& rng) {
  Mlp m;
  m.fc1 = LinearLayer<T>::create(store, name + ".fc1", in, hidden, true, rng);
  m.fc2 = LinearLayer<T>::create(store, name + ".fc2", hidden, out, true, rng);
  return m;
}

template <typename T>
SelfAttentionLayer<T> SelfAttentionLayer<T>::create(ParamStore<T>& store, const std::string& name, std::size_t dim,
                                                    std::size_t heads, std::size_t mlp_ratio, Rng& rng) {
  if (heads == 0 || dim % heads != 0) {
    throw ConfigError("attention width " + std::to_string(dim) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  }
  SelfAttentionLayer l;
  l.heads = heads;
  l.attn_norm = LayerNormLayer<T>::create(store, name + ".attn_norm", dim);
  l.q = LinearLayer<T>::create(store, name + ".q", dim, dim, false, rng);
  l.k = LinearLayer<T>::create(store, name + ".k", dim, dim, false, rng);
  l.v = LinearLayer<T>::create(store, name + ".v", dim, dim, false, rng);
  l.out = LinearLayer<T>::create(store, name + ".out", dim, dim, true, rng);
  l.mlp_norm = LayerNormLayer<T>::create(store, name + ".mlp_norm", dim);
  l.mlp = Mlp<T>::create(store, name + ".mlp", dim, dim * mlp_ratio, dim, rng);
  return l;
}

template <typename T>
Tensor<T> SelfAttentionLayer<T>::operator()(const Tensor<T>& x) const {
  if (x.rank() != 3) throw DimensionError("self-attention expects [G, S, D], got " + shape_str(x.shape()));
  const std::size_t g = x.dim(0), s = x.dim(1), d = x.dim(2), hd = d / heads;
  const auto h = attn_norm(x);
  // [G, S, D] -> [G * H, S, hd]
  auto split = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, {g, s, heads, hd}), {0, 2, 1, 3}), {g * heads, s, hd});
  };
  const auto qh = split(q(h));
  const auto kh = split(k(h));
  const auto vh = split(v(h));
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  const auto weights = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt), -1);
  const auto attended = reshape(permute(reshape(matmul(weights, vh), {g, heads, s, hd}), {0, 2, 1, 3}), {g, s, d});
  const auto res = x + out(attended);
  return res + mlp(mlp_norm(res));
}

template class ParamStore<float>;
template class ParamStore<double>;
template std::vector<float> glorot_uniform<float>(std::size_t, std::size_t, Rng&);
template std::vector<double> glorot_uniform<double>(std::size_t, std::size_t, Rng&);
template struct LinearLayer<float>;
template struct LinearLayer<double>;
template struct LayerNormLayer<float>;
template struct LayerNormLayer<double>;
template struct NormedProjection<float>;
template struct NormedProjection<double>;
template struct Mlp<float>;
template struct Mlp<double>;
template struct SelfAttentionLayer<float>;
template struct SelfAttentionLayer<double>;

}  // namespace refseg
