#include "refseg/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <random>

#include "refseg/errors.hpp"
#include "refseg/feature_file.hpp"
#include "refseg/metrics.hpp"

namespace refseg {

namespace {

using Rng = std::mt19937_64;

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

constexpr std::uint64_t kPrototypeStream = 0x70726f746f;
constexpr std::uint64_t kSplitStream = 0x73706c6974;
constexpr std::size_t kLayoutAttempts = 100;
constexpr std::size_t kPlacementAttempts = 50;

std::size_t uniform(Rng& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

bool overlaps(const PlantedInstance& a, const PlantedInstance& b) {
  return a.top < b.top + b.height && b.top < a.top + a.height && a.left < b.left + b.width &&
         b.left < a.left + a.width;
}

// Instance rectangles, or empty if the layout could not be completed.
std::vector<PlantedInstance> try_layout(const SyntheticSpec& spec, std::size_t count, Rng& rng) {
  std::vector<PlantedInstance> placed;
  const std::size_t max_h = std::min(spec.max_side, spec.grid_h), max_w = std::min(spec.max_side, spec.grid_w);
  for (std::size_t i = 0; i < count; ++i) {
    bool ok = false;
    for (std::size_t attempt = 0; attempt < kPlacementAttempts && !ok; ++attempt) {
      PlantedInstance inst;
      inst.height = uniform(rng, std::min(spec.min_side, max_h), max_h);
      inst.width = uniform(rng, std::min(spec.min_side, max_w), max_w);
      inst.top = uniform(rng, 0, spec.grid_h - inst.height);
      inst.left = uniform(rng, 0, spec.grid_w - inst.width);
      ok = std::none_of(placed.begin(), placed.end(), [&](const auto& p) { return overlaps(p, inst); });
      if (ok) placed.push_back(inst);
    }
    if (!ok) return {};
  }
  return placed;
}

SyntheticItem generate_item(const SyntheticSpec& spec, const std::vector<std::vector<float>>& protos,
                            std::size_t index) {
  Rng rng(mix(spec.seed, index + 1));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t d = spec.feature_dim, n = spec.num_patches();
  const std::size_t count = uniform(rng, 1, spec.max_instances);

  SyntheticItem item;
  for (std::size_t attempt = 0; attempt < kLayoutAttempts && item.instances.empty(); ++attempt) {
    item.instances = try_layout(spec, count, rng);
  }
  if (item.instances.empty()) {
    throw GenerationError("could not place " + std::to_string(count) + " instances on a " +
                          std::to_string(spec.grid_h) + "x" + std::to_string(spec.grid_w) + " grid for item " +
                          std::to_string(index));
  }

  // Instance vector = group prototype + offset of norm offset_scale.
  std::vector<std::vector<float>> vectors;
  for (auto& inst : item.instances) {
    inst.group = uniform(rng, 0, spec.num_groups - 1);
    std::vector<double> offset(d);
    double norm = 0.0;
    for (auto& x : offset) {
      x = normal(rng);
      norm += x * x;
    }
    norm = std::sqrt(norm);
    std::vector<float> v(d);
    for (std::size_t c = 0; c < d; ++c) {
      v[c] = static_cast<float>(protos[inst.group][c] + spec.offset_scale * offset[c] / norm);
    }
    vectors.push_back(std::move(v));
  }

  const auto& background = protos[spec.num_groups];
  item.visual.resize(n * d);
  for (std::size_t r = 0; r < spec.grid_h; ++r) {
    for (std::size_t c = 0; c < spec.grid_w; ++c) {
      const float* base = background.data();
      for (std::size_t i = 0; i < item.instances.size(); ++i) {
        if (item.instances[i].covers(r, c)) base = vectors[i].data();
      }
      float* out = item.visual.data() + (r * spec.grid_w + c) * d;
      for (std::size_t ch = 0; ch < d; ++ch) out[ch] = static_cast<float>(base[ch] + spec.noise_std * normal(rng));
    }
  }

  std::vector<std::size_t> order(item.instances.size());
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const std::size_t arity = std::min(spec.referent_arity, order.size());
  item.referred.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(arity));
  std::sort(item.referred.begin(), item.referred.end());

  item.textual.assign(d, 0.0f);
  std::vector<double> text(d, 0.0);
  for (auto i : item.referred) {
    for (std::size_t ch = 0; ch < d; ++ch) text[ch] += vectors[i][ch];
  }
  for (std::size_t ch = 0; ch < d; ++ch) item.textual[ch] = static_cast<float>(text[ch] / static_cast<double>(arity));

  item.gt_grid = Mask(spec.grid_h, spec.grid_w);
  for (auto i : item.referred) {
    const auto& inst = item.instances[i];
    for (std::size_t r = inst.top; r < inst.top + inst.height; ++r) {
      for (std::size_t c = inst.left; c < inst.left + inst.width; ++c) item.gt_grid.bits[r * spec.grid_w + c] = 1;
    }
  }
  return item;
}

}  // namespace

void SyntheticSpec::validate() const {
  if (grid_h == 0 || grid_w == 0 || feature_dim == 0 || patch_px == 0) {
    throw ConfigError("synthetic grid, feature_dim and patch_px must be positive");
  }
  if (num_groups == 0 || num_groups + 1 > feature_dim) {
    throw ConfigError("synthetic spec needs 1 <= num_groups < feature_dim (one prototype is background)");
  }
  if (max_instances == 0 || referent_arity == 0) throw ConfigError("max_instances and referent_arity must be >= 1");
  if (min_side == 0 || min_side > max_side) throw ConfigError("synthetic rectangle sides need 1 <= min <= max");
  if (noise_std < 0.0 || offset_scale < 0.0) throw ConfigError("noise_std and offset_scale must be >= 0");
  if (num_items == 0) throw ConfigError("synthetic dataset needs at least one item");
}

std::vector<std::vector<float>> orthonormal_prototypes(std::size_t count, std::size_t dim, std::uint64_t seed) {
  if (count > dim) throw GenerationError("cannot build " + std::to_string(count) + " orthonormal vectors in R^" +
                                         std::to_string(dim));
  Rng rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<std::vector<double>> basis;
  while (basis.size() < count) {
    std::vector<double> v(dim);
    for (auto& x : v) x = normal(rng);
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double dot = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
        for (std::size_t i = 0; i < dim; ++i) v[i] -= dot * b[i];
      }
    }
    const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
    if (norm < 1e-6) continue;
    for (auto& x : v) x /= norm;
    basis.push_back(std::move(v));
  }
  std::vector<std::vector<float>> out;
  for (const auto& b : basis) out.emplace_back(b.begin(), b.end());
  return out;
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SyntheticDataset data;
  data.spec = spec;
  data.prototypes = orthonormal_prototypes(spec.num_groups + 1, spec.feature_dim, mix(spec.seed, kPrototypeStream));
  data.items.reserve(spec.num_items);
  for (std::size_t i = 0; i < spec.num_items; ++i) data.items.push_back(generate_item(spec, data.prototypes, i));
  return data;
}

Mask upscale(const Mask& grid, std::size_t factor) {
  Mask out(grid.height * factor, grid.width * factor);
  for (std::size_t r = 0; r < out.height; ++r) {
    for (std::size_t c = 0; c < out.width; ++c) out.bits[r * out.width + c] = grid.at(r / factor, c / factor);
  }
  return out;
}

Mask SyntheticDataset::gt_mask(std::size_t item) const { return upscale(items.at(item).gt_grid, spec.patch_px); }

Mask SyntheticDataset::instance_grid(std::size_t item, std::size_t instance) const {
  const auto& inst = items.at(item).instances.at(instance);
  Mask m(spec.grid_h, spec.grid_w);
  for (std::size_t r = 0; r < spec.grid_h; ++r) {
    for (std::size_t c = 0; c < spec.grid_w; ++c) m.bits[r * spec.grid_w + c] = inst.covers(r, c) ? 1 : 0;
  }
  return m;
}

std::vector<std::size_t> nearest_prototype(const SyntheticDataset& data, std::size_t item) {
  const std::size_t d = data.spec.feature_dim, n = data.spec.num_patches();
  const auto& visual = data.items.at(item).visual;
  std::vector<std::size_t> labels(n);
  for (std::size_t p = 0; p < n; ++p) {
    double best = INFINITY;
    for (std::size_t g = 0; g < data.prototypes.size(); ++g) {
      double dist = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        const double diff = static_cast<double>(visual[p * d + c]) - data.prototypes[g][c];
        dist += diff * diff;
      }
      if (dist < best) {
        best = dist;
        labels[p] = g;
      }
    }
  }
  return labels;
}

Split split_items(std::size_t count, std::uint64_t seed, double train_fraction) {
  std::vector<std::size_t> order(count);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(mix(seed, kSplitStream));
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(count)));
  Split split;
  split.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  split.eval.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
  return split;
}

template <typename T>
Tensor<T> stack_visual(const SyntheticDataset& data, std::span<const std::size_t> idx) {
  const std::size_t n = data.spec.num_patches(), d = data.spec.feature_dim;
  std::vector<T> out;
  out.reserve(idx.size() * n * d);
  for (auto i : idx) out.insert(out.end(), data.items.at(i).visual.begin(), data.items.at(i).visual.end());
  return Tensor<T>({idx.size(), n, d}, std::move(out));
}

template <typename T>
Tensor<T> stack_textual(const SyntheticDataset& data, std::span<const std::size_t> idx) {
  const std::size_t d = data.spec.feature_dim;
  std::vector<T> out;
  out.reserve(idx.size() * d);
  for (auto i : idx) out.insert(out.end(), data.items.at(i).textual.begin(), data.items.at(i).textual.end());
  return Tensor<T>({idx.size(), d}, std::move(out));
}

template Tensor<float> stack_visual(const SyntheticDataset&, std::span<const std::size_t>);
template Tensor<double> stack_visual(const SyntheticDataset&, std::span<const std::size_t>);
template Tensor<float> stack_textual(const SyntheticDataset&, std::span<const std::size_t>);
template Tensor<double> stack_textual(const SyntheticDataset&, std::span<const std::size_t>);

namespace {

nlohmann::json spec_to_json(const SyntheticSpec& s) {
  return {{"grid_h", s.grid_h},           {"grid_w", s.grid_w},
          {"num_groups", s.num_groups},   {"max_instances", s.max_instances},
          {"feature_dim", s.feature_dim}, {"noise_std", s.noise_std},
          {"offset_scale", s.offset_scale}, {"min_side", s.min_side},
          {"max_side", s.max_side},       {"referent_arity", s.referent_arity},
          {"patch_px", s.patch_px},       {"num_items", s.num_items},
          {"seed", s.seed}};
}

SyntheticSpec spec_from_json(const nlohmann::json& j) {
  SyntheticSpec s;
  s.grid_h = j.at("grid_h");
  s.grid_w = j.at("grid_w");
  s.num_groups = j.at("num_groups");
  s.max_instances = j.at("max_instances");
  s.feature_dim = j.at("feature_dim");
  s.noise_std = j.at("noise_std");
  s.offset_scale = j.at("offset_scale");
  s.min_side = j.at("min_side");
  s.max_side = j.at("max_side");
  s.referent_arity = j.at("referent_arity");
  s.patch_px = j.at("patch_px");
  s.num_items = j.at("num_items");
  s.seed = j.at("seed");
  return s;
}

}  // namespace

void save_dataset(const SyntheticDataset& data, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto& s = data.spec;
  const std::size_t m = data.items.size(), n = s.num_patches(), d = s.feature_dim;
  FeatureFile visual{FeatureRole::Visual,
                     {static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(n), static_cast<std::uint32_t>(d)},
                     {}};
  FeatureFile textual{FeatureRole::Textual, {static_cast<std::uint32_t>(m), static_cast<std::uint32_t>(d)}, {}};
  Mask stacked(m * s.grid_h, s.grid_w);
  nlohmann::json instances = nlohmann::json::array();
  for (std::size_t i = 0; i < m; ++i) {
    const auto& item = data.items[i];
    visual.payload.insert(visual.payload.end(), item.visual.begin(), item.visual.end());
    textual.payload.insert(textual.payload.end(), item.textual.begin(), item.textual.end());
    std::copy(item.gt_grid.bits.begin(), item.gt_grid.bits.end(), stacked.bits.begin() + i * n);
    nlohmann::json rects = nlohmann::json::array();
    for (const auto& inst : item.instances) {
      rects.push_back({inst.group, inst.top, inst.left, inst.height, inst.width});
    }
    instances.push_back({{"instances", rects}, {"referred", item.referred}});
  }
  write_feature_file(dir / "visual.sgft", visual);
  write_feature_file(dir / "textual.sgft", textual);
  write_pgm(dir / "gt.pgm", stacked);
  std::ofstream(dir / "spec.json") << spec_to_json(s).dump(2) << "\n";
  std::ofstream(dir / "instances.json") << instances.dump() << "\n";
}

SyntheticDataset load_dataset(const std::filesystem::path& dir) {
  SyntheticDataset data;
  try {
    std::ifstream spec_in(dir / "spec.json");
    if (!spec_in) throw FormatError("missing " + (dir / "spec.json").string());
    data.spec = spec_from_json(nlohmann::json::parse(spec_in));
    data.spec.validate();
    const auto& s = data.spec;
    const auto visual = read_feature_file(dir / "visual.sgft");
    const auto textual = read_feature_file(dir / "textual.sgft");
    const auto stacked = read_pgm(dir / "gt.pgm");
    std::ifstream inst_in(dir / "instances.json");
    const auto instances = nlohmann::json::parse(inst_in);
    const std::size_t m = s.num_items, n = s.num_patches(), d = s.feature_dim;
    if (visual.payload.size() != m * n * d || textual.payload.size() != m * d ||
        stacked.height != m * s.grid_h || stacked.width != s.grid_w || instances.size() != m) {
      throw FormatError(dir.string() + ": dataset files disagree with spec.json");
    }
    data.prototypes = orthonormal_prototypes(s.num_groups + 1, d, mix(s.seed, kPrototypeStream));
    data.items.resize(m);
    for (std::size_t i = 0; i < m; ++i) {
      auto& item = data.items[i];
      item.visual.assign(visual.payload.begin() + static_cast<std::ptrdiff_t>(i * n * d),
                         visual.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * n * d));
      item.textual.assign(textual.payload.begin() + static_cast<std::ptrdiff_t>(i * d),
                          textual.payload.begin() + static_cast<std::ptrdiff_t>((i + 1) * d));
      item.gt_grid = Mask(s.grid_h, s.grid_w);
      std::copy(stacked.bits.begin() + static_cast<std::ptrdiff_t>(i * n),
                stacked.bits.begin() + static_cast<std::ptrdiff_t>((i + 1) * n), item.gt_grid.bits.begin());
      for (const auto& r : instances[i].at("instances")) {
        item.instances.push_back({r[0], r[1], r[2], r[3], r[4]});
      }
      item.referred = instances[i].at("referred").get<std::vector<std::size_t>>();
    }
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(dir.string() + ": " + e.what());
  }
  return data;
}

}  // namespace refseg
