#include "refseg/trainer.hpp"

#include <chrono>
#include <cmath>
#include <numeric>
#include <random>

#include "refseg/errors.hpp"
#include "refseg/fusion.hpp"
#include "refseg/matching.hpp"

namespace refseg {

namespace {

constexpr std::uint64_t kInitStream = 0x696e6974;
constexpr std::uint64_t kShuffleStream = 0x73687566;
constexpr std::uint64_t kSlotStream = 0x736c6f74;

std::string describe_batch(std::size_t epoch, std::size_t batch, std::span<const std::size_t> items) {
  std::string s = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch) + " (items";
  for (auto i : items) s += " " + std::to_string(i);
  return s + ")";
}

template <typename T>
void check_gradients(const ParamStore<T>& store) {
  for (const auto& [name, p] : store.entries()) {
    for (T g : p.grad()) {
      if (!std::isfinite(static_cast<double>(g))) throw NumericError("non-finite gradient in " + name);
    }
  }
}

}  // namespace

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

template <typename T>
TrainOutcome<T> initial_state(const RunConfig& cfg) {
  cfg.validate();
  TrainOutcome<T> out;
  out.model = std::make_unique<Model<T>>(cfg.model, mix_seed(cfg.seed, kInitStream));
  out.optimizer = std::make_unique<AdamW<T>>(out.model->params(), cfg.optim);
  return out;
}

template <typename T>
TrainOutcome<T> train(const RunConfig& cfg, const SyntheticDataset& data, const Split& split,
                      const std::function<void(const EpochLog&)>& on_epoch) {
  if (split.train.empty()) throw ConfigError("training split is empty");
  if (data.spec.feature_dim != cfg.model.feature_dim || data.spec.grid_h != cfg.model.grid_h ||
      data.spec.grid_w != cfg.model.grid_w) {
    throw ConfigError("dataset dimensions do not match the model configuration");
  }
  auto out = initial_state<T>(cfg);
  const std::size_t n = split.train.size();
  const std::size_t bs = std::min(cfg.batch_size, n);
  const std::size_t batches = n / bs;  // a trailing partial batch is dropped
  const std::size_t total_steps = cfg.epochs * batches;
  LossOptions options;
  options.lambda_recon = cfg.lambda_recon;
  options.temperature = cfg.temperature;

  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order = split.train;
    std::mt19937_64 rng(mix_seed(mix_seed(cfg.seed, kShuffleStream), epoch));
    std::shuffle(order.begin(), order.end(), rng);

    EpochLog log;
    log.epoch = epoch;
    for (std::size_t b = 0; b < batches; ++b, ++step) {
      const std::span<const std::size_t> idx(order.data() + b * bs, bs);
      try {
        Batch<T> batch{stack_visual<T>(data, idx), stack_textual<T>(data, idx)};
        out.model->params().zero_grad();
        const auto terms = compute_losses(*out.model, batch, options, mix_seed(mix_seed(cfg.seed, kSlotStream), step));
        const double total = static_cast<double>(terms.total.item());
        if (!std::isfinite(total)) throw NumericError("loss is " + std::to_string(total));
        backward(terms.total);
        check_gradients(out.model->params());
        log.loss += total;
        log.c3 += static_cast<double>(terms.c3.item());
        log.recon += static_cast<double>(terms.recon.item());
      } catch (const NumericError& e) {
        throw NumericError("training diverged at " + describe_batch(epoch, b, idx) + ": " + e.what());
      }
      log.lr = cosine_lr(cfg.optim.lr, step, total_steps);
      out.optimizer->step(log.lr);
    }
    log.loss /= static_cast<double>(batches);
    log.c3 /= static_cast<double>(batches);
    log.recon /= static_cast<double>(batches);
    const bool last = epoch == cfg.epochs;
    if (!split.eval.empty() && (last || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0))) {
      log.eval = evaluate(*out.model, data, split.eval, cfg.eval_seed, {cfg.tau, cfg.scheme, std::nullopt});
    }
    log.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out.log.push_back(log);
    if (on_epoch) on_epoch(log);
  }
  return out;
}

template <typename T>
AttentionSet collect_attention(const Model<T>& model, const SyntheticDataset& data,
                               std::span<const std::size_t> items, std::uint64_t seed, std::size_t batch_size) {
  if (data.spec.feature_dim != model.config().feature_dim || data.spec.num_patches() != model.config().num_patches()) {
    throw ConfigError("dataset dimensions do not match the checkpoint configuration");
  }
  NoGradGuard no_grad;
  AttentionSet att;
  att.num_slots = model.config().num_slots();
  const std::size_t n = data.spec.num_patches(), k = att.num_slots;
  batch_size = std::max<std::size_t>(batch_size, 1);
  for (std::size_t start = 0; start < items.size(); start += batch_size) {
    const auto idx = items.subspan(start, std::min(batch_size, items.size() - start));
    // Seeds depend on the item, not on its position in a batch.
    std::vector<std::uint64_t> seeds;
    for (auto i : idx) seeds.push_back(mix_seed(seed, i));
    const auto found = model.discover(stack_visual<T>(data, idx), std::span<const std::uint64_t>(seeds));
    const auto fused = fuse(found.entities, stack_textual<T>(data, idx), model.fusion());
    const auto a_slot = found.a_slot.data();
    const auto a_fuse = fused.a_fuse.data();
    for (std::size_t b = 0; b < idx.size(); ++b) {
      att.items.push_back(idx[b]);
      att.a_slot.emplace_back(a_slot.begin() + static_cast<std::ptrdiff_t>(b * n * k),
                              a_slot.begin() + static_cast<std::ptrdiff_t>((b + 1) * n * k));
      att.a_fuse.emplace_back(a_fuse.begin() + static_cast<std::ptrdiff_t>(b * k),
                              a_fuse.begin() + static_cast<std::ptrdiff_t>((b + 1) * k));
    }
  }
  return att;
}

EvalRecord score_attention(const AttentionSet& att, const SyntheticDataset& data, const ScoreOptions& options) {
  const auto& s = data.spec;
  const std::size_t n = s.num_patches(), k = att.num_slots;
  if (options.mask_dir) std::filesystem::create_directories(*options.mask_dir);
  EvalRecord record;
  for (std::size_t i = 0; i < att.items.size(); ++i) {
    const Tensor<double> a_slot({n, k}, att.a_slot[i]);
    const Tensor<double> a_fuse({k}, att.a_fuse[i]);
    const auto pred = predict_mask(a_slot, a_fuse, s.grid_h, s.grid_w, s.image_h(), s.image_w(), options.tau,
                                   options.scheme);
    record.accumulate(pred, data.gt_mask(att.items[i]));
    if (options.mask_dir) write_pgm(*options.mask_dir / (std::to_string(att.items[i]) + ".pgm"), pred);
  }
  return record;
}

template <typename T>
Metrics evaluate(const Model<T>& model, const SyntheticDataset& data, std::span<const std::size_t> items,
                 std::uint64_t seed, const ScoreOptions& options) {
  return score_attention(collect_attention(model, data, items, seed), data, options).finalize();
}

double slot_discovery_iou(const AttentionSet& att, const SyntheticDataset& data) {
  const auto& s = data.spec;
  const std::size_t n = s.num_patches(), k = att.num_slots;
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < att.items.size(); ++i) {
    std::vector<Mask> slot_masks(k, Mask(s.grid_h, s.grid_w));
    for (std::size_t p = 0; p < n; ++p) {
      const double* row = att.a_slot[i].data() + p * k;
      slot_masks[static_cast<std::size_t>(std::max_element(row, row + k) - row)].bits[p] = 1;
    }
    const auto& item = data.items[att.items[i]];
    std::vector<std::vector<double>> score(item.instances.size(), std::vector<double>(k));
    for (std::size_t e = 0; e < item.instances.size(); ++e) {
      const auto planted = data.instance_grid(att.items[i], e);
      for (std::size_t j = 0; j < k; ++j) score[e][j] = iou(slot_masks[j], planted);
    }
    if (score.size() > k) score.resize(k);
    const auto assignment = match_rows(score);
    for (std::size_t e = 0; e < assignment.size(); ++e) total += score[e][assignment[e]];
    count += assignment.size();
  }
  return count == 0 ? 0.0 : total / static_cast<double>(count);
}

#define REFSEG_INSTANTIATE_TRAINER(T)                                                                          \
  template TrainOutcome<T> initial_state(const RunConfig&);                                                    \
  template TrainOutcome<T> train(const RunConfig&, const SyntheticDataset&, const Split&,                      \
                                 const std::function<void(const EpochLog&)>&);                                 \
  template AttentionSet collect_attention(const Model<T>&, const SyntheticDataset&, std::span<const std::size_t>, \
                                          std::uint64_t, std::size_t);                                         \
  template Metrics evaluate(const Model<T>&, const SyntheticDataset&, std::span<const std::size_t>,            \
                            std::uint64_t, const ScoreOptions&);

REFSEG_INSTANTIATE_TRAINER(float)
REFSEG_INSTANTIATE_TRAINER(double)

#undef REFSEG_INSTANTIATE_TRAINER

}  // namespace refseg
