#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <vector>

#include "refseg/config.hpp"
#include "refseg/metrics.hpp"
#include "refseg/model.hpp"
#include "refseg/objectives.hpp"
#include "refseg/optimizer.hpp"
#include "refseg/synthetic.hpp"

namespace refseg {

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double loss = 0.0;      // mean total over the epoch's batches
  double c3 = 0.0;
  double recon = 0.0;
  double lr = 0.0;  // at the epoch's last step
  double seconds = 0.0;
  std::optional<Metrics> eval;
};

template <typename T>
struct TrainOutcome {
  std::unique_ptr<Model<T>> model;
  std::unique_ptr<AdamW<T>> optimizer;
  std::vector<EpochLog> log;
};

/// Fresh model and optimizer exactly as training would start them.
template <typename T>
TrainOutcome<T> initial_state(const RunConfig& cfg);

/// AdamW + cosine annealing over the training split. Throws NumericError
/// naming the epoch and batch when a loss or gradient goes non-finite.
template <typename T>
TrainOutcome<T> train(const RunConfig& cfg, const SyntheticDataset& data, const Split& split,
                      const std::function<void(const EpochLog&)>& on_epoch = {});

/// Attention maps of one evaluation pass, kept so that several tau/scheme
/// settings can be scored without re-running the model.
struct AttentionSet {
  std::size_t num_slots = 0;
  std::vector<std::size_t> items;
  std::vector<std::vector<double>> a_slot;  // per item, [N * K] row-major
  std::vector<std::vector<double>> a_fuse;  // per item, [K]
};

template <typename T>
AttentionSet collect_attention(const Model<T>& model, const SyntheticDataset& data,
                               std::span<const std::size_t> items, std::uint64_t seed, std::size_t batch_size = 32);

struct ScoreOptions {
  double tau = kDefaultTau;
  InferenceScheme scheme = InferenceScheme::Compose;
  std::optional<std::filesystem::path> mask_dir;  // writes <item>.pgm predictions when set
};

EvalRecord score_attention(const AttentionSet& att, const SyntheticDataset& data, const ScoreOptions& options);

template <typename T>
Metrics evaluate(const Model<T>& model, const SyntheticDataset& data, std::span<const std::size_t> items,
                 std::uint64_t seed, const ScoreOptions& options = {});

/// Mean IoU between each planted instance and its matched slot (argmax of
/// A_slot per patch), matched to maximise the total IoU.
double slot_discovery_iou(const AttentionSet& att, const SyntheticDataset& data);

}  // namespace refseg
