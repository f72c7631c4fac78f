#include "refseg/ablation.hpp"

#include <cstdio>
#include <sstream>

#include "refseg/errors.hpp"
#include "refseg/trainer.hpp"

namespace refseg {

namespace {

RunConfig variant(const RunConfig& base, const std::string& axis, const std::string& value) {
  RunConfig cfg = base;
  if (axis == "slot_kind") {
    cfg.model.slot_kind = parse_slot_kind(value);
  } else if (axis == "kgks") {
    const auto x = value.find('x');
    cfg.model.k_g = std::stoul(value.substr(0, x));
    cfg.model.k_s = std::stoul(value.substr(x + 1));
  } else if (axis == "t_iters") {
    cfg.model.t_iters = std::stoul(value);
  } else if (axis == "tau") {
    cfg.tau = std::stod(value);
  } else if (axis == "scheme") {
    cfg.scheme = parse_scheme(value);
  } else if (axis == "loss") {
    if (value == "no_recon") cfg.lambda_recon = 0.0;
  } else if (axis == "components") {
    if (value == "no_interaction") cfg.model.use_interaction = false;
    if (value == "keys_norm") cfg.model.attention_norm = AttentionNorm::Keys;
  }
  return cfg;
}

template <typename T>
std::vector<AblationRow> run_typed(const std::string& axis, const RunConfig& base, const SyntheticDataset& data,
                                   const std::vector<std::uint64_t>& seeds,
                                   const std::function<void(const AblationRow&)>& on_row) {
  const auto values = ablation_values(axis);
  const bool inference_only = axis == "tau" || axis == "scheme";
  std::vector<AblationRow> rows;
  auto emit = [&](AblationRow row) {
    if (on_row) on_row(row);
    rows.push_back(std::move(row));
  };
  for (auto seed : seeds) {
    RunConfig seeded = base;
    seeded.seed = seed;
    // Only the final epoch is evaluated inside the sweep.
    seeded.eval_every = 0;
    const auto split = split_items(data.items.size(), data.spec.seed);
    if (inference_only) {
      const auto trained = train<T>(seeded, data, split);
      const auto att = collect_attention(*trained.model, data, split.eval, seeded.eval_seed);
      for (const auto& value : values) {
        const auto cfg = variant(seeded, axis, value);
        emit({axis, value, seed, score_attention(att, data, {cfg.tau, cfg.scheme, std::nullopt}).finalize()});
      }
      continue;
    }
    for (const auto& value : values) {
      const auto cfg = variant(seeded, axis, value);
      const auto trained = train<T>(cfg, data, split);
      emit({axis, value, seed, *trained.log.back().eval});
    }
  }
  return rows;
}

std::string fixed4(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4f", x);
  return buf;
}

}  // namespace

const std::vector<std::string>& ablation_axes() {
  static const std::vector<std::string> axes = {"slot_kind", "kgks", "t_iters", "tau", "scheme", "loss", "components"};
  return axes;
}

std::vector<std::string> ablation_values(const std::string& axis) {
  if (axis == "slot_kind") return {"entity", "random", "query"};
  if (axis == "kgks") return {"36x1", "18x2", "12x3", "9x4", "6x6"};
  if (axis == "t_iters") return {"1", "2", "4", "6", "8"};
  if (axis == "tau") return {"0.3", "0.4", "0.5", "0.6", "0.7"};
  if (axis == "scheme") return {"compose", "avg", "max", "min"};
  if (axis == "loss") return {"full", "no_recon"};
  if (axis == "components") return {"full", "no_interaction", "keys_norm"};
  std::string known;
  for (const auto& a : ablation_axes()) known += (known.empty() ? "" : "|") + a;
  throw ConfigError("unknown ablation axis '" + axis + "' (" + known + ")");
}

std::vector<AblationRow> run_ablation(const std::string& axis, const RunConfig& base, const SyntheticDataset& data,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::function<void(const AblationRow&)>& on_row) {
  ablation_values(axis);
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  if (base.precision == Precision::F64) return run_typed<double>(axis, base, data, seeds, on_row);
  return run_typed<float>(axis, base, data, seeds, on_row);
}

std::string rows_to_csv(const std::vector<AblationRow>& rows) {
  std::string out = "axis,value,seed,ciou,miou,acc@0.3,acc@0.5,acc@0.7\n";
  for (const auto& r : rows) {
    out += r.axis + "," + r.value + "," + std::to_string(r.seed) + "," + fixed4(r.metrics.ciou) + "," +
           fixed4(r.metrics.miou) + "," + fixed4(r.metrics.acc[0]) + "," + fixed4(r.metrics.acc[1]) + "," +
           fixed4(r.metrics.acc[2]) + "\n";
  }
  return out;
}

std::vector<AblationRow> rows_from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "axis,value,seed,ciou,miou,acc@0.3,acc@0.5,acc@0.7") {
    throw FormatError("ablation csv: unexpected header");
  }
  std::vector<AblationRow> rows;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) cells.push_back(cell);
    if (cells.size() != 8) throw FormatError("ablation csv line " + std::to_string(lineno) + ": expected 8 cells");
    try {
      AblationRow r;
      r.axis = cells[0];
      r.value = cells[1];
      r.seed = std::stoull(cells[2]);
      r.metrics.ciou = std::stod(cells[3]);
      r.metrics.miou = std::stod(cells[4]);
      for (std::size_t t = 0; t < 3; ++t) r.metrics.acc[t] = std::stod(cells[5 + t]);
      rows.push_back(r);
    } catch (const std::exception&) {
      throw FormatError("ablation csv line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

}  // namespace refseg
