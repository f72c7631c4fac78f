// refseg: generate synthetic data, train, evaluate, export masks, run ablations.

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <optional>

#include "refseg/ablation.hpp"
#include "refseg/checkpoint.hpp"
#include "refseg/errors.hpp"
#include "refseg/trainer.hpp"

using namespace refseg;
namespace fs = std::filesystem;

namespace {

// Flags shared by every subcommand. Unset flags leave the config alone.
struct Overrides {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> slot_kind;
  std::optional<std::size_t> kg, ks, t_iters, epochs;
  std::optional<double> tau, lambda_recon;
  std::optional<std::string> scheme, precision;
  std::string out;
  std::string data;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "TOML-style config file")->check(CLI::ExistingFile);
    app->add_option("--seed", seed, "run seed");
    app->add_option("--slot-kind", slot_kind, "entity|random|query");
    app->add_option("--kg", kg, "number of slot groups K_g");
    app->add_option("--ks", ks, "slots per group K_s");
    app->add_option("--t-iters", t_iters, "refinement iterations T");
    app->add_option("--tau", tau, "mask threshold");
    app->add_option("--scheme", scheme, "compose|avg|max|min");
    app->add_option("--lambda-recon", lambda_recon, "reconstruction loss weight");
    app->add_option("--precision", precision, "f32|f64");
    app->add_option("--epochs", epochs, "training epochs");
    app->add_option("--out", out, "output directory (default $REFSEG_OUT, then ./refseg_out)");
    app->add_option("--data", data, "dataset directory written by `gen` (default: regenerate from config)");
  }

  void apply(RunConfig& cfg) const {
    if (seed) cfg.seed = *seed;
    if (slot_kind) cfg.model.slot_kind = parse_slot_kind(*slot_kind);
    if (kg) cfg.model.k_g = *kg;
    if (ks) cfg.model.k_s = *ks;
    if (t_iters) cfg.model.t_iters = *t_iters;
    if (tau) cfg.tau = *tau;
    if (scheme) cfg.scheme = parse_scheme(*scheme);
    if (lambda_recon) cfg.lambda_recon = *lambda_recon;
    if (precision) cfg.precision = parse_precision(*precision);
    if (epochs) cfg.epochs = *epochs;
    cfg.validate();
  }

  RunConfig config_from_flags() const {
    RunConfig cfg = config.empty() ? synthetic_preset() : load_config(config, synthetic_preset());
    apply(cfg);
    return cfg;
  }

  fs::path out_dir() const {
    fs::path dir = out;
    if (dir.empty()) {
      const char* env = std::getenv("REFSEG_OUT");
      dir = env && *env ? env : "refseg_out";
    }
    fs::create_directories(dir);
    return dir;
  }

  SyntheticDataset dataset(const RunConfig& cfg) const {
    auto data = this->data.empty() ? generate_synthetic(cfg.data) : load_dataset(this->data);
    if (data.spec.feature_dim != cfg.model.feature_dim || data.spec.grid_h != cfg.model.grid_h ||
        data.spec.grid_w != cfg.model.grid_w) {
      throw ConfigError("dataset is " + std::to_string(data.spec.grid_h) + "x" + std::to_string(data.spec.grid_w) +
                        " patches of dim " + std::to_string(data.spec.feature_dim) + ", model expects " +
                        std::to_string(cfg.model.grid_h) + "x" + std::to_string(cfg.model.grid_w) + " of dim " +
                        std::to_string(cfg.model.feature_dim));
    }
    return data;
  }
};

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
}

nlohmann::json epoch_json(const EpochLog& l) {
  nlohmann::json j = {{"epoch", l.epoch}, {"loss", l.loss}, {"c3", l.c3},      {"recon", l.recon},
                      {"lr", l.lr},       {"seconds", l.seconds}};
  if (l.eval) j["eval"] = nlohmann::json::parse(l.eval->to_json());
  return j;
}

template <typename T>
int train_as(const RunConfig& cfg, const SyntheticDataset& data, const fs::path& out) {
  const auto split = split_items(data.items.size(), data.spec.seed);
  std::ofstream log(out / "train_log.jsonl");
  std::vector<EpochLog> seen;
  try {
    auto result = train<T>(cfg, data, split, [&](const EpochLog& l) {
      seen.push_back(l);
      const auto j = epoch_json(l);
      log << j.dump() << "\n" << std::flush;
      std::printf("epoch %zu  loss %.4f  c3 %.4f  recon %.4f  %.1fs%s%s\n", l.epoch, l.loss, l.c3, l.recon, l.seconds,
                  l.eval ? "  " : "", l.eval ? l.eval->to_json().c_str() : "");
      std::fflush(stdout);
    });
    save_checkpoint(out / "checkpoint.sgck", cfg, *result.model, *result.optimizer);
    write_text(out / "config.json", cfg.to_json());
    if (!result.log.empty() && result.log.back().eval) write_text(out / "metrics.json", result.log.back().eval->to_json());
    std::printf("checkpoint written to %s\n", (out / "checkpoint.sgck").string().c_str());
    return 0;
  } catch (const NumericError& e) {
    nlohmann::json dump = {{"error", e.what()}, {"config", nlohmann::json::parse(cfg.to_json())}};
    dump["epochs"] = nlohmann::json::array();
    for (const auto& l : seen) dump["epochs"].push_back(epoch_json(l));
    write_text(out / "divergence.json", dump.dump(2));
    std::fprintf(stderr, "%s\ndiagnostics written to %s\n", e.what(), (out / "divergence.json").string().c_str());
    return 2;
  }
}

template <typename T>
Metrics eval_as(const fs::path& ckpt, const Overrides& o, const fs::path& out, std::optional<fs::path> mask_dir) {
  if (!o.config.empty() || o.seed || o.slot_kind || o.kg || o.ks || o.t_iters || o.epochs || o.lambda_recon ||
      o.precision) {
    std::fprintf(stderr, "warning: model and training flags are taken from the checkpoint; only --tau, --scheme, "
                         "--data and --out apply here\n");
  }
  auto loaded = load_checkpoint<T>(ckpt);
  RunConfig cfg = loaded.config;
  if (o.tau) cfg.tau = *o.tau;
  if (o.scheme) cfg.scheme = parse_scheme(*o.scheme);
  const auto data = o.dataset(cfg);
  const auto split = split_items(data.items.size(), data.spec.seed);
  if (mask_dir) fs::create_directories(*mask_dir);
  const auto m = evaluate(*loaded.model, data, split.eval, cfg.eval_seed, {cfg.tau, cfg.scheme, mask_dir});
  write_text(out / "metrics.json", m.to_json());
  return m;
}

Metrics evaluate_checkpoint(const fs::path& ckpt, const Overrides& o, const fs::path& out,
                            std::optional<fs::path> mask_dir) {
  return checkpoint_precision(ckpt) == Precision::F64 ? eval_as<double>(ckpt, o, out, mask_dir)
                                                      : eval_as<float>(ckpt, o, out, mask_dir);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Referring segmentation with entity discovery: training and evaluation harness"};
  app.require_subcommand(1);
  Overrides o;

  auto* gen = app.add_subcommand("gen", "generate the synthetic dataset into <out>/data");
  auto* tr = app.add_subcommand("train", "train a model; writes checkpoint.sgck, train_log.jsonl, metrics.json");
  auto* ev = app.add_subcommand("eval", "evaluate a checkpoint on the held-out split; writes metrics.json");
  auto* ex = app.add_subcommand("export-masks", "write predicted masks of the held-out split as PGM files");
  auto* ab = app.add_subcommand("ablate", "run one ablation axis; writes ablation_<axis>.csv");
  for (auto* sub : {gen, tr, ev, ex, ab}) o.attach(sub);

  std::string checkpoint;
  for (auto* sub : {ev, ex}) {
    sub->add_option("--checkpoint", checkpoint, "checkpoint written by `train`")->required()->check(CLI::ExistingFile);
  }
  std::string axis;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  ab->add_option("--axis", axis, "ablation axis")->required()->check(CLI::IsMember(ablation_axes()));
  ab->add_option("--seeds", seeds, "training seeds");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const auto cfg = o.config_from_flags();
      const auto dir = o.out_dir() / "data";
      save_dataset(generate_synthetic(cfg.data), dir);
      std::printf("%zu items written to %s\n", cfg.data.num_items, dir.string().c_str());
      return 0;
    }
    if (tr->parsed()) {
      const auto cfg = o.config_from_flags();
      const auto data = o.dataset(cfg);
      const auto out = o.out_dir();
      return cfg.precision == Precision::F64 ? train_as<double>(cfg, data, out) : train_as<float>(cfg, data, out);
    }
    if (ev->parsed()) {
      const auto m = evaluate_checkpoint(checkpoint, o, o.out_dir(), std::nullopt);
      std::printf("%s\n", m.to_json().c_str());
      return 0;
    }
    if (ex->parsed()) {
      const auto out = o.out_dir();
      const auto m = evaluate_checkpoint(checkpoint, o, out, out / "masks");
      std::printf("%s\nmasks written to %s\n", m.to_json().c_str(), (out / "masks").string().c_str());
      return 0;
    }
    if (ab->parsed()) {
      const auto cfg = o.config_from_flags();
      const auto data = o.dataset(cfg);
      const auto out = o.out_dir();
      const auto rows = run_ablation(axis, cfg, data, seeds, [](const AblationRow& r) {
        std::printf("%s=%s seed %llu  %s\n", r.axis.c_str(), r.value.c_str(), static_cast<unsigned long long>(r.seed),
                    r.metrics.to_json().c_str());
        std::fflush(stdout);
      });
      const auto path = out / ("ablation_" + axis + ".csv");
      write_text(path, rows_to_csv(rows));
      std::printf("%zu rows written to %s\n", rows.size(), path.string().c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
