#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include "refseg/inference.hpp"
#include "refseg/model_config.hpp"
#include "refseg/synthetic.hpp"

namespace refseg {

struct OptimizerConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
};

struct RunConfig {
  ModelConfig model;
  SyntheticSpec data;
  OptimizerConfig optim;
  std::size_t batch_size = 32;
  std::size_t epochs = 50;
  std::size_t eval_every = 1;  // epochs between held-out evaluations; 0 evaluates only at the end
  double lambda_recon = 1.0;
  double temperature = 1.0;
  double tau = kDefaultTau;
  InferenceScheme scheme = InferenceScheme::Compose;
  Precision precision = Precision::F32;
  std::uint64_t seed = 0;
  std::uint64_t eval_seed = 7;

  void validate() const;
  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
};

/// The synthetic preset used by the acceptance runs: 24x24 grid, D = 64,
/// six groups, entity slots with K_g = 6 and K_s = 2.
RunConfig synthetic_preset();

/// Flat "section.key" -> raw value view of a TOML-style file. Supports
/// [section] headers, key = value lines, quoted strings, numbers, booleans
/// and # comments.
std::map<std::string, std::string> parse_toml(const std::string& text);

/// Applies parsed keys onto cfg; unknown keys are a ConfigError.
void apply_settings(RunConfig& cfg, const std::map<std::string, std::string>& settings);
RunConfig load_config(const std::filesystem::path& path, const RunConfig& base);

}  // namespace refseg
