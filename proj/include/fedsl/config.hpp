#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

#include <json.hpp>

#include "fedsl/corpus.hpp"
#include "fedsl/decoder.hpp"
#include "fedsl/optimizer.hpp"
#include "fedsl/transducer.hpp"
#include "fedsl/weaksup.hpp"

namespace fedsl {

enum class WeakMode {
  kOff,
  kExpectedSemantic,
  kExpectedSemanticPlusWer,
  kReinforceSemantic,
  kReinforceBinary,
};

std::string_view to_string(WeakMode mode);
WeakMode parse_weak_mode(std::string_view name);

struct FederationConfig {
  int rounds = 300;
  int devices_per_round = 20;
  int local_steps = 1;
  int batch_size = 8;
  double local_lr = 0.05;
  OptimizerKind server_optimizer = OptimizerKind::kAdam;
  double server_lr = 0.001;
  bool rehearsal = false;
  /// Pseudo-devices per sampled device.
  double rehearsal_ratio = 0.1;
  int checkpoint_every = 0;  // 0 = final checkpoints only

  int pseudo_devices() const;
};

struct EmaConfig {
  bool enabled = true;  // false keeps the teacher frozen at the initial model
  double rate = 0.8;
  int update_every = 10;
};

struct FilterConfig {
  double low = 0.05;
  double high = 0.95;
  ConfidenceMeasure measure = ConfidenceMeasure::kPosterior;
};

struct WeakConfig {
  WeakMode mode = WeakMode::kOff;
  double sigma = 0.0;
  bool served_only = false;
  ReinforceLogProb log_prob = ReinforceLogProb::kNormalized;
  double weight = 1.0;
};

struct EvalConfig {
  int every = 10;
  int beam = 4;
  double divergence_threshold = 0.2;
  int divergence_patience = 3;
  bool abort_on_divergence = false;
  double forgetting_threshold = 0.05;
};

struct PretrainConfig {
  int epochs = 10;
  int batch_size = 16;
  double lr = 0.003;
  double target_wer = 0.0;  // stop early once reached; 0 trains every epoch
  std::uint64_t init_seed = 7;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  ModelDims model;
  CorpusConfig corpus;
  FederationConfig federation;
  EmaConfig ema;
  FilterConfig filter;
  DecodeOptions decoder;
  WeakConfig weak;
  bool self_label = true;
  AugmentConfig augment{2, 0.1};
  EvalConfig eval;
  PretrainConfig pretrain;

  /// Cross-field checks; throws ConfigError naming the field.
  void validate() const;
};

nlohmann::json to_json(const CorpusConfig& config);
CorpusConfig corpus_config_from_json(const nlohmann::json& j);

nlohmann::json to_json(const ExperimentConfig& config);
/// Strict: unknown fields and type mismatches raise ConfigError naming the
/// field path. `seed` is required; everything else has a default.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// FNV-1a over the canonical JSON dump.
std::uint64_t config_hash(const ExperimentConfig& config);
std::string hex64(std::uint64_t value);

}  // namespace fedsl
