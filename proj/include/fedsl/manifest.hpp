#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>

#include <json.hpp>

#include "fedsl/config.hpp"

namespace fedsl {

/// Everything needed to rerun a stage bit for bit: the resolved config, the
/// inputs it read and the files it wrote.
struct RunManifest {
  std::string kind;  // "corpus", "pretrain" or "run"
  std::string run_id;
  ExperimentConfig config;
  std::optional<std::filesystem::path> corpus_file;
  std::optional<std::filesystem::path> initial_checkpoint;
  std::optional<std::string> initial_digest;
  std::map<std::string, std::filesystem::path> outputs;

  std::string config_hash() const { return hex64(fedsl::config_hash(config)); }
  std::uint64_t corpus_seed() const { return config.corpus.seed; }
};

nlohmann::json to_json(const RunManifest& manifest);
RunManifest manifest_from_json(const nlohmann::json& j);

void write_manifest(const std::filesystem::path& file, const RunManifest& manifest);
RunManifest read_manifest(const std::filesystem::path& file);

/// FNV-1a over a file's bytes, as 16 hex digits.
std::string file_digest(const std::filesystem::path& file);

/// 12 hex digits derived from the stage kind, config hash and input digest.
std::string make_run_id(const std::string& kind, const ExperimentConfig& config,
                        const std::optional<std::string>& input_digest);

}  // namespace fedsl
