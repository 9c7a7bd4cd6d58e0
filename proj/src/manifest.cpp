#include "fedsl/manifest.hpp"

#include <fstream>
#include <iterator>

#include "fedsl/errors.hpp"

namespace fedsl {

namespace {

using Json = nlohmann::json;

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ull;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ull;

std::uint64_t fnv(std::uint64_t h, std::string_view bytes) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

}  // namespace

Json to_json(const RunManifest& m) {
  Json j = {{"format", "fedsl-manifest"},
            {"version", 1},
            {"kind", m.kind},
            {"run_id", m.run_id},
            {"config_hash", m.config_hash()},
            {"corpus_seed", m.corpus_seed()},
            {"config", to_json(m.config)}};
  j["corpus_file"] = m.corpus_file ? Json(m.corpus_file->string()) : Json(nullptr);
  j["initial_checkpoint"] = m.initial_checkpoint ? Json(m.initial_checkpoint->string()) : Json(nullptr);
  j["initial_digest"] = m.initial_digest ? Json(*m.initial_digest) : Json(nullptr);
  Json outputs = Json::object();
  for (const auto& [name, path] : m.outputs) outputs[name] = path.string();
  j["outputs"] = outputs;
  return j;
}

RunManifest manifest_from_json(const Json& j) {
  if (j.value("format", "") != "fedsl-manifest") throw IoError("not a run manifest");
  RunManifest m;
  try {
    m.kind = j.at("kind").get<std::string>();
    m.run_id = j.at("run_id").get<std::string>();
    if (!j.at("corpus_file").is_null()) m.corpus_file = j.at("corpus_file").get<std::string>();
    if (!j.at("initial_checkpoint").is_null()) m.initial_checkpoint = j.at("initial_checkpoint").get<std::string>();
    if (!j.at("initial_digest").is_null()) m.initial_digest = j.at("initial_digest").get<std::string>();
    for (const auto& [name, path] : j.at("outputs").items()) m.outputs[name] = path.get<std::string>();
  } catch (const Json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  m.config = config_from_json(j.at("config"));
  if (j.at("config_hash").get<std::string>() != m.config_hash()) {
    throw ConfigError("manifest config does not match its recorded hash");
  }
  return m;
}

void write_manifest(const std::filesystem::path& file, const RunManifest& manifest) {
  std::ofstream out(file, std::ios::trunc);
  if (!out) throw IoError("cannot write manifest " + file.string());
  out << to_json(manifest).dump(2) << '\n';
  if (!out) throw IoError("failed writing manifest " + file.string());
}

RunManifest read_manifest(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot read manifest " + file.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw IoError(file.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

std::string file_digest(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read " + file.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return hex64(fnv(kFnvOffset, bytes));
}

std::string make_run_id(const std::string& kind, const ExperimentConfig& config,
                        const std::optional<std::string>& input_digest) {
  std::uint64_t h = fnv(kFnvOffset, kind);
  h = fnv(h, hex64(config_hash(config)));
  if (input_digest) h = fnv(h, *input_digest);
  return hex64(h).substr(0, 12);
}

}  // namespace fedsl
