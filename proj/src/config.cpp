#include "fedsl/config.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include "fedsl/errors.hpp"

namespace fedsl {

namespace {

using Json = nlohmann::json;

// Reads fields of one JSON object and remembers which it saw.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(where() + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    read(*it, out, field(key));
  }

  template <class T>
  void require(const char* key, T& out) {
    if (!j_.contains(key)) throw ConfigError("missing required field '" + field(key) + "'");
    get(key, out);
  }

  Reader section(const char* key) {
    seen_.insert(key);
    static const Json empty = Json::object();
    auto it = j_.find(key);
    return Reader(it == j_.end() ? empty : *it, field(key));
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) throw ConfigError("unknown field '" + field(it.key()) + "'");
    }
  }

 private:
  std::string where() const { return path_.empty() ? "config" : path_; }
  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  static void read(const Json& v, bool& out, const std::string& f) {
    if (!v.is_boolean()) throw ConfigError("field '" + f + "' must be a boolean");
    out = v.get<bool>();
  }
  static void read(const Json& v, int& out, const std::string& f) {
    if (!v.is_number_integer()) throw ConfigError("field '" + f + "' must be an integer");
    out = v.get<int>();
  }
  static void read(const Json& v, std::uint64_t& out, const std::string& f) {
    if (!v.is_number_unsigned() && !(v.is_number_integer() && v.get<std::int64_t>() >= 0)) {
      throw ConfigError("field '" + f + "' must be a non-negative integer");
    }
    out = v.get<std::uint64_t>();
  }
  static void read(const Json& v, double& out, const std::string& f) {
    if (!v.is_number()) throw ConfigError("field '" + f + "' must be a number");
    out = v.get<double>();
  }
  static void read(const Json& v, std::string& out, const std::string& f) {
    if (!v.is_string()) throw ConfigError("field '" + f + "' must be a string");
    out = v.get<std::string>();
  }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <class Enum, class Parse>
void get_enum(Reader& r, const char* key, Enum& out, Parse parse, const std::string& path) {
  std::string name;
  r.get(key, name);
  if (name.empty()) return;
  try {
    out = parse(name);
  } catch (const std::invalid_argument& e) {
    throw ConfigError("field '" + path + "." + key + "': " + e.what());
  }
}

void read_corpus(Reader r, CorpusConfig& c) {
  r.get("seed", c.seed);
  r.get("feature_dim", c.feature_dim);
  r.get("devices", c.devices);
  r.get("utterances_per_device", c.utterances_per_device);
  r.get("pretrain_size", c.pretrain_size);
  r.get("eval_size", c.eval_size);
  r.get("delta_fraction", c.delta_fraction);
  r.get("base_delta_slot_rate", c.base_delta_slot_rate);
  r.get("base_delta_template_rate", c.base_delta_template_rate);
  r.get("noise_level", c.noise_level);
  r.get("prototype_norm", c.prototype_norm);
  r.get("confusion_distance", c.confusion_distance);
  r.get("alt_transcript_error", c.alt_transcript_error);
  r.get("min_frames_per_token", c.min_frames_per_token);
  r.get("max_frames_per_token", c.max_frames_per_token);
  r.finish();
}

void check(bool ok, const std::string& field, const std::string& why) {
  if (!ok) throw ConfigError("field '" + field + "' " + why);
}

}  // namespace

std::string_view to_string(WeakMode mode) {
  switch (mode) {
    case WeakMode::kOff: return "off";
    case WeakMode::kExpectedSemantic: return "expected_semantic";
    case WeakMode::kExpectedSemanticPlusWer: return "expected_semantic_plus_wer";
    case WeakMode::kReinforceSemantic: return "reinforce_semantic";
    case WeakMode::kReinforceBinary: return "reinforce_binary";
  }
  return "unknown";
}

WeakMode parse_weak_mode(std::string_view name) {
  for (WeakMode m : {WeakMode::kOff, WeakMode::kExpectedSemantic, WeakMode::kExpectedSemanticPlusWer,
                     WeakMode::kReinforceSemantic, WeakMode::kReinforceBinary}) {
    if (name == to_string(m)) return m;
  }
  throw std::invalid_argument("unknown weak supervision mode '" + std::string(name) + "'");
}

int FederationConfig::pseudo_devices() const {
  return rehearsal ? static_cast<int>(std::lround(devices_per_round * rehearsal_ratio)) : 0;
}

void ExperimentConfig::validate() const {
  corpus.validate();
  check(model.feature_dim == corpus.feature_dim, "model.feature_dim", "must equal corpus.feature_dim");
  check(model.vocab_size == Vocabulary::standard().size(), "model.vocab_size",
        "must equal the vocabulary size " + std::to_string(Vocabulary::standard().size()));
  check(model.encoder_hidden >= 1 && model.embedding_dim >= 1 && model.prediction_hidden >= 1 &&
            model.joint_hidden >= 1,
        "model", "dimensions must be >= 1");
  const FederationConfig& f = federation;
  check(f.rounds >= 0, "federation.rounds", "must be >= 0");
  check(f.devices_per_round >= 1 && f.devices_per_round <= corpus.devices, "federation.devices_per_round",
        "must lie in [1, corpus.devices]");
  check(f.local_steps >= 0, "federation.local_steps", "must be >= 0");
  check(f.batch_size >= 1, "federation.batch_size", "must be >= 1");
  check(f.local_lr > 0.0, "federation.local_lr", "must be > 0");
  check(f.server_lr > 0.0, "federation.server_lr", "must be > 0");
  check(f.rehearsal_ratio >= 0.0, "federation.rehearsal_ratio", "must be >= 0");
  check(f.checkpoint_every >= 0, "federation.checkpoint_every", "must be >= 0");
  check(ema.rate > 0.0 && ema.rate < 1.0, "ema.rate", "must lie in (0, 1)");
  check(ema.update_every >= 1, "ema.update_every", "must be >= 1");
  check(filter.low >= 0.0 && filter.low < filter.high && filter.high <= 1.0, "filter",
        "requires 0 <= low < high <= 1");
  check(decoder.nbest >= 1 && decoder.beam >= decoder.nbest, "decoder", "requires beam >= nbest >= 1");
  check(decoder.max_symbols_per_frame >= 1, "decoder.max_symbols_per_frame", "must be >= 1");
  check(weak.sigma >= 0.0, "weak.sigma", "must be >= 0");
  check(weak.sigma == 0.0 || weak.mode == WeakMode::kReinforceBinary, "weak.sigma",
        "noise applies only to mode reinforce_binary");
  check(weak.weight >= 0.0, "weak.weight", "must be >= 0");
  check(self_label || weak.mode != WeakMode::kOff || f.rehearsal || f.rounds == 0, "self_label",
        "is off and no other loss is enabled");
  check(augment.max_mask >= 0, "augment.max_mask", "must be >= 0");
  check(augment.noise >= 0.0, "augment.noise", "must be >= 0");
  check(eval.every >= 1, "eval.every", "must be >= 1");
  check(eval.beam >= 1, "eval.beam", "must be >= 1");
  check(eval.divergence_patience >= 1, "eval.divergence_patience", "must be >= 1");
  check(eval.divergence_threshold > 0.0, "eval.divergence_threshold", "must be > 0");
  check(eval.forgetting_threshold >= 0.0, "eval.forgetting_threshold", "must be >= 0");
  check(pretrain.epochs >= 0, "pretrain.epochs", "must be >= 0");
  check(pretrain.batch_size >= 1, "pretrain.batch_size", "must be >= 1");
  check(pretrain.lr > 0.0, "pretrain.lr", "must be > 0");
}

Json to_json(const CorpusConfig& c) {
  return {{"seed", c.seed},
          {"feature_dim", c.feature_dim},
          {"devices", c.devices},
          {"utterances_per_device", c.utterances_per_device},
          {"pretrain_size", c.pretrain_size},
          {"eval_size", c.eval_size},
          {"delta_fraction", c.delta_fraction},
          {"base_delta_slot_rate", c.base_delta_slot_rate},
          {"base_delta_template_rate", c.base_delta_template_rate},
          {"noise_level", c.noise_level},
          {"prototype_norm", c.prototype_norm},
          {"confusion_distance", c.confusion_distance},
          {"alt_transcript_error", c.alt_transcript_error},
          {"min_frames_per_token", c.min_frames_per_token},
          {"max_frames_per_token", c.max_frames_per_token}};
}

CorpusConfig corpus_config_from_json(const Json& j) {
  CorpusConfig c;
  read_corpus(Reader(j, "corpus"), c);
  c.validate();
  return c;
}

Json to_json(const ExperimentConfig& c) {
  const ModelDims& m = c.model;
  const FederationConfig& f = c.federation;
  return {
      {"seed", c.seed},
      {"model",
       {{"feature_dim", m.feature_dim},
        {"encoder_hidden", m.encoder_hidden},
        {"embedding_dim", m.embedding_dim},
        {"prediction_hidden", m.prediction_hidden},
        {"joint_hidden", m.joint_hidden},
        {"vocab_size", m.vocab_size}}},
      {"corpus", to_json(c.corpus)},
      {"federation",
       {{"rounds", f.rounds},
        {"devices_per_round", f.devices_per_round},
        {"local_steps", f.local_steps},
        {"batch_size", f.batch_size},
        {"local_lr", f.local_lr},
        {"server_optimizer", to_string(f.server_optimizer)},
        {"server_lr", f.server_lr},
        {"rehearsal", f.rehearsal},
        {"rehearsal_ratio", f.rehearsal_ratio},
        {"checkpoint_every", f.checkpoint_every}}},
      {"ema", {{"enabled", c.ema.enabled}, {"rate", c.ema.rate}, {"update_every", c.ema.update_every}}},
      {"filter",
       {{"low", c.filter.low},
        {"high", c.filter.high},
        {"measure", c.filter.measure == ConfidenceMeasure::kPosterior ? "posterior" : "per_token"}}},
      {"decoder",
       {{"beam", c.decoder.beam}, {"nbest", c.decoder.nbest}, {"max_symbols_per_frame", c.decoder.max_symbols_per_frame}}},
      {"weak",
       {{"mode", to_string(c.weak.mode)},
        {"sigma", c.weak.sigma},
        {"served_only", c.weak.served_only},
        {"log_prob", c.weak.log_prob == ReinforceLogProb::kNormalized ? "normalized" : "raw"},
        {"weight", c.weak.weight}}},
      {"self_label", c.self_label},
      {"augment", {{"max_mask", c.augment.max_mask}, {"noise", c.augment.noise}}},
      {"eval",
       {{"every", c.eval.every},
        {"beam", c.eval.beam},
        {"divergence_threshold", c.eval.divergence_threshold},
        {"divergence_patience", c.eval.divergence_patience},
        {"abort_on_divergence", c.eval.abort_on_divergence},
        {"forgetting_threshold", c.eval.forgetting_threshold}}},
      {"pretrain",
       {{"epochs", c.pretrain.epochs},
        {"batch_size", c.pretrain.batch_size},
        {"lr", c.pretrain.lr},
        {"target_wer", c.pretrain.target_wer},
        {"init_seed", c.pretrain.init_seed}}},
  };
}

ExperimentConfig config_from_json(const Json& j) {
  ExperimentConfig c;
  Reader root(j, "");
  root.require("seed", c.seed);
  {
    Reader r = root.section("model");
    r.get("feature_dim", c.model.feature_dim);
    r.get("encoder_hidden", c.model.encoder_hidden);
    r.get("embedding_dim", c.model.embedding_dim);
    r.get("prediction_hidden", c.model.prediction_hidden);
    r.get("joint_hidden", c.model.joint_hidden);
    r.get("vocab_size", c.model.vocab_size);
    r.finish();
  }
  read_corpus(root.section("corpus"), c.corpus);
  {
    Reader r = root.section("federation");
    FederationConfig& f = c.federation;
    r.get("rounds", f.rounds);
    r.get("devices_per_round", f.devices_per_round);
    r.get("local_steps", f.local_steps);
    r.get("batch_size", f.batch_size);
    r.get("local_lr", f.local_lr);
    get_enum(r, "server_optimizer", f.server_optimizer, parse_optimizer_kind, "federation");
    r.get("server_lr", f.server_lr);
    r.get("rehearsal", f.rehearsal);
    r.get("rehearsal_ratio", f.rehearsal_ratio);
    r.get("checkpoint_every", f.checkpoint_every);
    r.finish();
  }
  {
    Reader r = root.section("ema");
    r.get("enabled", c.ema.enabled);
    r.get("rate", c.ema.rate);
    r.get("update_every", c.ema.update_every);
    r.finish();
  }
  {
    Reader r = root.section("filter");
    r.get("low", c.filter.low);
    r.get("high", c.filter.high);
    get_enum(r, "measure", c.filter.measure, parse_confidence_measure, "filter");
    r.finish();
  }
  {
    Reader r = root.section("decoder");
    r.get("beam", c.decoder.beam);
    r.get("nbest", c.decoder.nbest);
    r.get("max_symbols_per_frame", c.decoder.max_symbols_per_frame);
    r.finish();
  }
  {
    Reader r = root.section("weak");
    get_enum(r, "mode", c.weak.mode, parse_weak_mode, "weak");
    r.get("sigma", c.weak.sigma);
    r.get("served_only", c.weak.served_only);
    get_enum(r, "log_prob", c.weak.log_prob, parse_reinforce_log_prob, "weak");
    r.get("weight", c.weak.weight);
    r.finish();
  }
  root.get("self_label", c.self_label);
  {
    Reader r = root.section("augment");
    r.get("max_mask", c.augment.max_mask);
    r.get("noise", c.augment.noise);
    r.finish();
  }
  {
    Reader r = root.section("eval");
    r.get("every", c.eval.every);
    r.get("beam", c.eval.beam);
    r.get("divergence_threshold", c.eval.divergence_threshold);
    r.get("divergence_patience", c.eval.divergence_patience);
    r.get("abort_on_divergence", c.eval.abort_on_divergence);
    r.get("forgetting_threshold", c.eval.forgetting_threshold);
    r.finish();
  }
  {
    Reader r = root.section("pretrain");
    r.get("epochs", c.pretrain.epochs);
    r.get("batch_size", c.pretrain.batch_size);
    r.get("lr", c.pretrain.lr);
    r.get("target_wer", c.pretrain.target_wer);
    r.get("init_seed", c.pretrain.init_seed);
    r.finish();
  }
  root.finish();
  c.validate();
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config " + path.string());
  Json j;
  try {
    j = Json::parse(in);
  } catch (const Json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return config_from_json(j);
}

std::uint64_t config_hash(const ExperimentConfig& config) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char ch : to_json(config).dump()) {
    h ^= ch;
    h *= 0x100000001b3ull;
  }
  return h;
}

std::string hex64(std::uint64_t value) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
  return buf;
}

}  // namespace fedsl
