#include "fedsl/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "fedsl/config.hpp"
#include "fedsl/errors.hpp"

namespace fedsl {

namespace {

using Json = nlohmann::json;

const char* const kBaseWords[] = {
    "play",    "by",      "on",      "in",     "the",       "turn",   "off",    "lights",
    "call",    "what",    "is",      "weather", "set",      "volume", "to",     "up",
    "down",    "hello",   "yesterday", "imagine", "beyond", "adele",  "queen",  "main",
    "speaker", "kitchen", "bedroom", "mom",    "dad",       "paris"};
const char* const kDeltaWords[] = {"halo",   "thunder", "beyonce", "drake", "garage",
                                   "anna",   "tokyo",   "remind",  "me",    "timer"};
const std::pair<const char*, const char*> kPartners[] = {
    {"halo", "hello"}, {"beyonce", "beyond"}, {"drake", "queen"},
    {"tokyo", "paris"}, {"anna", "dad"},      {"garage", "bedroom"}};

struct SlotVocab {
  std::vector<std::string> base;
  std::vector<std::string> delta;
};

const std::map<std::string, SlotVocab>& slot_vocab() {
  static const std::map<std::string, SlotVocab> v = {
      {"song", {{"hello", "yesterday", "imagine"}, {"halo", "thunder"}}},
      {"artist", {{"beyond", "adele", "queen"}, {"beyonce", "drake"}}},
      {"device", {{"main speaker", "kitchen speaker", "bedroom speaker"}, {}}},
      {"room", {{"kitchen", "bedroom"}, {"garage"}}},
      {"contact", {{"mom", "dad"}, {"anna"}}},
      {"city", {{"paris"}, {"tokyo"}}},
      {"direction", {{"up", "down"}, {}}},
      {"switch", {{"on", "off"}, {}}},
  };
  return v;
}

class Builder {
 public:
  Builder(const Vocabulary& vocab, Rng& rng) : vocab_(vocab), rng_(rng) {}

  void words(std::string_view text) {
    for (int t : vocab_.encode(text)) utt_.tokens.push_back(t);
  }
  void slot(const std::string& type, const std::string& value) {
    TokenSequence toks = vocab_.encode(value);
    utt_.tokens.insert(utt_.tokens.end(), toks.begin(), toks.end());
    utt_.slots.push_back({type, std::move(toks)});
  }
  bool chance(double p) { return std::bernoulli_distribution(p)(rng_); }
  template <class T>
  const T& pick(const std::vector<T>& xs) {
    return xs[std::uniform_int_distribution<std::size_t>(0, xs.size() - 1)(rng_)];
  }
  // Base value, or a delta value with probability `delta_rate`.
  std::string fill(const std::string& type, double delta_rate) {
    const SlotVocab& v = slot_vocab().at(type);
    if (!v.delta.empty() && chance(delta_rate)) return pick(v.delta);
    return pick(v.base);
  }
  std::string fill_delta(const std::string& type) { return pick(slot_vocab().at(type).delta); }

  Utterance take() { return std::move(utt_); }
  Utterance& utt() { return utt_; }

 private:
  const Vocabulary& vocab_;
  Rng& rng_;
  Utterance utt_;
};

Utterance base_utterance(const Vocabulary& vocab, double rate, Rng& rng) {
  Builder b(vocab, rng);
  const int which = std::uniform_int_distribution<int>(0, 4)(rng);
  switch (which) {
    case 0:
      b.utt().template_name = "play";
      b.words("play");
      b.slot("song", b.fill("song", rate));
      if (b.chance(0.6)) {
        b.words("by");
        b.slot("artist", b.fill("artist", rate));
      }
      if (b.chance(0.4)) {
        b.words("on");
        b.slot("device", b.fill("device", rate));
      }
      break;
    case 1:
      b.utt().template_name = "lights";
      b.words("turn");
      b.slot("switch", b.fill("switch", rate));
      b.words("the lights in the");
      b.slot("room", b.fill("room", rate));
      break;
    case 2:
      b.utt().template_name = "call";
      b.words("call");
      b.slot("contact", b.fill("contact", rate));
      if (b.chance(0.4)) {
        b.words("on");
        b.slot("device", b.fill("device", rate));
      }
      break;
    case 3:
      b.utt().template_name = "weather";
      b.words("what is the weather in");
      b.slot("city", b.fill("city", rate));
      break;
    default:
      b.utt().template_name = "volume";
      b.words("set volume");
      b.slot("direction", b.fill("direction", rate));
      b.words("on");
      b.slot("device", b.fill("device", rate));
      break;
  }
  Utterance u = b.take();
  u.tag = DistributionTag::kBase;
  return u;
}

Utterance delta_utterance(const Vocabulary& vocab, Rng& rng) {
  Builder b(vocab, rng);
  const int which = std::uniform_int_distribution<int>(0, 5)(rng);
  switch (which) {
    case 0: {
      b.utt().template_name = "play_new";
      const bool new_song = b.chance(0.7);
      const bool new_artist = !new_song || b.chance(0.7);
      b.words("play");
      b.slot("song", new_song ? b.fill_delta("song") : b.fill("song", 0.0));
      b.words("by");
      b.slot("artist", new_artist ? b.fill_delta("artist") : b.fill("artist", 0.0));
      break;
    }
    case 1:
      b.utt().template_name = "remind";
      b.words("remind me to call");
      b.slot("contact", b.fill("contact", 0.5));
      break;
    case 2:
      b.utt().template_name = "timer";
      b.words("set timer in the");
      b.slot("room", b.fill("room", 0.3));
      break;
    case 3:
      b.utt().template_name = "weather_new";
      b.words("what is the weather in");
      b.slot("city", b.fill_delta("city"));
      break;
    case 4:
      b.utt().template_name = "lights_new";
      b.words("turn");
      b.slot("switch", b.fill("switch", 0.0));
      b.words("the lights in the");
      b.slot("room", b.fill_delta("room"));
      break;
    default:
      b.utt().template_name = "call_new";
      b.words("call");
      b.slot("contact", b.fill_delta("contact"));
      if (b.chance(0.4)) {
        b.words("on");
        b.slot("device", b.fill("device", 0.0));
      }
      break;
  }
  Utterance u = b.take();
  u.tag = DistributionTag::kDelta;
  return u;
}

TokenSequence alternate_transcript(const Vocabulary& vocab, const TokenSequence& tokens, double error,
                                   Rng& rng) {
  TokenSequence out = tokens;
  std::bernoulli_distribution flip(error);
  for (int& t : out) {
    const int p = vocab.confusable_partner(t);
    if (p >= 0 && flip(rng)) t = p;
  }
  return out;
}

class UtteranceFactory {
 public:
  UtteranceFactory(const CorpusConfig& c) : config_(c), vocab_(Vocabulary::standard()) {}

  Utterance make(bool delta, Rng& rng) {
    Utterance u;
    if (delta) {
      u = delta_utterance(vocab_, rng);
    } else if (std::bernoulli_distribution(config_.base_delta_template_rate)(rng)) {
      u = delta_utterance(vocab_, rng);
      u.tag = DistributionTag::kBase;
    } else {
      u = base_utterance(vocab_, config_.base_delta_slot_rate, rng);
    }
    u.id = next_id_++;
    u.alt_transcript = alternate_transcript(vocab_, u.tokens, config_.alt_transcript_error, rng);
    u.feature_seed = mix_seed(config_.seed, u.id, 0xFEA7u);
    return u;
  }

  std::vector<Utterance> split(std::size_t n, double delta_fraction, std::uint64_t stream) {
    Rng rng(mix_seed(config_.seed, stream));
    std::bernoulli_distribution is_delta(delta_fraction);
    std::vector<Utterance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) out.push_back(make(is_delta(rng), rng));
    return out;
  }

 private:
  const CorpusConfig& config_;
  const Vocabulary& vocab_;
  std::uint64_t next_id_ = 0;
};

Json utterance_json(const Utterance& u, std::string_view split, int device) {
  Json slots = Json::array();
  for (const Slot& s : u.slots) slots.push_back({{"type", s.type}, {"tokens", s.tokens}});
  return {{"split", split},
          {"device", device},
          {"id", u.id},
          {"tokens", u.tokens},
          {"slots", slots},
          {"alt_transcript", u.alt_transcript},
          {"tag", to_string(u.tag)},
          {"template", u.template_name},
          {"feature_seed", u.feature_seed}};
}

Utterance utterance_from_json(const Json& j) {
  Utterance u;
  u.id = j.at("id").get<std::uint64_t>();
  u.tokens = j.at("tokens").get<TokenSequence>();
  for (const Json& s : j.at("slots")) u.slots.push_back({s.at("type").get<std::string>(), s.at("tokens").get<TokenSequence>()});
  u.alt_transcript = j.at("alt_transcript").get<TokenSequence>();
  u.tag = parse_distribution_tag(j.at("tag").get<std::string>());
  u.template_name = j.at("template").get<std::string>();
  u.feature_seed = j.at("feature_seed").get<std::uint64_t>();
  return u;
}

}  // namespace

std::string_view to_string(DistributionTag tag) { return tag == DistributionTag::kBase ? "base" : "delta"; }

DistributionTag parse_distribution_tag(std::string_view name) {
  if (name == "base") return DistributionTag::kBase;
  if (name == "delta") return DistributionTag::kDelta;
  throw std::invalid_argument("unknown distribution tag '" + std::string(name) + "'");
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ull * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) { return mix_seed(mix_seed(a, b), c); }

const Vocabulary& Vocabulary::standard() {
  static const Vocabulary v;
  return v;
}

Vocabulary::Vocabulary() {
  for (const char* w : kBaseWords) words_.emplace_back(w);
  base_size_ = static_cast<int>(words_.size());
  for (const char* w : kDeltaWords) words_.emplace_back(w);
  partner_.assign(words_.size(), -1);
  for (auto [d, b] : kPartners) {
    partner_[static_cast<std::size_t>(id(d))] = id(b);
    partner_[static_cast<std::size_t>(id(b))] = id(d);
  }
}

int Vocabulary::id(std::string_view word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw std::invalid_argument("word '" + std::string(word) + "' not in vocabulary");
  return static_cast<int>(it - words_.begin());
}

TokenSequence Vocabulary::encode(std::string_view sentence) const {
  TokenSequence out;
  std::istringstream in{std::string(sentence)};
  std::string w;
  while (in >> w) {
    std::transform(w.begin(), w.end(), w.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    out.push_back(id(w));
  }
  return out;
}

std::string Vocabulary::decode(const TokenSequence& tokens) const {
  std::string out;
  for (int t : tokens) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

int Vocabulary::confusable_partner(int token) const { return partner_.at(static_cast<std::size_t>(token)); }

void CorpusConfig::validate() const {
  auto require = [](bool ok, const char* field, const std::string& why) {
    if (!ok) throw ConfigError(std::string("corpus.") + field + ": " + why);
  };
  require(feature_dim >= 1, "feature_dim", "must be >= 1");
  require(devices >= 1, "devices", "must be >= 1");
  require(utterances_per_device >= 1, "utterances_per_device", "must be >= 1");
  require(pretrain_size >= 1, "pretrain_size", "must be >= 1");
  require(eval_size >= 1, "eval_size", "must be >= 1");
  require(delta_fraction >= 0.0 && delta_fraction <= 1.0, "delta_fraction", "must lie in [0, 1]");
  require(base_delta_slot_rate >= 0.0 && base_delta_slot_rate <= 1.0, "base_delta_slot_rate", "must lie in [0, 1]");
  require(base_delta_template_rate >= 0.0 && base_delta_template_rate <= 1.0, "base_delta_template_rate",
          "must lie in [0, 1]");
  require(alt_transcript_error >= 0.0 && alt_transcript_error <= 1.0, "alt_transcript_error", "must lie in [0, 1]");
  require(noise_level >= 0.0, "noise_level", "must be >= 0");
  require(prototype_norm > 0.0, "prototype_norm", "must be > 0");
  require(confusion_distance >= 0.0, "confusion_distance", "must be >= 0");
  require(min_frames_per_token >= 1, "min_frames_per_token", "must be >= 1");
  require(max_frames_per_token >= min_frames_per_token, "max_frames_per_token", "must be >= min_frames_per_token");
}

FeatureSynthesizer::FeatureSynthesizer(const CorpusConfig& config)
    : noise_level_(config.noise_level),
      min_frames_(config.min_frames_per_token),
      max_frames_(config.max_frames_per_token) {
  config.validate();
  const Vocabulary& vocab = Vocabulary::standard();
  Rng rng(mix_seed(config.seed, 0x9807u));
  std::normal_distribution<double> normal(0.0, 1.0);
  auto direction = [&] {
    Eigen::VectorXd v(config.feature_dim);
    for (Eigen::Index j = 0; j < v.size(); ++j) v[j] = normal(rng);
    return Eigen::VectorXd(v.normalized());
  };
  prototypes_.resize(vocab.size(), config.feature_dim);
  for (int t = 0; t < vocab.size(); ++t) prototypes_.row(t) = config.prototype_norm * direction().transpose();
  for (int t = vocab.base_size(); t < vocab.size(); ++t) {
    const int p = vocab.confusable_partner(t);
    if (p >= 0) prototypes_.row(t) = prototypes_.row(p) + config.confusion_distance * direction().transpose();
  }
}

FeatureSequence FeatureSynthesizer::synth(const TokenSequence& tokens, double noise_level, Rng& rng) const {
  if (tokens.empty()) throw std::invalid_argument("synth: empty token sequence");
  std::uniform_int_distribution<int> frames(min_frames_, max_frames_);
  std::vector<int> counts;
  counts.reserve(tokens.size());
  int total = 0;
  for (int t : tokens) {
    if (t < 0 || t >= prototypes_.rows()) throw std::invalid_argument("synth: token id out of range");
    counts.push_back(frames(rng));
    total += counts.back();
  }
  FeatureSequence x(total, prototypes_.cols());
  std::normal_distribution<double> normal(0.0, 1.0);
  int row = 0;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    for (int k = 0; k < counts[i]; ++k, ++row) {
      x.row(row) = prototypes_.row(tokens[i]);
      if (noise_level > 0.0) {
        for (Eigen::Index j = 0; j < x.cols(); ++j) x(row, j) += noise_level * normal(rng);
      }
    }
  }
  return x;
}

FeatureSequence FeatureSynthesizer::features_of(const Utterance& utt) const {
  Rng rng(utt.feature_seed);
  return synth(utt.tokens, noise_level_, rng);
}

Corpus generate_corpus(const CorpusConfig& config) {
  config.validate();
  UtteranceFactory f(config);
  Corpus c;
  c.config = config;
  c.pretrain = f.split(static_cast<std::size_t>(config.pretrain_size), 0.0, 1);
  c.device_streams.reserve(static_cast<std::size_t>(config.devices));
  for (int d = 0; d < config.devices; ++d) {
    c.device_streams.push_back(f.split(static_cast<std::size_t>(config.utterances_per_device),
                                       config.delta_fraction, mix_seed(2, static_cast<std::uint64_t>(d))));
  }
  const auto eval_n = static_cast<std::size_t>(config.eval_size);
  c.eval_general_old = f.split(eval_n, 0.0, 3);
  c.eval_general_new = f.split(eval_n, config.delta_fraction, 4);
  c.eval_delta = f.split(eval_n, 1.0, 5);
  return c;
}

void export_corpus(const Corpus& corpus, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write corpus file " + file.string());
  out << Json{{"type", "header"}, {"format", "fedsl-corpus"}, {"version", 1}, {"config", to_json(corpus.config)}}.dump()
      << '\n';
  auto write = [&](const std::vector<Utterance>& utts, std::string_view split, int device) {
    for (const Utterance& u : utts) out << utterance_json(u, split, device).dump() << '\n';
  };
  write(corpus.pretrain, "pretrain", -1);
  for (std::size_t d = 0; d < corpus.device_streams.size(); ++d) write(corpus.device_streams[d], "device", static_cast<int>(d));
  write(corpus.eval_general_old, "general_old", -1);
  write(corpus.eval_general_new, "general_new", -1);
  write(corpus.eval_delta, "delta", -1);
  if (!out) throw IoError("failed writing corpus file " + file.string());
}

Corpus import_corpus(const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("cannot read corpus file " + file.string());
  Corpus c;
  std::string line;
  std::size_t line_no = 0;
  try {
    if (!std::getline(in, line)) throw IoError("corpus file " + file.string() + " is empty");
    ++line_no;
    const Json header = Json::parse(line);
    if (header.value("format", "") != "fedsl-corpus") throw IoError("not a corpus file: " + file.string());
    c.config = corpus_config_from_json(header.at("config"));
    c.device_streams.resize(static_cast<std::size_t>(c.config.devices));
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const Json j = Json::parse(line);
      const std::string split = j.at("split").get<std::string>();
      Utterance u = utterance_from_json(j);
      if (split == "pretrain") c.pretrain.push_back(std::move(u));
      else if (split == "general_old") c.eval_general_old.push_back(std::move(u));
      else if (split == "general_new") c.eval_general_new.push_back(std::move(u));
      else if (split == "delta") c.eval_delta.push_back(std::move(u));
      else if (split == "device") c.device_streams.at(j.at("device").get<std::size_t>()).push_back(std::move(u));
      else throw IoError("unknown split '" + split + "'");
    }
  } catch (const Json::exception& e) {
    throw IoError(file.string() + ":" + std::to_string(line_no) + ": " + e.what());
  } catch (const std::out_of_range& e) {
    throw IoError(file.string() + ":" + std::to_string(line_no) + ": device index out of range");
  }
  return c;
}

FeatureSequence augment(const FeatureSequence& features, const AugmentConfig& config, Rng& rng) {
  if (config.max_mask < 0 || config.noise < 0.0) throw std::invalid_argument("augment: negative setting");
  FeatureSequence out = features;
  const auto frames = static_cast<int>(out.rows());
  if (config.max_mask > 0 && frames > 0) {
    const int len = std::uniform_int_distribution<int>(0, std::min(config.max_mask, frames))(rng);
    const int start = std::uniform_int_distribution<int>(0, frames - len)(rng);
    out.middleRows(start, len).setZero();
  }
  if (config.noise > 0.0) {
    std::normal_distribution<double> normal(0.0, config.noise);
    for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] += normal(rng);
  }
  return out;
}

std::vector<int> probe_frames(const FeatureSynthesizer& synth, const FeatureSequence& features) {
  std::vector<int> labels(static_cast<std::size_t>(features.rows()));
  for (Eigen::Index r = 0; r < features.rows(); ++r) {
    Eigen::Index best = 0;
    (synth.prototypes().rowwise() - features.row(r)).rowwise().squaredNorm().minCoeff(&best);
    labels[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return labels;
}

TokenSequence probe_tokens(const FeatureSynthesizer& synth, const FeatureSequence& features) {
  TokenSequence out;
  for (int l : probe_frames(synth, features)) {
    if (out.empty() || out.back() != l) out.push_back(l);
  }
  return out;
}

std::vector<std::pair<std::string, std::size_t>> count_ngrams(const std::vector<Utterance>& utts, int n) {
  if (n < 1) throw std::invalid_argument("count_ngrams: n must be >= 1");
  std::map<std::string, std::size_t> counts;
  for (const Utterance& u : utts) {
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= u.tokens.size(); ++i) {
      std::string key;
      for (int k = 0; k < n; ++k) {
        if (k > 0) key += ' ';
        key += std::to_string(u.tokens[i + static_cast<std::size_t>(k)]);
      }
      ++counts[key];
    }
  }
  return {counts.begin(), counts.end()};
}

DeviceStream::DeviceStream(int device_id, const std::vector<Utterance>& utterances,
                           const FeatureSynthesizer& synth)
    : device_id_(device_id), utterances_(&utterances), synth_(&synth) {}

std::vector<DeviceSample> DeviceStream::next_batch(std::size_t count, bool with_transcript) {
  std::vector<DeviceSample> out;
  while (out.size() < count && cursor_ < utterances_->size()) {
    const Utterance& u = (*utterances_)[cursor_++];
    DeviceSample s;
    s.id = u.id;
    s.features = synth_->features_of(u);
    s.weak.slots = u.slots;
    if (with_transcript) s.weak.transcript = u.alt_transcript;
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fedsl
