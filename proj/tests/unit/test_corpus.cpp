#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <type_traits>

#include "fedsl/corpus.hpp"
#include "fedsl/errors.hpp"
#include "fedsl/weaksup.hpp"

using namespace fedsl;

namespace {

CorpusConfig small_config() {
  CorpusConfig c;
  c.devices = 6;
  c.utterances_per_device = 40;
  c.pretrain_size = 120;
  c.eval_size = 30;
  return c;
}

bool same(const Utterance& a, const Utterance& b) {
  if (a.slots.size() != b.slots.size()) return false;
  for (std::size_t i = 0; i < a.slots.size(); ++i) {
    if (a.slots[i].type != b.slots[i].type || a.slots[i].tokens != b.slots[i].tokens) return false;
  }
  return a.id == b.id && a.tokens == b.tokens && a.alt_transcript == b.alt_transcript && a.tag == b.tag &&
         a.template_name == b.template_name && a.feature_seed == b.feature_seed;
}

bool same(const std::vector<Utterance>& a, const std::vector<Utterance>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i)
    if (!same(a[i], b[i])) return false;
  return true;
}

bool same(const Corpus& a, const Corpus& b) {
  if (a.device_streams.size() != b.device_streams.size()) return false;
  for (std::size_t d = 0; d < a.device_streams.size(); ++d)
    if (!same(a.device_streams[d], b.device_streams[d])) return false;
  return same(a.pretrain, b.pretrain) && same(a.eval_general_old, b.eval_general_old) &&
         same(a.eval_general_new, b.eval_general_new) && same(a.eval_delta, b.eval_delta);
}

std::filesystem::path temp_file(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("fedsl_test_" + name);
}

// Relative n-gram frequencies (n = 1..3) of a set of utterances.
std::map<std::string, double> ngram_rates(const std::vector<Utterance>& utts) {
  std::map<std::string, double> rates;
  for (int n = 1; n <= 3; ++n) {
    const auto counts = count_ngrams(utts, n);
    double total = 0.0;
    for (const auto& [key, c] : counts) total += static_cast<double>(c);
    for (const auto& [key, c] : counts) rates[key] = static_cast<double>(c) / total;
  }
  return rates;
}

}  // namespace

TEST_CASE("vocabulary holds 30 base and 10 delta words") {
  const Vocabulary& v = Vocabulary::standard();
  CHECK(v.size() == 40);
  CHECK(v.base_size() == 30);
  CHECK(v.decode(v.encode("what is the weather in tokyo")) == "what is the weather in tokyo");
  CHECK(v.is_delta_word(v.id("tokyo")));
  CHECK_FALSE(v.is_delta_word(v.id("paris")));
  CHECK(v.confusable_partner(v.id("tokyo")) == v.id("paris"));
  CHECK(v.confusable_partner(v.id("paris")) == v.id("tokyo"));
  CHECK(v.confusable_partner(v.id("play")) == -1);
  CHECK_THROWS(v.encode("play banjo"));
}

TEST_CASE("corpus generation is a pure function of the config") {
  const CorpusConfig c = small_config();
  CHECK(same(generate_corpus(c), generate_corpus(c)));
  CorpusConfig other = c;
  other.seed = c.seed + 1;
  CHECK_FALSE(same(generate_corpus(c), generate_corpus(other)));
}

TEST_CASE("split sizes match the config") {
  const CorpusConfig c = small_config();
  const Corpus k = generate_corpus(c);
  CHECK(k.pretrain.size() == 120);
  CHECK(k.device_streams.size() == 6);
  for (const auto& s : k.device_streams) CHECK(s.size() == 40);
  CHECK(k.eval_general_old.size() == 30);
  CHECK(k.eval_general_new.size() == 30);
  CHECK(k.eval_delta.size() == 30);
}

TEST_CASE("split tags follow the period") {
  const Corpus k = generate_corpus(small_config());
  for (const Utterance& u : k.pretrain) CHECK(u.tag == DistributionTag::kBase);
  for (const Utterance& u : k.eval_general_old) CHECK(u.tag == DistributionTag::kBase);
  for (const Utterance& u : k.eval_delta) CHECK(u.tag == DistributionTag::kDelta);
  for (const Utterance& u : k.pretrain) {
    CHECK(u.tokens.size() >= 2);
    CHECK(u.tokens.size() <= 8);
    CHECK_FALSE(u.slots.empty());
  }
}

TEST_CASE("eval sets share no instance with training data") {
  const Corpus k = generate_corpus(small_config());
  std::set<std::uint64_t> train_ids, train_seeds;
  auto add = [&](const std::vector<Utterance>& us) {
    for (const Utterance& u : us) {
      train_ids.insert(u.id);
      train_seeds.insert(u.feature_seed);
    }
  };
  add(k.pretrain);
  for (const auto& s : k.device_streams) add(s);
  for (const auto* set : {&k.eval_general_old, &k.eval_general_new, &k.eval_delta}) {
    for (const Utterance& u : *set) {
      CHECK(train_ids.count(u.id) == 0);
      CHECK(train_seeds.count(u.feature_seed) == 0);
    }
  }
}

TEST_CASE("delta n-grams are at least five times rarer in the base period") {
  CorpusConfig c;
  c.pretrain_size = 60000;
  const Corpus k = generate_corpus(c);
  std::vector<Utterance> stream;
  for (const auto& s : k.device_streams) stream.insert(stream.end(), s.begin(), s.end());
  const auto base = ngram_rates(k.pretrain);
  const auto shifted = ngram_rates(stream);
  const Vocabulary& v = Vocabulary::standard();
  std::size_t designated = 0;
  for (const auto& [key, rate] : shifted) {
    std::istringstream in(key);
    bool has_delta = false;
    for (int tok; in >> tok;) has_delta = has_delta || v.is_delta_word(tok);
    if (!has_delta || rate < 1e-3) continue;
    ++designated;
    auto it = base.find(key);
    const double base_rate = it == base.end() ? 0.0 : it->second;
    INFO("n-gram " << key << " shifted " << rate << " base " << base_rate);
    CHECK(rate >= 5.0 * base_rate);
  }
  CHECK(designated >= 10);
}

TEST_CASE("noise-free features repeat the prototypes") {
  CorpusConfig c = small_config();
  FeatureSynthesizer synth(c);
  Rng rng(1);
  const TokenSequence toks = Vocabulary::standard().encode("call mom");
  const FeatureSequence x = synth.synth(toks, 0.0, rng);
  CHECK(x.rows() >= 4);
  CHECK(x.rows() <= 8);
  CHECK(x.row(0) == synth.prototypes().row(toks[0]));
  CHECK(x.row(x.rows() - 1) == synth.prototypes().row(toks[1]));
  CHECK(probe_tokens(synth, x) == toks);
  CHECK_THROWS_AS(synth.synth({}, 0.0, rng), std::invalid_argument);
}

TEST_CASE("features are deterministic per utterance") {
  const Corpus k = generate_corpus(small_config());
  FeatureSynthesizer synth(k.config);
  CHECK(synth.features_of(k.pretrain[3]) == synth.features_of(k.pretrain[3]));
  CHECK(synth.features_of(k.pretrain[3]) != synth.features_of(k.pretrain[4]));
}

TEST_CASE("nearest-prototype probe recovers at least 95% of tokens at noise 0.1") {
  CorpusConfig c = small_config();
  c.noise_level = 0.1;
  const Corpus k = generate_corpus(c);
  FeatureSynthesizer synth(c);
  std::size_t edits = 0, total = 0;
  for (const Utterance& u : k.pretrain) {
    edits += edit_distance(probe_tokens(synth, synth.features_of(u)), u.tokens);
    total += u.tokens.size();
  }
  CHECK(1.0 - static_cast<double>(edits) / static_cast<double>(total) >= 0.95);
}

TEST_CASE("augmentation keeps length and bounds the mask") {
  Rng rng(4);
  FeatureSequence x = FeatureSequence::Constant(12, 3, 1.0);
  CHECK(augment(x, {}, rng) == x);
  for (int trial = 0; trial < 200; ++trial) {
    const FeatureSequence y = augment(x, {3, 0.0}, rng);
    REQUIRE(y.rows() == x.rows());
    int zeroed = 0;
    for (Eigen::Index r = 0; r < y.rows(); ++r) zeroed += y.row(r).isZero() ? 1 : 0;
    CHECK(zeroed <= 3);
  }
  CHECK(augment(x, {0, 0.5}, rng).rows() == 12);
  CHECK_THROWS_AS(augment(x, {-1, 0.0}, rng), std::invalid_argument);
}

TEST_CASE("device view carries no reference tokens") {
  static_assert(!std::is_same_v<decltype(DeviceSample::features), TokenSequence>);
  const Corpus k = generate_corpus(small_config());
  FeatureSynthesizer synth(k.config);
  DeviceStream s(0, k.device_streams[0], synth);
  auto batch = s.next_batch(5, false);
  REQUIRE(batch.size() == 5);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    CHECK(batch[i].id == k.device_streams[0][i].id);
    CHECK_FALSE(batch[i].weak.transcript.has_value());
    CHECK(batch[i].weak.slots.size() == k.device_streams[0][i].slots.size());
  }
  auto with = s.next_batch(2, true);
  CHECK(*with[0].weak.transcript == k.device_streams[0][5].alt_transcript);
}

TEST_CASE("device streams are single pass") {
  const Corpus k = generate_corpus(small_config());
  FeatureSynthesizer synth(k.config);
  DeviceStream s(1, k.device_streams[1], synth);
  std::set<std::uint64_t> seen;
  std::size_t n = 0;
  for (auto b = s.next_batch(16, false); !b.empty(); b = s.next_batch(16, false)) {
    for (const auto& x : b) seen.insert(x.id);
    n += b.size();
  }
  CHECK(n == 40);
  CHECK(seen.size() == 40);
  CHECK(s.remaining() == 0);
  CHECK(s.next_batch(4, false).empty());
}

TEST_CASE("alternate transcripts only swap confusable partners") {
  const Corpus k = generate_corpus(small_config());
  const Vocabulary& v = Vocabulary::standard();
  std::size_t swapped = 0;
  for (const auto& s : k.device_streams) {
    for (const Utterance& u : s) {
      REQUIRE(u.alt_transcript.size() == u.tokens.size());
      for (std::size_t i = 0; i < u.tokens.size(); ++i) {
        if (u.alt_transcript[i] != u.tokens[i]) {
          CHECK(u.alt_transcript[i] == v.confusable_partner(u.tokens[i]));
          ++swapped;
        }
      }
    }
  }
  CHECK(swapped > 0);
}

TEST_CASE("export and import round-trip the corpus") {
  const Corpus k = generate_corpus(small_config());
  const auto a = temp_file("corpus_a.jsonl");
  const auto b = temp_file("corpus_b.jsonl");
  export_corpus(k, a);
  const Corpus back = import_corpus(a);
  CHECK(same(k, back));
  export_corpus(back, b);
  std::ifstream fa(a), fb(b);
  std::stringstream sa, sb;
  sa << fa.rdbuf();
  sb << fb.rdbuf();
  CHECK(sa.str() == sb.str());
  std::filesystem::remove(a);
  std::filesystem::remove(b);
}

TEST_CASE("import reports unreadable corpora as IO errors") {
  CHECK_THROWS_AS(import_corpus(temp_file("does_not_exist.jsonl")), IoError);
  const auto f = temp_file("corpus_bad.jsonl");
  {
    std::ofstream out(f);
    out << "{\"format\":\"something-else\"}\n";
  }
  CHECK_THROWS_AS(import_corpus(f), IoError);
  {
    std::ofstream out(f);
    out << "not json\n";
  }
  CHECK_THROWS_AS(import_corpus(f), IoError);
  std::filesystem::remove(f);
}

TEST_CASE("inconsistent corpus sizes are rejected") {
  CorpusConfig c = small_config();
  c.devices = 0;
  CHECK_THROWS_AS(generate_corpus(c), ConfigError);
  c = small_config();
  c.max_frames_per_token = 1;
  CHECK_THROWS_AS(generate_corpus(c), ConfigError);
}
