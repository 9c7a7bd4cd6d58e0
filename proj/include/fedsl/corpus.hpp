#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "fedsl/transducer.hpp"
#include "fedsl/weaksup.hpp"

namespace fedsl {

enum class DistributionTag { kBase, kDelta };

std::string_view to_string(DistributionTag tag);
DistributionTag parse_distribution_tag(std::string_view name);

/// Word-per-token vocabulary shared by every corpus: 30 base words followed
/// by 10 words that only the shifted period uses regularly.
class Vocabulary {
 public:
  static const Vocabulary& standard();

  int size() const { return static_cast<int>(words_.size()); }
  int base_size() const { return base_size_; }
  bool is_delta_word(int token) const { return token >= base_size_; }
  const std::string& word(int token) const { return words_.at(static_cast<std::size_t>(token)); }
  int id(std::string_view word) const;
  TokenSequence encode(std::string_view sentence) const;
  std::string decode(const TokenSequence& tokens) const;

  /// Acoustically close counterpart of a word, or -1.
  int confusable_partner(int token) const;

 private:
  Vocabulary();

  std::vector<std::string> words_;
  std::vector<int> partner_;
  int base_size_ = 0;
};

struct Utterance {
  std::uint64_t id = 0;
  TokenSequence tokens;              // ground truth
  std::vector<Slot> slots;           // NLU semantics
  TokenSequence alt_transcript;      // alternate-system machine transcript
  DistributionTag tag = DistributionTag::kBase;
  std::string template_name;
  std::uint64_t feature_seed = 0;
};

struct CorpusConfig {
  std::uint64_t seed = 2021;
  int feature_dim = 16;
  int devices = 100;
  int utterances_per_device = 600;
  int pretrain_size = 4000;
  int eval_size = 300;
  /// Share of delta templates in the continual period.
  double delta_fraction = 0.5;
  /// Chance a base-period slot is filled with a delta value.
  double base_delta_slot_rate = 0.0;
  /// Chance a base-period utterance uses a delta template.
  double base_delta_template_rate = 0.05;
  double noise_level = 0.5;
  double prototype_norm = 3.0;
  /// Distance between a delta word's prototype and its base partner's.
  double confusion_distance = 1.4;
  /// Per-token chance the alternate transcript swaps a word for its partner.
  double alt_transcript_error = 0.1;
  int min_frames_per_token = 2;
  int max_frames_per_token = 4;

  void validate() const;
};

/// Maps tokens to frames: each token becomes 2-4 copies of its prototype
/// vector plus isotropic Gaussian noise.
class FeatureSynthesizer {
 public:
  explicit FeatureSynthesizer(const CorpusConfig& config);

  const Eigen::MatrixXd& prototypes() const { return prototypes_; }  // vocab x dim
  int feature_dim() const { return static_cast<int>(prototypes_.cols()); }

  FeatureSequence synth(const TokenSequence& tokens, double noise_level, Rng& rng) const;
  /// Features of a stored utterance at the corpus noise level.
  FeatureSequence features_of(const Utterance& utt) const;

 private:
  Eigen::MatrixXd prototypes_;
  double noise_level_;
  int min_frames_;
  int max_frames_;
};

struct Corpus {
  CorpusConfig config;
  std::vector<Utterance> pretrain;                   // base period, labeled
  std::vector<std::vector<Utterance>> device_streams;  // continual period
  std::vector<Utterance> eval_general_old;           // base distribution
  std::vector<Utterance> eval_general_new;           // continual mixture
  std::vector<Utterance> eval_delta;                 // delta templates only
};

/// Pure function of the config (including its seed).
Corpus generate_corpus(const CorpusConfig& config);

/// Line-delimited JSON: a header record with the config, then one record per
/// utterance (no features; they regenerate from feature_seed).
void export_corpus(const Corpus& corpus, const std::filesystem::path& file);
Corpus import_corpus(const std::filesystem::path& file);

struct AugmentConfig {
  int max_mask = 0;      // longest run of zeroed frames
  double noise = 0.0;    // std of additive feature noise
};

/// Time masking plus additive noise; never changes the frame count.
FeatureSequence augment(const FeatureSequence& features, const AugmentConfig& config, Rng& rng);

/// Nearest-prototype label of every frame.
std::vector<int> probe_frames(const FeatureSynthesizer& synth, const FeatureSequence& features);
/// probe_frames with repeats collapsed.
TokenSequence probe_tokens(const FeatureSynthesizer& synth, const FeatureSequence& features);

/// n-gram counts (n = 1..3) keyed by space-joined token ids.
std::vector<std::pair<std::string, std::size_t>> count_ngrams(const std::vector<Utterance>& utts, int n);

/// What a device can see of one utterance: audio features, NLU semantics and
/// optionally a machine transcript. Never the reference tokens.
struct DeviceSample {
  std::uint64_t id = 0;
  FeatureSequence features;
  WeakLabel weak;
};

/// Single-pass stream over one device's utterances. The cursor never rewinds.
class DeviceStream {
 public:
  DeviceStream(int device_id, const std::vector<Utterance>& utterances,
               const FeatureSynthesizer& synth);

  int device_id() const { return device_id_; }
  std::size_t remaining() const { return utterances_->size() - cursor_; }
  std::size_t consumed() const { return cursor_; }

  /// Up to `count` next samples; fewer once the stream runs dry.
  std::vector<DeviceSample> next_batch(std::size_t count, bool with_transcript);

 private:
  int device_id_;
  const std::vector<Utterance>* utterances_;
  const FeatureSynthesizer* synth_;
  std::size_t cursor_ = 0;
};

std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b);
std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c);

}  // namespace fedsl
