#pragma once

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsl/decoder.hpp"
#include "fedsl/tape.hpp"
#include "fedsl/transducer.hpp"

namespace fedsl {

using Rng = std::mt19937_64;

struct Slot {
  std::string type;
  TokenSequence tokens;
};

/// NLU semantics for one utterance, plus an optional machine transcript z_t.
struct WeakLabel {
  std::vector<Slot> slots;
  std::optional<TokenSequence> transcript;
};

enum class FeedbackKind { kSemantic, kBinarySer, kWer };

std::string_view to_string(FeedbackKind kind);

struct FeedbackSignal {
  double cost = 0.0;
  FeedbackKind kind = FeedbackKind::kSemantic;
  bool noisy = false;
  double sigma = 0.0;
};

/// U' ~ N(0, sigma^2) conditioned on [0, 1], sampled by rejection.
class NoiseModel {
 public:
  explicit NoiseModel(double sigma);

  double sigma() const { return sigma_; }
  /// Closed-form E[U'].
  double mean() const;
  double sample(Rng& rng) const;

 private:
  double sigma_;
};

/// Fraction of slots with at least one token absent from `hyp`.
double semantic_cost(const TokenSequence& hyp, const WeakLabel& label);

std::size_t edit_distance(const TokenSequence& hyp, const TokenSequence& ref);

/// Levenshtein distance over tokens divided by |ref|.
double wer_cost(const TokenSequence& hyp, const TokenSequence& ref);

/// 1(hyp != transcript).
double binary_ser_cost(const TokenSequence& hyp, const TokenSequence& transcript);
double binary_ser_cost(const TokenSequence& hyp, const WeakLabel& label);

/// cost + (-1)^cost * U' for a binary cost; the result stays in [0, 1].
double add_noise(double cost, const NoiseModel& noise, Rng& rng);

/// sum_i p_hat_i * cost_i over the list, differentiable through p_hat only.
/// `encoded` must come from the features the list was decoded from.
Var expected_cost_loss(ModelGraph& graph, const EncodedInput& encoded, const NBestList& nbest,
                       std::span<const double> costs);

double expected_cost_loss(const TransducerModel& model, const FeatureSequence& features,
                          const NBestList& nbest, std::span<const double> costs);

enum class ReinforceLogProb {
  kNormalized,  // log p_hat over the n-best; unbiased for the n-best expected cost
  kRaw,         // log p(y|x) from the lattice
};

ReinforceLogProb parse_reinforce_log_prob(std::string_view name);

struct ReinforceOptions {
  bool served_only = false;  // feedback exists only for the served (top) hypothesis
  ReinforceLogProb log_prob = ReinforceLogProb::kNormalized;
};

struct ReinforceResult {
  Var loss;
  std::size_t chosen = 0;
  FeedbackSignal feedback;
};

/// Draws one hypothesis from the normalized list (or takes the served one),
/// asks `feedback` for its cost and returns stop_gradient(cost) * log p.
ReinforceResult reinforce_loss(ModelGraph& graph, const EncodedInput& encoded,
                               const NBestList& nbest,
                               const std::function<FeedbackSignal(const Hypothesis&)>& feedback,
                               const ReinforceOptions& options, Rng& rng);

/// Index drawn from a discrete distribution.
std::size_t sample_index(const Eigen::VectorXd& weights, Rng& rng);

}  // namespace fedsl
