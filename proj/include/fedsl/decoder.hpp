#pragma once

#include <Eigen/Dense>

#include <span>
#include <string_view>
#include <vector>

#include "fedsl/tape.hpp"
#include "fedsl/transducer.hpp"

namespace fedsl {

struct Hypothesis {
  TokenSequence tokens;
  double log_prob = 0.0;  // exact log P(tokens | x) from the lattice
  bool served = false;
};

/// Distinct hypotheses in descending log_prob, ties broken by ascending
/// lexicographic token order. The first entry is the served one.
struct NBestList {
  std::vector<Hypothesis> hypotheses;

  std::size_t size() const { return hypotheses.size(); }
  bool empty() const { return hypotheses.empty(); }
  const Hypothesis& top() const { return hypotheses.front(); }
};

struct DecodeOptions {
  int beam = 8;
  int nbest = 4;
  int max_symbols_per_frame = 8;
};

/// Time-synchronous prefix beam search. Paths reaching the same prefix at
/// the same frame are merged by log-sum-exp; at most `max_symbols_per_frame`
/// labels are emitted per frame. Surviving prefixes are rescored exactly
/// through the lattice and the `nbest` best are kept.
NBestList beam_decode(const TransducerModel& model, const FeatureSequence& features,
                      const DecodeOptions& options);

/// Search only: best prefix by search score, no rescoring.
TokenSequence decode_top1(const TransducerModel& model, const FeatureSequence& features,
                          const DecodeOptions& options);

/// p_hat_i = p_i / sum_j p_j over the list.
Eigen::VectorXd normalize_nbest(const NBestList& nbest);

/// Differentiable version: log p_hat from per-hypothesis log P nodes.
Var normalized_log_weights(std::span<const Var> log_probs);

enum class ConfidenceMeasure {
  kPosterior,  // top normalized probability
  kPerToken,   // geometric mean per-token probability of the top hypothesis
};

ConfidenceMeasure parse_confidence_measure(std::string_view name);

double confidence(const NBestList& nbest, ConfidenceMeasure measure = ConfidenceMeasure::kPosterior);

/// Accepts iff low <= confidence <= high. Requires 0 <= low < high <= 1.
bool confidence_filter(const NBestList& nbest, double low, double high,
                       ConfidenceMeasure measure = ConfidenceMeasure::kPosterior);

}  // namespace fedsl
