#pragma once

#include <array>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fedsl/corpus.hpp"
#include "fedsl/decoder.hpp"
#include "fedsl/transducer.hpp"

namespace fedsl {

struct SetMetrics {
  double wer = 0.0;
  double ser = 0.0;
  double semantic_cost = 0.0;
  std::size_t edits = 0;
  std::size_t ref_tokens = 0;
  std::size_t utterances = 0;
};

/// Token-level metrics of reference/hypothesis pairs. WER is corpus-level
/// (total edits / total reference tokens).
SetMetrics score_hypotheses(const std::vector<Utterance>& refs, const std::vector<TokenSequence>& hyps);

/// Top-1 transcripts of an eval set.
std::vector<TokenSequence> transcribe(const TransducerModel& model, const FeatureSynthesizer& synth,
                                      const std::vector<Utterance>& utts, const DecodeOptions& options,
                                      int workers = 1);

SetMetrics evaluate_set(const TransducerModel& model, const FeatureSynthesizer& synth,
                        const std::vector<Utterance>& utts, const DecodeOptions& options, int workers = 1);

double corpus_wer(const TransducerModel& model, const FeatureSynthesizer& synth,
                  const std::vector<Utterance>& utts, const DecodeOptions& options, int workers = 1);

/// (initial - current) / initial; positive is an improvement.
double werr(double initial_wer, double current_wer);

enum class EvalSet { kGeneralOld = 0, kGeneralNew = 1, kDelta = 2 };
inline constexpr std::array<EvalSet, 3> kEvalSets = {EvalSet::kGeneralOld, EvalSet::kGeneralNew, EvalSet::kDelta};
std::string_view to_string(EvalSet set);
const std::vector<Utterance>& eval_utterances(const Corpus& corpus, EvalSet set);

struct EvalSnapshot {
  int round = 0;
  std::array<SetMetrics, 3> sets;
  std::array<double, 3> werr{};  // vs. the run's initial model

  const SetMetrics& at(EvalSet s) const { return sets[static_cast<std::size_t>(s)]; }
  double werr_of(EvalSet s) const { return werr[static_cast<std::size_t>(s)]; }
};

/// Evaluates all three sets. With `initial` absent the snapshot is its own
/// baseline (all WERR zero).
EvalSnapshot take_snapshot(int round, const TransducerModel& model, const Corpus& corpus,
                           const FeatureSynthesizer& synth, const DecodeOptions& options,
                           const EvalSnapshot* initial, int workers = 1);

/// Fills WERR of `snap` against `initial`. A set whose initial WER is zero
/// gets WERR 0 when still zero and -inf otherwise.
void fill_werr(EvalSnapshot& snap, const EvalSnapshot& initial);

struct ForgettingSummary {
  double old_werr = 0.0;
  double delta_werr = 0.0;
  double new_werr = 0.0;
  bool forgetting = false;  // old set worse than -threshold while delta better than +threshold
  std::vector<int> rounds;
  std::array<std::vector<double>, 3> trajectories;  // WERR per snapshot
};

/// Requires at least two snapshots.
ForgettingSummary forgetting_report(const std::vector<EvalSnapshot>& snapshots, double threshold);
ForgettingSummary forgetting_report(double old_werr, double delta_werr, double threshold);

/// Fraction by which `with` shrinks the old-set degradation of `without`
/// (1 = no degradation left, 0 = no reduction). Zero when `without` shows none.
double forgetting_reduction(const ForgettingSummary& without, const ForgettingSummary& with);

/// Flags sustained relative WER degradation on one set.
class DivergenceDetector {
 public:
  DivergenceDetector(double threshold, int patience);

  /// Feeds one snapshot's WERR; returns true once the detector has fired.
  bool observe(int round, double werr);
  bool triggered() const { return fired_round_.has_value(); }
  std::optional<int> fired_round() const { return fired_round_; }

 private:
  double threshold_;
  int patience_;
  int streak_ = 0;
  std::optional<int> fired_round_;
};

}  // namespace fedsl
