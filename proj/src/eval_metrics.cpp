#include "fedsl/eval_metrics.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

#include "fedsl/parallel.hpp"
#include "fedsl/weaksup.hpp"

namespace fedsl {

SetMetrics score_hypotheses(const std::vector<Utterance>& refs, const std::vector<TokenSequence>& hyps) {
  if (refs.empty()) throw std::invalid_argument("evaluation set is empty");
  if (refs.size() != hyps.size()) throw std::invalid_argument("one hypothesis per reference required");
  SetMetrics m;
  double sentence_errors = 0.0;
  double semantic = 0.0;
  for (std::size_t i = 0; i < refs.size(); ++i) {
    m.edits += edit_distance(hyps[i], refs[i].tokens);
    m.ref_tokens += refs[i].tokens.size();
    sentence_errors += binary_ser_cost(hyps[i], refs[i].tokens);
    semantic += semantic_cost(hyps[i], WeakLabel{refs[i].slots, std::nullopt});
  }
  m.utterances = refs.size();
  m.wer = static_cast<double>(m.edits) / static_cast<double>(m.ref_tokens);
  m.ser = sentence_errors / static_cast<double>(refs.size());
  m.semantic_cost = semantic / static_cast<double>(refs.size());
  return m;
}

std::vector<TokenSequence> transcribe(const TransducerModel& model, const FeatureSynthesizer& synth,
                                      const std::vector<Utterance>& utts, const DecodeOptions& options,
                                      int workers) {
  return parallel_map(utts.size(), workers, [&](std::size_t i) {
    return decode_top1(model, synth.features_of(utts[i]), options);
  });
}

SetMetrics evaluate_set(const TransducerModel& model, const FeatureSynthesizer& synth,
                        const std::vector<Utterance>& utts, const DecodeOptions& options, int workers) {
  if (utts.empty()) throw std::invalid_argument("evaluation set is empty");
  return score_hypotheses(utts, transcribe(model, synth, utts, options, workers));
}

double corpus_wer(const TransducerModel& model, const FeatureSynthesizer& synth,
                  const std::vector<Utterance>& utts, const DecodeOptions& options, int workers) {
  return evaluate_set(model, synth, utts, options, workers).wer;
}

double werr(double initial_wer, double current_wer) {
  if (!(initial_wer > 0.0)) throw std::invalid_argument("werr: initial WER must be > 0");
  return (initial_wer - current_wer) / initial_wer;
}

std::string_view to_string(EvalSet set) {
  switch (set) {
    case EvalSet::kGeneralOld: return "general_old";
    case EvalSet::kGeneralNew: return "general_new";
    case EvalSet::kDelta: return "delta";
  }
  return "unknown";
}

const std::vector<Utterance>& eval_utterances(const Corpus& corpus, EvalSet set) {
  switch (set) {
    case EvalSet::kGeneralOld: return corpus.eval_general_old;
    case EvalSet::kGeneralNew: return corpus.eval_general_new;
    case EvalSet::kDelta: return corpus.eval_delta;
  }
  throw std::invalid_argument("unknown eval set");
}

void fill_werr(EvalSnapshot& snap, const EvalSnapshot& initial) {
  for (std::size_t i = 0; i < snap.sets.size(); ++i) {
    const double w0 = initial.sets[i].wer;
    const double w = snap.sets[i].wer;
    if (w0 > 0.0) {
      snap.werr[i] = werr(w0, w);
    } else {
      snap.werr[i] = w == 0.0 ? 0.0 : -std::numeric_limits<double>::infinity();
    }
  }
}

EvalSnapshot take_snapshot(int round, const TransducerModel& model, const Corpus& corpus,
                           const FeatureSynthesizer& synth, const DecodeOptions& options,
                           const EvalSnapshot* initial, int workers) {
  EvalSnapshot s;
  s.round = round;
  for (EvalSet set : kEvalSets) {
    s.sets[static_cast<std::size_t>(set)] = evaluate_set(model, synth, eval_utterances(corpus, set), options, workers);
  }
  fill_werr(s, initial ? *initial : s);
  return s;
}

ForgettingSummary forgetting_report(double old_werr, double delta_werr, double threshold) {
  ForgettingSummary f;
  f.old_werr = old_werr;
  f.delta_werr = delta_werr;
  f.forgetting = old_werr < -threshold && delta_werr > threshold;
  return f;
}

ForgettingSummary forgetting_report(const std::vector<EvalSnapshot>& snapshots, double threshold) {
  if (snapshots.size() < 2) throw std::invalid_argument("forgetting_report needs at least two snapshots");
  const EvalSnapshot& last = snapshots.back();
  ForgettingSummary f =
      forgetting_report(last.werr_of(EvalSet::kGeneralOld), last.werr_of(EvalSet::kDelta), threshold);
  f.new_werr = last.werr_of(EvalSet::kGeneralNew);
  for (const EvalSnapshot& s : snapshots) {
    f.rounds.push_back(s.round);
    for (std::size_t i = 0; i < 3; ++i) f.trajectories[i].push_back(s.werr[i]);
  }
  return f;
}

double forgetting_reduction(const ForgettingSummary& without, const ForgettingSummary& with) {
  const double base = -without.old_werr;
  if (base <= 0.0) return 0.0;
  return (base - std::max(0.0, -with.old_werr)) / base;
}

DivergenceDetector::DivergenceDetector(double threshold, int patience) : threshold_(threshold), patience_(patience) {
  if (!(threshold > 0.0) || patience < 1) throw std::invalid_argument("divergence detector needs threshold > 0, patience >= 1");
}

bool DivergenceDetector::observe(int round, double werr_value) {
  if (fired_round_) return true;
  streak_ = werr_value <= -threshold_ ? streak_ + 1 : 0;
  if (streak_ >= patience_) fired_round_ = round;
  return triggered();
}

}  // namespace fedsl
