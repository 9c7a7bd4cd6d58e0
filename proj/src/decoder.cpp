#include "fedsl/decoder.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>

namespace fedsl {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

struct Entry {
  TokenSequence tokens;
  double score = 0.0;
};

bool better(const Entry& a, const Entry& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.tokens < b.tokens;
}

void validate(const DecodeOptions& o) {
  if (o.nbest < 1 || o.beam < o.nbest) {
    throw std::invalid_argument("decode options require beam >= nbest >= 1 (beam=" +
                                std::to_string(o.beam) + ", nbest=" + std::to_string(o.nbest) + ")");
  }
  if (o.max_symbols_per_frame < 1) throw std::invalid_argument("max_symbols_per_frame must be >= 1");
}

class PrefixSearch {
 public:
  PrefixSearch(const TransducerModel& model, const FeatureSequence& features)
      : scorer_(model, features), vocab_(model.dims().vocab_size) {
    states_.emplace(TokenSequence{}, scorer_.initial());
  }

  std::vector<Entry> run(const DecodeOptions& o) {
    std::vector<Entry> hyps{{{}, 0.0}};
    for (int t = 0; t < scorer_.frames(); ++t) {
      std::map<TokenSequence, double> next;
      std::vector<Entry> current = hyps;
      for (int emitted = 0; !current.empty(); ++emitted) {
        struct Candidate {
          double score;
          std::size_t parent;
          int token;
        };
        std::vector<Candidate> candidates;
        for (std::size_t i = 0; i < current.size(); ++i) {
          const Entry& e = current[i];
          const Eigen::VectorXd lp = scorer_.log_probs(t, state_of(e.tokens));
          auto [it, inserted] = next.try_emplace(e.tokens, kNegInf);
          it->second = log_add_exp(it->second, e.score + lp[kBlank]);
          if (emitted < o.max_symbols_per_frame) {
            for (int k = 0; k < vocab_; ++k) {
              candidates.push_back({e.score + lp[output_symbol(k)], i, k});
            }
          }
        }
        // A candidate already below the beam-th finished score cannot enter the beam.
        if (next.size() >= static_cast<std::size_t>(o.beam)) {
          std::vector<double> finished;
          finished.reserve(next.size());
          for (const auto& kv : next) finished.push_back(kv.second);
          std::nth_element(finished.begin(), finished.begin() + (o.beam - 1), finished.end(), std::greater<>());
          const double floor = finished[static_cast<std::size_t>(o.beam - 1)];
          std::erase_if(candidates, [floor](const Candidate& c) { return c.score < floor; });
        }
        if (candidates.empty()) break;
        std::vector<Entry> expanded;
        expanded.reserve(candidates.size());
        // Keep a superset before building token vectors; ties resolved below.
        const std::size_t keep = std::min<std::size_t>(candidates.size(), 4 * o.beam);
        std::partial_sort(candidates.begin(), candidates.begin() + keep, candidates.end(),
                          [](const Candidate& a, const Candidate& b) { return a.score > b.score; });
        for (std::size_t i = 0; i < keep; ++i) {
          Entry e{current[candidates[i].parent].tokens, candidates[i].score};
          e.tokens.push_back(candidates[i].token);
          expanded.push_back(std::move(e));
        }
        current = prune(std::move(expanded), o.beam);
      }
      std::vector<Entry> merged;
      merged.reserve(next.size());
      for (auto& [tokens, score] : next) merged.push_back({tokens, score});
      hyps = prune(std::move(merged), o.beam);
    }
    return hyps;
  }

 private:
  static std::vector<Entry> prune(std::vector<Entry> entries, int beam) {
    std::sort(entries.begin(), entries.end(), better);
    if (entries.size() > static_cast<std::size_t>(beam)) entries.resize(static_cast<std::size_t>(beam));
    return entries;
  }

  const IncrementalScorer::State& state_of(const TokenSequence& tokens) {
    auto it = states_.find(tokens);
    if (it != states_.end()) return it->second;
    TokenSequence parent(tokens.begin(), tokens.end() - 1);
    IncrementalScorer::State s = scorer_.advance(state_of(parent), tokens.back());
    return states_.emplace(tokens, std::move(s)).first->second;
  }

  IncrementalScorer scorer_;
  int vocab_;
  std::map<TokenSequence, IncrementalScorer::State> states_;
};

}  // namespace

NBestList beam_decode(const TransducerModel& model, const FeatureSequence& features,
                      const DecodeOptions& options) {
  validate(options);
  validate_input(model.dims(), features, {});
  std::vector<Entry> found = PrefixSearch(model, features).run(options);

  Tape tape;
  ModelGraph graph(tape, model);
  EncodedInput encoded = encode(graph, features);
  NBestList out;
  for (Entry& e : found) {
    const double lp = sequence_logprob(graph, encoded, e.tokens).scalar();
    out.hypotheses.push_back({std::move(e.tokens), lp, false});
  }
  std::sort(out.hypotheses.begin(), out.hypotheses.end(), [](const Hypothesis& a, const Hypothesis& b) {
    if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
    return a.tokens < b.tokens;
  });
  if (out.hypotheses.size() > static_cast<std::size_t>(options.nbest)) {
    out.hypotheses.resize(static_cast<std::size_t>(options.nbest));
  }
  out.hypotheses.front().served = true;
  return out;
}

TokenSequence decode_top1(const TransducerModel& model, const FeatureSequence& features,
                          const DecodeOptions& options) {
  if (options.beam < 1) throw std::invalid_argument("beam must be >= 1");
  validate_input(model.dims(), features, {});
  return PrefixSearch(model, features).run(options).front().tokens;
}

Eigen::VectorXd normalize_nbest(const NBestList& nbest) {
  if (nbest.empty()) throw std::invalid_argument("normalize_nbest: empty list");
  Eigen::VectorXd lp(static_cast<Eigen::Index>(nbest.size()));
  for (std::size_t i = 0; i < nbest.size(); ++i) lp[static_cast<Eigen::Index>(i)] = nbest.hypotheses[i].log_prob;
  const double lse = logsumexp_of(lp);
  return (lp.array() - lse).exp().matrix();
}

Var normalized_log_weights(std::span<const Var> log_probs) {
  return log_softmax(stack(log_probs));
}

ConfidenceMeasure parse_confidence_measure(std::string_view name) {
  if (name == "posterior") return ConfidenceMeasure::kPosterior;
  if (name == "per_token") return ConfidenceMeasure::kPerToken;
  throw std::invalid_argument("unknown confidence measure '" + std::string(name) + "'");
}

double confidence(const NBestList& nbest, ConfidenceMeasure measure) {
  if (nbest.empty()) throw std::invalid_argument("confidence: empty list");
  if (measure == ConfidenceMeasure::kPosterior) return normalize_nbest(nbest)[0];
  const double n = std::max<double>(1.0, static_cast<double>(nbest.top().tokens.size()));
  return std::exp(nbest.top().log_prob / n);
}

bool confidence_filter(const NBestList& nbest, double low, double high, ConfidenceMeasure measure) {
  if (!(low >= 0.0 && low < high && high <= 1.0)) {
    throw std::invalid_argument("confidence band requires 0 <= low < high <= 1");
  }
  const double c = confidence(nbest, measure);
  return c >= low && c <= high;
}

}  // namespace fedsl
