#include "fedsl/weaksup.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace fedsl {

std::string_view to_string(FeedbackKind kind) {
  switch (kind) {
    case FeedbackKind::kSemantic: return "semantic";
    case FeedbackKind::kBinarySer: return "binary_ser";
    case FeedbackKind::kWer: return "wer";
  }
  return "unknown";
}

NoiseModel::NoiseModel(double sigma) : sigma_(sigma) {
  if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw std::invalid_argument("noise sigma must be >= 0");
}

double NoiseModel::mean() const {
  if (sigma_ == 0.0) return 0.0;
  const double beta = 1.0 / sigma_;
  const double pdf_gap = (1.0 - std::exp(-0.5 * beta * beta)) / std::sqrt(2.0 * std::numbers::pi);
  const double mass = 0.5 * std::erf(beta / std::numbers::sqrt2);
  return sigma_ * pdf_gap / mass;
}

double NoiseModel::sample(Rng& rng) const {
  if (sigma_ == 0.0) return 0.0;
  std::normal_distribution<double> normal(0.0, sigma_);
  for (;;) {
    const double u = normal(rng);
    if (u >= 0.0 && u <= 1.0) return u;
  }
}

double semantic_cost(const TokenSequence& hyp, const WeakLabel& label) {
  if (label.slots.empty()) throw std::invalid_argument("semantic_cost: label has no slots");
  std::size_t wrong = 0;
  for (const Slot& slot : label.slots) {
    if (slot.tokens.empty()) throw std::invalid_argument("semantic_cost: slot '" + slot.type + "' is empty");
    const bool complete = std::all_of(slot.tokens.begin(), slot.tokens.end(), [&](int tok) {
      return std::find(hyp.begin(), hyp.end(), tok) != hyp.end();
    });
    if (!complete) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(label.slots.size());
}

std::size_t edit_distance(const TokenSequence& hyp, const TokenSequence& ref) {
  std::vector<std::size_t> prev(ref.size() + 1), cur(ref.size() + 1);
  for (std::size_t j = 0; j <= ref.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= hyp.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= ref.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (hyp[i - 1] == ref[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[ref.size()];
}

double wer_cost(const TokenSequence& hyp, const TokenSequence& ref) {
  if (ref.empty()) throw std::invalid_argument("wer_cost: empty reference");
  return static_cast<double>(edit_distance(hyp, ref)) / static_cast<double>(ref.size());
}

double binary_ser_cost(const TokenSequence& hyp, const TokenSequence& transcript) {
  return hyp == transcript ? 0.0 : 1.0;
}

double binary_ser_cost(const TokenSequence& hyp, const WeakLabel& label) {
  if (!label.transcript) throw std::invalid_argument("binary_ser_cost: label carries no transcript");
  return binary_ser_cost(hyp, *label.transcript);
}

double add_noise(double cost, const NoiseModel& noise, Rng& rng) {
  if (cost != 0.0 && cost != 1.0) throw std::invalid_argument("add_noise: cost must be binary");
  const double u = noise.sample(rng);
  return cost == 0.0 ? u : 1.0 - u;
}

Var expected_cost_loss(ModelGraph& graph, const EncodedInput& encoded, const NBestList& nbest,
                       std::span<const double> costs) {
  if (nbest.empty()) throw std::invalid_argument("expected_cost_loss: empty n-best list");
  if (costs.size() != nbest.size()) throw std::invalid_argument("expected_cost_loss: one cost per hypothesis");
  std::vector<Var> lps;
  lps.reserve(nbest.size());
  for (const Hypothesis& h : nbest.hypotheses) lps.push_back(sequence_logprob(graph, encoded, h.tokens));
  Var log_w = normalized_log_weights(lps);
  Var weights = graph.tape.record(
      "exp", log_w.value().array().exp().matrix(), {log_w},
      [log_w](Tape& t, const Eigen::MatrixXd& g, const Eigen::MatrixXd& y) {
        t.accumulate(log_w, g.cwiseProduct(y));
      });
  Eigen::MatrixXd c(static_cast<Eigen::Index>(costs.size()), 1);
  for (std::size_t i = 0; i < costs.size(); ++i) c(static_cast<Eigen::Index>(i), 0) = costs[i];
  return dot(weights, c);
}

double expected_cost_loss(const TransducerModel& model, const FeatureSequence& features,
                          const NBestList& nbest, std::span<const double> costs) {
  Tape tape;
  ModelGraph graph(tape, model);
  EncodedInput encoded = encode(graph, features);
  return expected_cost_loss(graph, encoded, nbest, costs).scalar();
}

ReinforceLogProb parse_reinforce_log_prob(std::string_view name) {
  if (name == "normalized") return ReinforceLogProb::kNormalized;
  if (name == "raw") return ReinforceLogProb::kRaw;
  throw std::invalid_argument("unknown reinforce log-prob mode '" + std::string(name) + "'");
}

std::size_t sample_index(const Eigen::VectorXd& weights, Rng& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  const double r = unit(rng) * weights.sum();
  double acc = 0.0;
  for (Eigen::Index i = 0; i < weights.size(); ++i) {
    acc += weights[i];
    if (r < acc) return static_cast<std::size_t>(i);
  }
  return static_cast<std::size_t>(weights.size() - 1);
}

ReinforceResult reinforce_loss(ModelGraph& graph, const EncodedInput& encoded,
                               const NBestList& nbest,
                               const std::function<FeedbackSignal(const Hypothesis&)>& feedback,
                               const ReinforceOptions& options, Rng& rng) {
  if (nbest.empty()) throw std::invalid_argument("reinforce_loss: empty n-best list");
  ReinforceResult out;
  out.chosen = options.served_only ? 0 : sample_index(normalize_nbest(nbest), rng);
  out.feedback = feedback(nbest.hypotheses[out.chosen]);

  Var log_p;
  if (options.log_prob == ReinforceLogProb::kRaw) {
    log_p = sequence_logprob(graph, encoded, nbest.hypotheses[out.chosen].tokens);
  } else {
    std::vector<Var> lps;
    lps.reserve(nbest.size());
    for (const Hypothesis& h : nbest.hypotheses) lps.push_back(sequence_logprob(graph, encoded, h.tokens));
    log_p = element(normalized_log_weights(lps), static_cast<Eigen::Index>(out.chosen), 0);
  }
  out.loss = out.feedback.cost * log_p;
  return out;
}

}  // namespace fedsl
