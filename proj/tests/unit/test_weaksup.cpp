#include <doctest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "fedsl/corpus.hpp"
#include "fedsl/weaksup.hpp"
#include "oracles.hpp"

using namespace fedsl;
using namespace fedsl::testing;

namespace {

// Minimum edit cost by trying every operation at every position.
std::size_t edit_paths(const TokenSequence& a, std::size_t i, const TokenSequence& b, std::size_t j) {
  if (i == a.size()) return b.size() - j;
  if (j == b.size()) return a.size() - i;
  std::size_t best = edit_paths(a, i + 1, b, j + 1) + (a[i] == b[j] ? 0 : 1);
  best = std::min(best, edit_paths(a, i + 1, b, j) + 1);
  best = std::min(best, edit_paths(a, i, b, j + 1) + 1);
  return best;
}

WeakLabel table_label() {
  const Vocabulary& v = Vocabulary::standard();
  WeakLabel l;
  l.slots = {{"artist", v.encode("beyonce")}, {"song", v.encode("halo")}, {"device", v.encode("main speaker")}};
  return l;
}

struct Fixture {
  TransducerModel model;
  FeatureSequence x;
  NBestList nbest;
};

Fixture fixture(std::uint64_t seed) {
  TransducerModel m = micro_model(seed, 2.0);
  FeatureSequence x = random_features(3, 2, seed + 50);
  NBestList nb = beam_decode(m, x, {8, 4, 3});
  return {m, x, nb};
}

Eigen::VectorXd expected_cost_gradient(const Fixture& f, const std::vector<double>& costs) {
  Tape tape;
  ModelGraph g(tape, f.model);
  EncodedInput enc = encode(g, f.x);
  Var loss = expected_cost_loss(g, enc, f.nbest, costs);
  return tape.backward(loss, f.model.params()).values();
}

double normalized_logprob(const TransducerModel& m, const FeatureSequence& x, const NBestList& nb, std::size_t k) {
  Eigen::VectorXd lp(static_cast<Eigen::Index>(nb.size()));
  for (std::size_t i = 0; i < nb.size(); ++i)
    lp[static_cast<Eigen::Index>(i)] = posterior_logprob(m, x, nb.hypotheses[i].tokens);
  return lp[static_cast<Eigen::Index>(k)] - logsumexp_of(lp);
}

}  // namespace

TEST_CASE("semantic cost of the worked example is two thirds") {
  const Vocabulary& v = Vocabulary::standard();
  const TokenSequence hyp = v.encode("play hello by beyond in main speaker");
  CHECK(semantic_cost(hyp, table_label()) == 2.0 / 3.0);
}

TEST_CASE("semantic cost takes k+1 values and falls as slot tokens appear") {
  const Vocabulary& v = Vocabulary::standard();
  const WeakLabel l = table_label();
  TokenSequence hyp = v.encode("play");
  double prev = semantic_cost(hyp, l);
  CHECK(prev == 1.0);
  for (const char* w : {"beyonce", "halo", "main", "speaker"}) {
    hyp.push_back(v.id(w));
    const double c = semantic_cost(hyp, l);
    CHECK(c <= prev);
    CHECK(std::abs(c * 3.0 - std::round(c * 3.0)) < 1e-15);
    prev = c;
  }
  CHECK(prev == 0.0);
  CHECK_THROWS_AS(semantic_cost(hyp, WeakLabel{}), std::invalid_argument);
}

TEST_CASE("edit distance matches exhaustive edit paths") {
  for (const TokenSequence& a : all_sequences(3, 4)) {
    for (const TokenSequence& b : all_sequences(2, 3)) {
      REQUIRE(edit_distance(a, b) == edit_paths(a, 0, b, 0));
    }
  }
  CHECK(wer_cost({0, 1}, {0, 1, 2, 2}) == 0.5);
  CHECK_THROWS_AS(wer_cost({0}, {}), std::invalid_argument);
}

TEST_CASE("binary feedback compares against the machine transcript") {
  WeakLabel l = table_label();
  CHECK_THROWS_AS(binary_ser_cost({1}, l), std::invalid_argument);
  l.transcript = TokenSequence{1, 2};
  CHECK(binary_ser_cost({1, 2}, l) == 0.0);
  CHECK(binary_ser_cost({1}, l) == 1.0);
}

TEST_CASE("truncated normal mean agrees with quadrature") {
  for (double sigma : {0.05, 0.1, 0.2, 0.4, 1.0}) {
    const int n = 200000;
    double num = 0.0, den = 0.0;
    for (int i = 0; i < n; ++i) {
      const double u = (i + 0.5) / n;
      const double w = std::exp(-0.5 * u * u / (sigma * sigma));
      num += u * w;
      den += w;
    }
    CHECK(NoiseModel(sigma).mean() == doctest::Approx(num / den).epsilon(1e-8));
  }
  CHECK(NoiseModel(0.0).mean() == 0.0);
  CHECK_THROWS_AS(NoiseModel(-0.1), std::invalid_argument);
}

TEST_CASE("noisy feedback stays in [0, 1] and flips toward the middle") {
  NoiseModel noise(0.4);
  Rng rng(3);
  for (int i = 0; i < 2000; ++i) {
    const double zero = add_noise(0.0, noise, rng);
    const double one = add_noise(1.0, noise, rng);
    REQUIRE(zero >= 0.0);
    REQUIRE(zero <= 1.0);
    REQUIRE(one >= 0.0);
    REQUIRE(one <= 1.0);
  }
  CHECK(add_noise(1.0, NoiseModel(0.0), rng) == 1.0);
  CHECK_THROWS_AS(add_noise(0.5, noise, rng), std::invalid_argument);
}

TEST_CASE("expected cost is the normalized-probability average of costs") {
  Fixture f = fixture(4);
  REQUIRE(f.nbest.size() >= 2);
  std::vector<double> costs;
  for (std::size_t i = 0; i < f.nbest.size(); ++i) costs.push_back(static_cast<double>(i % 3) / 2.0);
  const Eigen::VectorXd p = normalize_nbest(f.nbest);
  double want = 0.0;
  for (std::size_t i = 0; i < costs.size(); ++i) want += p[static_cast<Eigen::Index>(i)] * costs[i];
  CHECK(expected_cost_loss(f.model, f.x, f.nbest, costs) == doctest::Approx(want).epsilon(1e-12));
  CHECK(p.sum() == doctest::Approx(1.0).epsilon(1e-14));
  const std::vector<double> short_costs{1.0};
  CHECK_THROWS_AS(expected_cost_loss(f.model, f.x, f.nbest, short_costs), std::invalid_argument);
}

TEST_CASE("expected cost gradient matches central differences") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    Fixture f = fixture(seed);
    std::vector<double> costs;
    for (std::size_t i = 0; i < f.nbest.size(); ++i) costs.push_back(i == 0 ? 1.0 : 1.0 / static_cast<double>(i + 1));
    auto fn = [&](const ParamVector& p) {
      return expected_cost_loss(TransducerModel(f.model.dims(), p), f.x, f.nbest, costs);
    };
    CHECK(relative_error(expected_cost_gradient(f, costs), numeric_gradient(fn, f.model.params())) < 1e-6);
  }
}

TEST_CASE("constant costs give zero expected-cost gradient") {
  Fixture f = fixture(9);
  const std::vector<double> costs(f.nbest.size(), 0.7);
  CHECK(expected_cost_gradient(f, costs).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("reinforce gradient with a fixed sample matches central differences") {
  for (auto mode : {ReinforceLogProb::kNormalized, ReinforceLogProb::kRaw}) {
    Fixture f = fixture(6);
    const double cost = 0.75;
    Tape tape;
    ModelGraph g(tape, f.model);
    EncodedInput enc = encode(g, f.x);
    Rng rng(1);
    ReinforceResult r = reinforce_loss(
        g, enc, f.nbest, [&](const Hypothesis&) { return FeedbackSignal{cost, FeedbackKind::kSemantic, false, 0.0}; },
        {true, mode}, rng);
    CHECK(r.chosen == 0);
    Eigen::VectorXd analytic = tape.backward(r.loss, f.model.params()).values();
    auto fn = [&](const ParamVector& p) {
      TransducerModel m(f.model.dims(), p);
      if (mode == ReinforceLogProb::kRaw) return cost * posterior_logprob(m, f.x, f.nbest.top().tokens);
      return cost * normalized_logprob(m, f.x, f.nbest, 0);
    };
    CHECK(relative_error(analytic, numeric_gradient(fn, f.model.params())) < 1e-6);
  }
}

TEST_CASE("reinforce samples follow the normalized n-best distribution") {
  Fixture f = fixture(2);
  const Eigen::VectorXd p = normalize_nbest(f.nbest);
  std::vector<int> counts(f.nbest.size(), 0);
  Rng rng(17);
  const int n = 20000;
  for (int i = 0; i < n; ++i) ++counts[sample_index(p, rng)];
  for (std::size_t i = 0; i < counts.size(); ++i) {
    const double pi = p[static_cast<Eigen::Index>(i)];
    const double se = std::sqrt(pi * (1.0 - pi) / n);
    CHECK(std::abs(counts[i] / static_cast<double>(n) - pi) <= 4.0 * se + 1e-12);
  }
}

TEST_CASE("reinforce rejects an empty list") {
  TransducerModel m = micro_model(1);
  Tape tape;
  ModelGraph g(tape, m);
  EncodedInput enc = encode(g, random_features(2, 2, 1));
  Rng rng(1);
  CHECK_THROWS_AS(reinforce_loss(g, enc, NBestList{}, [](const Hypothesis&) { return FeedbackSignal{}; }, {}, rng),
                  std::invalid_argument);
}
