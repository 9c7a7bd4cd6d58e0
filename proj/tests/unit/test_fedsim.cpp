#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "fedsl/fedsim.hpp"
#include "fedsl/weaksup.hpp"

using namespace fedsl;

namespace {

ExperimentConfig tiny_config() {
  ExperimentConfig c;
  c.seed = 3;
  c.model.encoder_hidden = 4;
  c.model.embedding_dim = 3;
  c.model.prediction_hidden = 4;
  c.model.joint_hidden = 5;
  c.corpus.devices = 4;
  c.corpus.utterances_per_device = 12;
  c.corpus.pretrain_size = 30;
  c.corpus.eval_size = 6;
  c.federation.devices_per_round = 2;
  c.federation.batch_size = 3;
  c.federation.rounds = 4;
  c.eval.every = 2;
  c.decoder = {3, 2, 3};
  c.eval.beam = 2;
  return c;
}

// Accept every pseudo-label, no augmentation, SGD server with rate one.
ExperimentConfig fedsgd_config() {
  ExperimentConfig c = tiny_config();
  c.filter.low = 0.0;
  c.filter.high = 1.0;
  c.augment = {0, 0.0};
  c.federation.server_optimizer = OptimizerKind::kSgd;
  c.federation.server_lr = 1.0;
  c.federation.local_lr = 0.1;
  return c;
}

ParamVector start_params(const ExperimentConfig& c, std::uint64_t seed = 5) {
  ParamVector p = init_params(c.model, seed);
  p.values() *= 2.0;
  return p;
}

ParamVector random_like(const ParamVector& p, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  ParamVector out = p;
  for (Eigen::Index i = 0; i < out.size(); ++i) out.values()[i] = n(rng);
  return out;
}

}  // namespace

TEST_CASE("ema update is a convex step only on schedule") {
  ParamVector t = init_params(tiny_config().model, 1);
  ParamVector s = t;
  t.values().setConstant(1.0);
  s.values().setZero();
  const ParamVector u = ema_update(t, s, 0.999, 10, 10);
  CHECK((u.values().array() == 0.999).all());
  CHECK(ema_update(t, s, 0.999, 7, 10).values() == t.values());
  CHECK_THROWS_AS(ema_update(t, s, 1.0, 10, 10), std::invalid_argument);
  CHECK_THROWS_AS(ema_update(t, s, 0.0, 10, 10), std::invalid_argument);
}

TEST_CASE("iterated ema matches the geometric closed form") {
  const ParamVector t0 = random_like(init_params(tiny_config().model, 1), 1);
  const ParamVector s = random_like(t0, 2);
  for (double rate : {0.5, 0.975, 0.999}) {
    ParamVector t = t0;
    int applied = 0;
    for (int r = 1; r <= 100; ++r) {
      const ParamVector before = t;
      t = ema_update(t, s, rate, r, 10);
      if (r % 10 == 0) {
        ++applied;
      } else {
        REQUIRE(t.values() == before.values());
      }
    }
    const double dk = std::pow(rate, applied);
    const Eigen::VectorXd closed = dk * t0.values() + (1.0 - dk) * s.values();
    CHECK((t.values() - closed).lpNorm<Eigen::Infinity>() < 1e-12);
  }
}

TEST_CASE("device sampling is sorted, distinct and seeded") {
  const auto a = sample_devices(7, 3, 100, 20);
  CHECK(a.size() == 20);
  CHECK(std::is_sorted(a.begin(), a.end()));
  CHECK(std::set<int>(a.begin(), a.end()).size() == 20);
  CHECK(a == sample_devices(7, 3, 100, 20));
  CHECK(a != sample_devices(7, 4, 100, 20));
  CHECK_THROWS_AS(sample_devices(7, 1, 10, 11), std::invalid_argument);
}

TEST_CASE("zero local steps give a zero delta") {
  ExperimentConfig c = tiny_config();
  c.federation.local_steps = 0;
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  DeviceStream s(0, k.device_streams[0], synth);
  const ParamVector w = start_params(c);
  Rng rng(1);
  LocalResult r = local_train(c, w, w, s, rng);
  CHECK(r.delta.values().isZero(0.0));
  CHECK(s.consumed() == 0);
}

TEST_CASE("self-labeling with teacher equal to student stays finite and bounded") {
  ExperimentConfig c = fedsgd_config();
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  DeviceStream s(1, k.device_streams[1], synth);
  const ParamVector w = start_params(c);
  Rng rng(1);
  LocalResult r = local_train(c, w, w, s, rng);
  CHECK(r.delta.all_finite());
  CHECK(r.delta.values().norm() > 0.0);
  CHECK(r.delta.values().norm() < 100.0);
  CHECK(r.stats.accepted == 3);
}

TEST_CASE("one device with SGD rate one lands on its local parameters") {
  ExperimentConfig c = fedsgd_config();
  c.federation.devices_per_round = 1;
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  const ParamVector w = start_params(c);

  const int id = sample_devices(c.seed, 1, c.corpus.devices, 1).front();
  DeviceStream stream(id, k.device_streams[static_cast<std::size_t>(id)], synth);
  Rng rng(mix_seed(c.seed, 1, static_cast<std::uint64_t>(id)));
  LocalResult local = local_train(c, w, w, stream, rng);
  ParamVector expected = w;
  expected.values() += local.delta.values();

  Population pop(k, synth);
  ServerState server = ServerState::start(c, w);
  run_round(server, pop, k, synth, c);
  CHECK((server.global.values() - expected.values()).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("a FedSGD round equals a centralized step on the union batch") {
  ExperimentConfig c = fedsgd_config();
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  const ParamVector w = start_params(c);
  const TransducerModel model(c.model, w);

  std::vector<LabeledExample> union_batch;
  for (int id : sample_devices(c.seed, 1, c.corpus.devices, c.federation.devices_per_round)) {
    for (int i = 0; i < c.federation.batch_size; ++i) {
      const FeatureSequence x = synth.features_of(k.device_streams[static_cast<std::size_t>(id)][static_cast<std::size_t>(i)]);
      union_batch.push_back({x, beam_decode(model, x, c.decoder).top().tokens});
    }
  }
  const BatchGradient g = supervised_gradient(model, union_batch, union_batch.size());
  Eigen::VectorXd centralized = w.values() - c.federation.local_lr * g.gradient.values();

  Population pop(k, synth);
  ServerState server = ServerState::start(c, w);
  run_round(server, pop, k, synth, c);
  CHECK((server.global.values() - centralized).lpNorm<Eigen::Infinity>() < 1e-10);
}

TEST_CASE("rehearsal step is minus the rate times the supervised gradient") {
  ExperimentConfig c = tiny_config();
  c.augment = {0, 0.0};
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  const ParamVector w = start_params(c);
  Rng rng(11);
  LocalResult r = rehearsal_train(c, w, k.pretrain, synth, rng);

  Rng replay(11);
  std::uniform_int_distribution<std::size_t> pick(0, k.pretrain.size() - 1);
  std::vector<LabeledExample> batch;
  for (int i = 0; i < c.federation.batch_size; ++i) {
    const Utterance& u = k.pretrain[pick(replay)];
    batch.push_back({synth.features_of(u), u.tokens});
  }
  const BatchGradient g = supervised_gradient(TransducerModel(c.model, w), batch, batch.size());
  CHECK((r.delta.values() + c.federation.local_lr * g.gradient.values()).lpNorm<Eigen::Infinity>() < 1e-14);
  CHECK_THROWS_AS(rehearsal_train(c, w, {}, synth, rng), std::invalid_argument);
}

TEST_CASE("weak-only training follows the expected-cost gradient") {
  ExperimentConfig c = tiny_config();
  c.self_label = false;
  c.weak.mode = WeakMode::kExpectedSemantic;
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  const ParamVector w = start_params(c);
  const TransducerModel student(c.model, w);

  Tape tape;
  ModelGraph graph(tape, student);
  std::vector<Var> terms;
  for (int i = 0; i < c.federation.batch_size; ++i) {
    const Utterance& u = k.device_streams[2][static_cast<std::size_t>(i)];
    const FeatureSequence x = synth.features_of(u);
    const NBestList nb = beam_decode(student, x, c.decoder);
    std::vector<double> costs;
    for (const Hypothesis& h : nb.hypotheses) costs.push_back(semantic_cost(h.tokens, WeakLabel{u.slots, {}}));
    EncodedInput e = encode(graph, x);
    terms.push_back(expected_cost_loss(graph, e, nb, costs));
  }
  Var total = terms[0];
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  const Gradient g = tape.backward((1.0 / static_cast<double>(terms.size())) * total, w);

  DeviceStream s(2, k.device_streams[2], synth);
  Rng rng(1);
  LocalResult r = local_train(c, w, w, s, rng);
  CHECK((r.delta.values() + c.federation.local_lr * g.values()).lpNorm<Eigen::Infinity>() < 1e-12);
  CHECK(r.stats.accepted == 0);
}

TEST_CASE("aggregation does not depend on device order") {
  ExperimentConfig c = tiny_config();
  const ParamVector w = start_params(c);
  std::vector<ParamDelta> deltas;
  for (std::uint64_t i = 0; i < 7; ++i) {
    ParamDelta d(w.layout_ptr());
    d.values() = random_like(w, 100 + i).values() * 1e-3;
    deltas.push_back(d);
  }
  std::vector<ParamDelta> reversed(deltas.rbegin(), deltas.rend());
  ServerState a = ServerState::start(c, w), b = ServerState::start(c, w);
  apply_deltas(a, deltas);
  apply_deltas(b, reversed);
  CHECK((a.global.values() - b.global.values()).lpNorm<Eigen::Infinity>() < 1e-12);
}

TEST_CASE("pseudo-devices weigh in by their share of participants") {
  ExperimentConfig c = tiny_config();
  c.federation.server_optimizer = OptimizerKind::kSgd;
  c.federation.server_lr = 1.0;
  const ParamVector w = start_params(c);
  std::vector<ParamDelta> deltas(400, ParamDelta(w.layout_ptr()));
  for (int i = 0; i < 40; ++i) {
    ParamDelta d(w.layout_ptr());
    d.values().setOnes();
    deltas.push_back(d);
  }
  ServerState s = ServerState::start(c, w);
  apply_deltas(s, deltas);
  CHECK(((s.global.values() - w.values()).array() - 40.0 / 440.0).abs().maxCoeff() < 1e-15);
  CHECK_THROWS_AS(apply_deltas(s, {}), std::invalid_argument);
}

TEST_CASE("a round without data leaves the global model unchanged") {
  ExperimentConfig c = tiny_config();
  c.federation.local_steps = 0;
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  Population pop(k, synth);
  const ParamVector w = start_params(c);
  ServerState server = ServerState::start(c, w);
  RoundReport r = run_round(server, pop, k, synth, c);
  CHECK(server.global.values() == w.values());
  CHECK(r.totals.utterances == 0);
  CHECK(server.round == 1);
}

TEST_CASE("exhausted streams contribute zero deltas") {
  ExperimentConfig c = tiny_config();
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  DeviceStream s(0, k.device_streams[0], synth);
  while (!s.next_batch(100, false).empty()) {
  }
  const ParamVector w = start_params(c);
  Rng rng(1);
  LocalResult r = local_train(c, w, w, s, rng);
  CHECK(r.delta.values().isZero(0.0));
  CHECK(r.stats.steps == 0);
}

TEST_CASE("teacher moves only on update rounds and stays put when frozen") {
  ExperimentConfig c = tiny_config();
  c.ema.update_every = 2;
  c.ema.rate = 0.5;
  const Corpus k = generate_corpus(c.corpus);
  FeatureSynthesizer synth(k.config);
  Population pop(k, synth);
  const ParamVector w = start_params(c);
  ServerState server = ServerState::start(c, w);
  CHECK(server.teacher.values() == w.values());
  for (int r = 1; r <= 4; ++r) {
    const ParamVector before = server.teacher;
    RoundReport rep = run_round(server, pop, k, synth, c);
    CHECK(rep.teacher_updated == (r % 2 == 0));
    CHECK((server.teacher.values() == before.values()) == (r % 2 != 0));
  }

  c.ema.enabled = false;
  Population pop2(k, synth);
  ServerState frozen = ServerState::start(c, w);
  for (int r = 1; r <= 4; ++r) run_round(frozen, pop2, k, synth, c);
  CHECK(frozen.teacher.values() == w.values());
  CHECK(frozen.global.values() != w.values());
}

TEST_CASE("experiments are deterministic and independent of worker count") {
  ExperimentConfig c = tiny_config();
  c.weak.mode = WeakMode::kReinforceBinary;
  c.weak.sigma = 0.2;
  c.federation.rehearsal = true;
  c.federation.rehearsal_ratio = 0.5;
  const Corpus k = generate_corpus(c.corpus);
  const ParamVector w = start_params(c);
  ExperimentResult a = run_experiment(c, k, w, {1, std::nullopt, {}});
  ExperimentResult b = run_experiment(c, k, w, {3, std::nullopt, {}});
  REQUIRE(a.reports.size() == 4);
  CHECK(a.reports[0].pseudo_devices == 1);
  for (std::size_t i = 0; i < a.reports.size(); ++i) CHECK(to_json(a.reports[i]) == to_json(b.reports[i]));
  CHECK(a.final_state.global.values() == b.final_state.global.values());
  CHECK(a.final_state.teacher.values() == b.final_state.teacher.values());
  CHECK(a.snapshots.size() == 3);
  CHECK(a.snapshots[1].round == 2);
}

TEST_CASE("experiment output directory holds reports, trajectory and checkpoints") {
  ExperimentConfig c = tiny_config();
  const Corpus k = generate_corpus(c.corpus);
  const auto dir = std::filesystem::temp_directory_path() / "fedsl_test_run";
  std::filesystem::remove_all(dir);
  run_experiment(c, k, start_params(c), {1, dir, {}});
  std::ifstream in(dir / "reports.jsonl");
  int lines = 0;
  for (std::string line; std::getline(in, line); ++lines) {
    const auto j = nlohmann::json::parse(line);
    CHECK(j.at("round").get<int>() == lines + 1);
    CHECK(j.contains("teacher_updated"));
    CHECK(j.contains("eval") == ((lines + 1) % 2 == 0));
  }
  CHECK(lines == 4);
  CHECK(std::filesystem::exists(dir / "trajectory.tsv"));
  CHECK(std::filesystem::exists(dir / "summary.tsv"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "student_final.ckpt"));
  CHECK(std::filesystem::exists(dir / "checkpoints" / "teacher_final.ckpt"));
  std::filesystem::remove_all(dir);
}

TEST_CASE("pretraining with zero epochs returns the random initialization") {
  ExperimentConfig c = tiny_config();
  c.pretrain.epochs = 0;
  const Corpus k = generate_corpus(c.corpus);
  PretrainResult p = pretrain(c, k);
  CHECK(p.params.values() == init_params(c.model, c.pretrain.init_seed).values());
  CHECK(p.history.empty());
}
