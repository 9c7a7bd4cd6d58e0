#include "fedsl/fedsim.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "fedsl/checkpoint.hpp"
#include "fedsl/decoder.hpp"
#include "fedsl/errors.hpp"
#include "fedsl/parallel.hpp"
#include "fedsl/weaksup.hpp"

namespace fedsl {

namespace {

using Json = nlohmann::json;

Var sum_terms(const std::vector<Var>& terms) {
  Var total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = total + terms[i];
  return total;
}

double sum_values(const std::vector<Var>& terms) {
  double s = 0.0;
  for (const Var& v : terms) s += v.scalar();
  return s;
}

bool needs_transcript(WeakMode mode) {
  return mode == WeakMode::kReinforceBinary || mode == WeakMode::kExpectedSemanticPlusWer;
}

Var weak_term(const ExperimentConfig& config, ModelGraph& graph, const TransducerModel& student,
              const DeviceSample& sample, Rng& rng) {
  const WeakConfig& w = config.weak;
  NBestList nbest = beam_decode(student, sample.features, config.decoder);
  EncodedInput encoded = encode(graph, sample.features);
  switch (w.mode) {
    case WeakMode::kExpectedSemantic:
    case WeakMode::kExpectedSemanticPlusWer: {
      std::vector<double> costs;
      for (const Hypothesis& h : nbest.hypotheses) {
        double c = semantic_cost(h.tokens, sample.weak);
        if (w.mode == WeakMode::kExpectedSemanticPlusWer) c += wer_cost(h.tokens, *sample.weak.transcript);
        costs.push_back(c);
      }
      return w.weight * expected_cost_loss(graph, encoded, nbest, costs);
    }
    case WeakMode::kReinforceSemantic:
    case WeakMode::kReinforceBinary: {
      const NoiseModel noise(w.sigma);
      // Own stream, so runs that differ only in sigma share every other draw.
      Rng noise_rng(rng());
      auto feedback = [&](const Hypothesis& h) {
        FeedbackSignal f;
        if (w.mode == WeakMode::kReinforceSemantic) {
          f.kind = FeedbackKind::kSemantic;
          f.cost = semantic_cost(h.tokens, sample.weak);
        } else {
          f.kind = FeedbackKind::kBinarySer;
          f.cost = binary_ser_cost(h.tokens, sample.weak);
          if (w.sigma > 0.0) {
            f.cost = add_noise(f.cost, noise, noise_rng);
            f.noisy = true;
            f.sigma = w.sigma;
          }
        }
        return f;
      };
      ReinforceOptions opts{w.served_only, w.log_prob};
      return w.weight * reinforce_loss(graph, encoded, nbest, feedback, opts, rng).loss;
    }
    case WeakMode::kOff:
      break;
  }
  throw std::logic_error("weak_term called with weak supervision off");
}

ParamVector sgd_update(const ParamVector& w, const Gradient& g, double lr) {
  require_aligned(w, g, "local update");
  ParamVector out = w;
  out.values() -= lr * g.values();
  if (!out.all_finite()) throw NumericError("local_sgd", "non-finite parameters after local step");
  return out;
}

Json metrics_json(const SetMetrics& m) {
  return {{"wer", m.wer}, {"ser", m.ser}, {"semantic_cost", m.semantic_cost},
          {"edits", m.edits}, {"ref_tokens", m.ref_tokens}, {"utterances", m.utterances}};
}

void write_trajectory(const std::filesystem::path& file, const std::vector<EvalSnapshot>& snaps) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "round";
  for (EvalSet s : kEvalSets) {
    const std::string n(to_string(s));
    out << '\t' << n << "_wer\t" << n << "_ser\t" << n << "_semantic\t" << n << "_werr";
  }
  out << '\n';
  out.precision(17);
  for (const EvalSnapshot& snap : snaps) {
    out << snap.round;
    for (EvalSet s : kEvalSets) {
      const SetMetrics& m = snap.at(s);
      out << '\t' << m.wer << '\t' << m.ser << '\t' << m.semantic_cost << '\t' << snap.werr_of(s);
    }
    out << '\n';
  }
}

void write_summary(const std::filesystem::path& file, const ExperimentResult& r) {
  std::ofstream out(file);
  if (!out) throw IoError("cannot write " + file.string());
  out << "set\tinitial_wer\tfinal_wer\twerr_percent\n";
  const EvalSnapshot& first = r.snapshots.front();
  const EvalSnapshot& last = r.snapshots.back();
  out.precision(6);
  out << std::fixed;
  for (EvalSet s : kEvalSets) {
    out << to_string(s) << '\t' << first.at(s).wer << '\t' << last.at(s).wer << '\t' << 100.0 * last.werr_of(s)
        << '\n';
  }
  out << "# forgetting\t" << (r.forgetting.forgetting ? "yes" : "no") << '\n';
  out << "# diverged_at\t" << (r.diverged_at ? std::to_string(*r.diverged_at) : "none") << '\n';
}

}  // namespace

BatchGradient supervised_gradient(const TransducerModel& model, std::span<const LabeledExample> batch,
                                  std::size_t drawn) {
  if (drawn == 0) throw std::invalid_argument("supervised_gradient: drawn batch size is zero");
  BatchGradient out;
  if (batch.empty()) {
    out.gradient = Gradient(model.params().layout_ptr());
    return out;
  }
  Tape tape;
  ModelGraph graph(tape, model);
  std::vector<Var> terms;
  for (const LabeledExample& ex : batch) {
    EncodedInput e = encode(graph, ex.features);
    terms.push_back(-1.0 * sequence_logprob(graph, e, ex.labels));
  }
  Var loss = (1.0 / static_cast<double>(drawn)) * sum_terms(terms);
  out.loss = loss.scalar();
  out.gradient = tape.backward(loss, model.params());
  return out;
}

LocalResult local_train(const ExperimentConfig& config, const ParamVector& w_start, const ParamVector& teacher,
                        DeviceStream& stream, Rng& rng) {
  require_aligned(w_start, teacher, "local_train");
  const TransducerModel teacher_model(config.model, teacher);
  const WeakMode mode = config.weak.mode;
  LocalResult result;
  ParamVector w = w_start;
  for (int step = 0; step < config.federation.local_steps; ++step) {
    std::vector<DeviceSample> batch =
        stream.next_batch(static_cast<std::size_t>(config.federation.batch_size), needs_transcript(mode));
    if (batch.empty()) break;
    ++result.stats.steps;
    const TransducerModel student(config.model, w);
    Tape tape;
    ModelGraph graph(tape, student);
    std::vector<Var> self_terms, weak_terms;
    for (const DeviceSample& s : batch) {
      ++result.stats.utterances;
      bool keep = true;
      if (config.self_label) {
        NBestList nbest = beam_decode(teacher_model, s.features, config.decoder);
        keep = confidence_filter(nbest, config.filter.low, config.filter.high, config.filter.measure);
        ++(keep ? result.stats.accepted : result.stats.rejected);
        if (keep) {
          EncodedInput e = encode(graph, augment(s.features, config.augment, rng));
          self_terms.push_back(-1.0 * sequence_logprob(graph, e, nbest.top().tokens));
        }
      }
      if (keep && mode != WeakMode::kOff) weak_terms.push_back(weak_term(config, graph, student, s, rng));
    }
    const double scale = 1.0 / static_cast<double>(batch.size());
    result.stats.self_loss += scale * sum_values(self_terms);
    result.stats.weak_loss += scale * sum_values(weak_terms);
    std::vector<Var> terms = self_terms;
    terms.insert(terms.end(), weak_terms.begin(), weak_terms.end());
    if (terms.empty()) continue;
    Gradient g = tape.backward(scale * sum_terms(terms), w);
    w = sgd_update(w, g, config.federation.local_lr);
  }
  result.delta = delta_between(w, w_start);
  return result;
}

LocalResult rehearsal_train(const ExperimentConfig& config, const ParamVector& w_start,
                            const std::vector<Utterance>& history, const FeatureSynthesizer& synth, Rng& rng) {
  if (history.empty()) throw std::invalid_argument("rehearsal_train: no labeled history");
  LocalResult result;
  ParamVector w = w_start;
  const auto b = static_cast<std::size_t>(config.federation.batch_size);
  std::uniform_int_distribution<std::size_t> pick(0, history.size() - 1);
  for (int step = 0; step < config.federation.local_steps; ++step) {
    std::vector<LabeledExample> batch;
    for (std::size_t i = 0; i < b; ++i) {
      const Utterance& u = history[pick(rng)];
      batch.push_back({augment(synth.features_of(u), config.augment, rng), u.tokens});
    }
    BatchGradient g = supervised_gradient(TransducerModel(config.model, w), batch, b);
    result.stats.utterances += b;
    result.stats.rehearsal_loss += g.loss;
    ++result.stats.steps;
    w = sgd_update(w, g.gradient, config.federation.local_lr);
  }
  result.delta = delta_between(w, w_start);
  return result;
}

ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double rate, int round, int every) {
  if (!(rate > 0.0 && rate < 1.0)) throw std::invalid_argument("ema rate must lie in (0, 1)");
  if (every < 1) throw std::invalid_argument("ema update frequency must be >= 1");
  require_aligned(teacher, student, "ema_update");
  if (round % every != 0) return teacher;
  ParamVector out = teacher;
  out.values() = rate * teacher.values() + (1.0 - rate) * student.values();
  return out;
}

ServerState ServerState::start(const ExperimentConfig& config, const ParamVector& initial) {
  ServerState s;
  s.global = initial;
  s.teacher = initial;
  s.optimizer = config.federation.server_optimizer == OptimizerKind::kAdam
                    ? OptimizerState::adam(config.federation.server_lr)
                    : OptimizerState::sgd(config.federation.server_lr);
  return s;
}

Json to_json(const RoundReport& r) {
  Json j = {{"round", r.round},
            {"devices", r.devices},
            {"pseudo_devices", r.pseudo_devices},
            {"utterances", r.totals.utterances},
            {"accepted", r.totals.accepted},
            {"rejected", r.totals.rejected},
            {"mean_self_loss", r.mean_self_loss},
            {"mean_weak_loss", r.mean_weak_loss},
            {"mean_rehearsal_loss", r.mean_rehearsal_loss},
            {"teacher_updated", r.teacher_updated}};
  if (r.snapshot) {
    Json sets = Json::object();
    for (EvalSet s : kEvalSets) {
      Json m = metrics_json(r.snapshot->at(s));
      m["werr"] = r.snapshot->werr_of(s);
      sets[std::string(to_string(s))] = m;
    }
    j["eval"] = sets;
  }
  return j;
}

Population::Population(const Corpus& corpus, const FeatureSynthesizer& synth) {
  streams_.reserve(corpus.device_streams.size());
  for (std::size_t d = 0; d < corpus.device_streams.size(); ++d) {
    streams_.emplace_back(static_cast<int>(d), corpus.device_streams[d], synth);
  }
}

std::vector<int> sample_devices(std::uint64_t seed, int round, int population, int count) {
  if (count < 1 || count > population) throw std::invalid_argument("cannot sample " + std::to_string(count) +
                                                                   " of " + std::to_string(population) + " devices");
  std::vector<int> ids(static_cast<std::size_t>(population));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(mix_seed(seed, static_cast<std::uint64_t>(round), 0x5A3Du));
  for (int i = 0; i < count; ++i) {
    std::uniform_int_distribution<int> pick(i, population - 1);
    std::swap(ids[static_cast<std::size_t>(i)], ids[static_cast<std::size_t>(pick(rng))]);
  }
  ids.resize(static_cast<std::size_t>(count));
  std::sort(ids.begin(), ids.end());
  return ids;
}

ParamVector apply_deltas(ServerState& server, const std::vector<ParamDelta>& deltas) {
  if (deltas.empty()) throw std::invalid_argument("round has no participants");
  ParamDelta mean(server.global.layout_ptr());
  for (const ParamDelta& d : deltas) {
    require_aligned(mean, d, "aggregation");
    mean.values() += d.values();
  }
  mean.values() /= static_cast<double>(deltas.size());
  server.global = optimizer_step(server.optimizer, server.global, pseudo_gradient(mean));
  return server.global;
}

RoundReport run_round(ServerState& server, Population& population, const Corpus& corpus,
                      const FeatureSynthesizer& synth, const ExperimentConfig& config, int workers) {
  const int round = server.round + 1;
  const std::vector<int> ids = sample_devices(config.seed, round, static_cast<int>(population.size()),
                                              config.federation.devices_per_round);
  const int pseudo = config.federation.pseudo_devices();
  const std::size_t n = ids.size() + static_cast<std::size_t>(pseudo);
  std::vector<LocalResult> results = parallel_map(n, workers, [&](std::size_t i) {
    if (i < ids.size()) {
      Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(round), static_cast<std::uint64_t>(ids[i])));
      return local_train(config, server.global, server.teacher, population.device(static_cast<std::size_t>(ids[i])),
                         rng);
    }
    Rng rng(mix_seed(config.seed, static_cast<std::uint64_t>(round), 1000000u + (i - ids.size())));
    return rehearsal_train(config, server.global, corpus.pretrain, synth, rng);
  });

  RoundReport report;
  report.round = round;
  report.devices = static_cast<int>(ids.size());
  report.pseudo_devices = pseudo;
  std::vector<ParamDelta> deltas;
  std::size_t device_steps = 0, pseudo_steps = 0;
  for (std::size_t i = 0; i < results.size(); ++i) {
    const LocalStats& s = results[i].stats;
    report.totals.utterances += s.utterances;
    report.totals.accepted += s.accepted;
    report.totals.rejected += s.rejected;
    report.totals.steps += s.steps;
    report.totals.self_loss += s.self_loss;
    report.totals.weak_loss += s.weak_loss;
    report.totals.rehearsal_loss += s.rehearsal_loss;
    (i < ids.size() ? device_steps : pseudo_steps) += s.steps;
    deltas.push_back(std::move(results[i].delta));
  }
  if (device_steps > 0) {
    report.mean_self_loss = report.totals.self_loss / static_cast<double>(device_steps);
    report.mean_weak_loss = report.totals.weak_loss / static_cast<double>(device_steps);
  }
  if (pseudo_steps > 0) report.mean_rehearsal_loss = report.totals.rehearsal_loss / static_cast<double>(pseudo_steps);

  apply_deltas(server, deltas);
  server.round = round;
  if (config.ema.enabled && round % config.ema.update_every == 0) {
    server.teacher = ema_update(server.teacher, server.global, config.ema.rate, round, config.ema.update_every);
    report.teacher_updated = true;
  }
  return report;
}

DivergenceAbort::DivergenceAbort(int round, ExperimentResult result)
    : std::runtime_error("divergence detected at round " + std::to_string(round)),
      round_(round),
      result_(std::move(result)) {}

ExperimentResult run_experiment(const ExperimentConfig& config, const Corpus& corpus, const ParamVector& initial,
                                const RunOptions& options) {
  config.validate();
  const FeatureSynthesizer synth(corpus.config);
  Population population(corpus, synth);
  const DecodeOptions eval_opts{config.eval.beam, 1, config.decoder.max_symbols_per_frame};
  DivergenceDetector detector(config.eval.divergence_threshold, config.eval.divergence_patience);

  ExperimentResult result;
  ServerState server = ServerState::start(config, initial);
  auto snapshot = [&](int round) {
    const EvalSnapshot* base = result.snapshots.empty() ? nullptr : &result.snapshots.front();
    return take_snapshot(round, TransducerModel(config.model, server.global), corpus, synth, eval_opts, base,
                         options.workers);
  };
  result.snapshots.push_back(snapshot(0));

  std::ofstream reports;
  const auto& dir = options.out_dir;
  if (dir) {
    std::filesystem::create_directories(*dir / "checkpoints");
    reports.open(*dir / "reports.jsonl", std::ios::trunc);
    if (!reports) throw IoError("cannot write " + (*dir / "reports.jsonl").string());
  }
  auto save = [&](const std::string& tag) {
    save_checkpoint(*dir / "checkpoints" / ("student_" + tag + ".ckpt"),
                    Checkpoint{server.global, server.round, ModelRole::kStudent});
    save_checkpoint(*dir / "checkpoints" / ("teacher_" + tag + ".ckpt"),
                    Checkpoint{server.teacher, server.round, ModelRole::kTeacher});
  };
  auto finish = [&] {
    result.final_state = server;
    if (result.snapshots.size() >= 2) {
      result.forgetting = forgetting_report(result.snapshots, config.eval.forgetting_threshold);
    }
    if (dir) {
      save("final");
      write_trajectory(*dir / "trajectory.tsv", result.snapshots);
      write_summary(*dir / "summary.tsv", result);
    }
  };

  const int rounds = config.federation.rounds;
  for (int r = 1; r <= rounds; ++r) {
    RoundReport report = run_round(server, population, corpus, synth, config, options.workers);
    if (r % config.eval.every == 0 || r == rounds) {
      result.snapshots.push_back(snapshot(r));
      report.snapshot = result.snapshots.back();
      const bool was = detector.triggered();
      if (detector.observe(r, report.snapshot->werr_of(EvalSet::kGeneralNew)) && !was) {
        result.diverged_at = detector.fired_round();
      }
    }
    if (reports.is_open()) reports << to_json(report).dump() << '\n' << std::flush;
    if (dir && config.federation.checkpoint_every > 0 && r % config.federation.checkpoint_every == 0) {
      save("round" + std::to_string(r));
    }
    if (options.on_round) options.on_round(report);
    result.reports.push_back(std::move(report));
    if (result.diverged_at && config.eval.abort_on_divergence) {
      result.aborted = true;
      finish();
      throw DivergenceAbort(*result.diverged_at, std::move(result));
    }
  }
  finish();
  return result;
}

PretrainResult pretrain(const ExperimentConfig& config, const Corpus& corpus, int workers,
                        const std::function<void(const PretrainEpoch&)>& on_epoch) {
  const PretrainConfig& pc = config.pretrain;
  const FeatureSynthesizer synth(corpus.config);
  const DecodeOptions eval_opts{config.eval.beam, 1, config.decoder.max_symbols_per_frame};
  if (corpus.pretrain.empty()) throw std::invalid_argument("pretrain: no labeled data");

  std::vector<LabeledExample> data;
  data.reserve(corpus.pretrain.size());
  for (const Utterance& u : corpus.pretrain) data.push_back({synth.features_of(u), u.tokens});

  PretrainResult result;
  result.params = init_params(config.model, pc.init_seed);
  ParamVector w = result.params;
  result.best_wer = corpus_wer(TransducerModel(config.model, w), synth, corpus.eval_general_old, eval_opts, workers);
  result.reached_target = result.best_wer <= pc.target_wer;
  OptimizerState opt = OptimizerState::adam(pc.lr);
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  const auto b = static_cast<std::size_t>(pc.batch_size);

  const bool early_stop = pc.target_wer > 0.0;
  for (int epoch = 1; epoch <= pc.epochs && !(early_stop && result.reached_target); ++epoch) {
    Rng rng(mix_seed(pc.init_seed, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    double loss = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += b) {
      const std::size_t end = std::min(order.size(), start + b);
      const TransducerModel model(config.model, w);
      std::vector<BatchGradient> parts = parallel_map(end - start, workers, [&](std::size_t i) {
        return supervised_gradient(model, std::span<const LabeledExample>(&data[order[start + i]], 1), end - start);
      });
      Gradient g(w.layout_ptr());
      for (const BatchGradient& p : parts) {
        g.values() += p.gradient.values();
        loss += p.loss;
      }
      ++batches;
      w = adam_step(opt, w, g);
    }
    PretrainEpoch e;
    e.epoch = epoch;
    e.train_loss = loss / static_cast<double>(batches);
    e.wer = corpus_wer(TransducerModel(config.model, w), synth, corpus.eval_general_old, eval_opts, workers);
    result.history.push_back(e);
    if (on_epoch) on_epoch(e);
    if (e.wer < result.best_wer) {
      result.best_wer = e.wer;
      result.params = w;
    }
    result.reached_target = result.best_wer <= pc.target_wer;
  }
  return result;
}

}  // namespace fedsl
