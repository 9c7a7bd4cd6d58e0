#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "fedsl/config.hpp"
#include "fedsl/corpus.hpp"
#include "fedsl/eval_metrics.hpp"
#include "fedsl/optimizer.hpp"
#include "fedsl/param_vector.hpp"
#include "fedsl/transducer.hpp"

namespace fedsl {

struct LabeledExample {
  FeatureSequence features;
  TokenSequence labels;
};

struct BatchGradient {
  double loss = 0.0;  // sum of per-utterance losses / drawn
  Gradient gradient;
};

/// Supervised transducer loss summed over `batch` and divided by `drawn`.
BatchGradient supervised_gradient(const TransducerModel& model, std::span<const LabeledExample> batch,
                                  std::size_t drawn);

/// Per-device counters and mean losses of one local training call.
struct LocalStats {
  std::size_t utterances = 0;
  std::size_t accepted = 0;
  std::size_t rejected = 0;
  std::size_t steps = 0;
  double self_loss = 0.0;   // summed per step
  double weak_loss = 0.0;
  double rehearsal_loss = 0.0;
};

struct LocalResult {
  ParamDelta delta;
  LocalStats stats;
};

/// Runs N local SGD steps on one device. Per batch: the teacher decodes clean
/// features into a pseudo-label kept only inside the confidence band; the
/// student is trained on augmented features against it, plus the configured
/// weak-supervision loss on its own n-best. Returns w_final - w_start.
LocalResult local_train(const ExperimentConfig& config, const ParamVector& w_start, const ParamVector& teacher,
                        DeviceStream& stream, Rng& rng);

/// Supervised steps on labeled historical data (a cloud pseudo-device).
LocalResult rehearsal_train(const ExperimentConfig& config, const ParamVector& w_start,
                            const std::vector<Utterance>& history, const FeatureSynthesizer& synth, Rng& rng);

/// teacher <- rate * teacher + (1 - rate) * student when round % every == 0.
ParamVector ema_update(const ParamVector& teacher, const ParamVector& student, double rate, int round, int every);

struct ServerState {
  ParamVector global;
  ParamVector teacher;
  OptimizerState optimizer;
  int round = 0;

  static ServerState start(const ExperimentConfig& config, const ParamVector& initial);
};

struct RoundReport {
  int round = 0;
  int devices = 0;
  int pseudo_devices = 0;
  LocalStats totals;
  double mean_self_loss = 0.0;
  double mean_weak_loss = 0.0;
  double mean_rehearsal_loss = 0.0;
  bool teacher_updated = false;
  std::optional<EvalSnapshot> snapshot;
};

nlohmann::json to_json(const RoundReport& report);

/// Per-device streams of a corpus; the federated population.
class Population {
 public:
  Population(const Corpus& corpus, const FeatureSynthesizer& synth);
  std::size_t size() const { return streams_.size(); }
  DeviceStream& device(std::size_t id) { return streams_.at(id); }

 private:
  std::vector<DeviceStream> streams_;
};

/// Sorted device ids sampled without replacement for one round.
std::vector<int> sample_devices(std::uint64_t seed, int round, int population, int count);

/// One federated round; mutates `server` in place. Deltas are summed in
/// ascending device id with pseudo-devices last, so the result does not
/// depend on scheduling.
RoundReport run_round(ServerState& server, Population& population, const Corpus& corpus,
                      const FeatureSynthesizer& synth, const ExperimentConfig& config, int workers = 1);

/// Aggregates deltas exactly as run_round does: fixed-order sum over the
/// given deltas divided by their count, then one server optimizer step.
ParamVector apply_deltas(ServerState& server, const std::vector<ParamDelta>& deltas);

struct RunOptions {
  int workers = 1;
  std::optional<std::filesystem::path> out_dir;  // reports, trajectory, summary, checkpoints
  std::function<void(const RoundReport&)> on_round;
};

struct ExperimentResult {
  std::vector<RoundReport> reports;
  std::vector<EvalSnapshot> snapshots;
  ServerState final_state;
  std::optional<int> diverged_at;
  bool aborted = false;
  ForgettingSummary forgetting;
};

/// Thrown when divergence is detected and the config asks to abort.
class DivergenceAbort : public std::runtime_error {
 public:
  DivergenceAbort(int round, ExperimentResult result);
  int round() const { return round_; }
  const ExperimentResult& result() const { return result_; }

 private:
  int round_;
  ExperimentResult result_;
};

ExperimentResult run_experiment(const ExperimentConfig& config, const Corpus& corpus, const ParamVector& initial,
                                const RunOptions& options);

struct PretrainEpoch {
  int epoch = 0;
  double train_loss = 0.0;
  double wer = 0.0;  // general_old
};

struct PretrainResult {
  ParamVector params;
  std::vector<PretrainEpoch> history;
  bool reached_target = false;
  double best_wer = 1.0;
};

/// Supervised training on the pre-training split with Adam, stopping once
/// the old-set WER reaches the target. Returns the best epoch's parameters.
PretrainResult pretrain(const ExperimentConfig& config, const Corpus& corpus, int workers = 1,
                        const std::function<void(const PretrainEpoch&)>& on_epoch = {});

}  // namespace fedsl
