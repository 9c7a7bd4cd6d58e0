#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "fedsl/checkpoint.hpp"
#include "fedsl/config.hpp"
#include "fedsl/corpus.hpp"
#include "fedsl/errors.hpp"
#include "fedsl/fedsim.hpp"
#include "fedsl/manifest.hpp"

namespace fs = std::filesystem;
using namespace fedsl;

namespace {

constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitDivergence = 4;

struct Common {
  std::string config;
  std::optional<std::uint64_t> seed;
  int workers = 1;
  std::string out;
  std::optional<int> eval_every;
  std::string corpus;
};

ExperimentConfig resolve_config(const Common& c) {
  ExperimentConfig cfg = load_config(c.config);
  if (c.seed) cfg.seed = *c.seed;
  if (c.eval_every) cfg.eval.every = *c.eval_every;
  cfg.validate();
  return cfg;
}

Corpus load_or_generate(const ExperimentConfig& cfg, const std::optional<fs::path>& file) {
  if (!file) return generate_corpus(cfg.corpus);
  Corpus c = import_corpus(*file);
  if (to_json(c.config) != to_json(cfg.corpus)) {
    throw ConfigError("corpus file " + file->string() + " was generated from a different corpus config");
  }
  return c;
}

std::optional<fs::path> optional_path(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return fs::absolute(s);
}

fs::path prepare_out(const std::string& out) {
  const fs::path dir = fs::absolute(out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string() + ": " + ec.message());
  return dir;
}

int cmd_gen_corpus(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c);
  const fs::path dir = prepare_out(c.out);
  const Corpus corpus = generate_corpus(cfg.corpus);
  const fs::path file = dir / "corpus.jsonl";
  export_corpus(corpus, file);

  RunManifest m;
  m.kind = "corpus";
  m.config = cfg;
  m.run_id = make_run_id(m.kind, cfg, std::nullopt);
  m.outputs["corpus"] = file;
  write_manifest(dir / "manifest.json", m);
  std::cout << "corpus " << m.run_id << ": " << corpus.pretrain.size() << " pretrain, " << corpus.device_streams.size()
            << " devices x " << cfg.corpus.utterances_per_device << ", eval " << corpus.eval_general_old.size() << "/"
            << corpus.eval_general_new.size() << "/" << corpus.eval_delta.size() << " -> " << file.string() << '\n';
  return 0;
}

int cmd_pretrain(const Common& c) {
  const ExperimentConfig cfg = resolve_config(c);
  const std::optional<fs::path> corpus_file = optional_path(c.corpus);
  const Corpus corpus = load_or_generate(cfg, corpus_file);
  const fs::path dir = prepare_out(c.out);

  const PretrainResult r = pretrain(cfg, corpus, c.workers, [](const PretrainEpoch& e) {
    std::cout << "epoch " << e.epoch << " loss " << e.train_loss << " general_old_wer " << e.wer << '\n';
  });
  const fs::path ckpt = dir / "initial.ckpt";
  save_checkpoint(ckpt, Checkpoint{r.params, 0, ModelRole::kStudent});
  {
    std::ofstream log(dir / "pretrain.tsv");
    if (!log) throw IoError("cannot write " + (dir / "pretrain.tsv").string());
    log.precision(17);
    log << "epoch\ttrain_loss\tgeneral_old_wer\n";
    for (const PretrainEpoch& e : r.history) log << e.epoch << '\t' << e.train_loss << '\t' << e.wer << '\n';
  }

  RunManifest m;
  m.kind = "pretrain";
  m.config = cfg;
  m.corpus_file = corpus_file;
  m.run_id = make_run_id(m.kind, cfg, corpus_file ? std::optional(file_digest(*corpus_file)) : std::nullopt);
  m.outputs["initial_checkpoint"] = ckpt;
  m.outputs["history"] = dir / "pretrain.tsv";
  write_manifest(dir / "manifest.json", m);
  if (cfg.pretrain.target_wer > 0.0 && !r.reached_target) {
    std::cerr << "warning: target WER " << cfg.pretrain.target_wer << " not reached; kept best epoch with WER "
              << r.best_wer << '\n';
  }
  std::cout << "initial model (WER " << r.best_wer << ") -> " << ckpt.string() << '\n';
  return 0;
}

struct RunInputs {
  ExperimentConfig config;
  std::optional<fs::path> corpus_file;
  fs::path initial;
};

int execute_run(const RunInputs& in, const Common& c) {
  const Corpus corpus = load_or_generate(in.config, in.corpus_file);
  const std::string digest = file_digest(in.initial);
  const Checkpoint init = load_checkpoint(in.initial);
  const fs::path dir = prepare_out(c.out);

  RunManifest m;
  m.kind = "run";
  m.config = in.config;
  m.corpus_file = in.corpus_file;
  m.initial_checkpoint = in.initial;
  m.initial_digest = digest;
  m.run_id = make_run_id(m.kind, in.config, digest);
  m.outputs["reports"] = dir / "reports.jsonl";
  m.outputs["trajectory"] = dir / "trajectory.tsv";
  m.outputs["summary"] = dir / "summary.tsv";
  m.outputs["student"] = dir / "checkpoints" / "student_final.ckpt";
  m.outputs["teacher"] = dir / "checkpoints" / "teacher_final.ckpt";
  write_manifest(dir / "manifest.json", m);

  RunOptions opts;
  opts.workers = c.workers;
  opts.out_dir = dir;
  opts.on_round = [](const RoundReport& r) {
    if (!r.snapshot) return;
    std::cout << "round " << r.round;
    for (EvalSet s : kEvalSets) {
      std::cout << ' ' << to_string(s) << " wer " << r.snapshot->at(s).wer << " werr " << r.snapshot->werr_of(s);
    }
    std::cout << '\n' << std::flush;
  };
  try {
    const ExperimentResult res = run_experiment(in.config, corpus, init.params, opts);
    std::cout << "run " << m.run_id << " done; forgetting " << (res.forgetting.forgetting ? "yes" : "no")
              << ", diverged " << (res.diverged_at ? "round " + std::to_string(*res.diverged_at) : "no") << '\n';
  } catch (const DivergenceAbort& e) {
    std::cerr << "aborted: " << e.what() << '\n';
    return kExitDivergence;
  }
  return 0;
}

int cmd_run(const Common& c, const std::string& init, const std::string& manifest) {
  RunInputs in;
  if (!manifest.empty()) {
    const RunManifest m = read_manifest(manifest);
    if (m.kind != "run" || !m.initial_checkpoint) throw ConfigError("manifest " + manifest + " does not describe a run");
    in.config = m.config;
    if (c.seed) in.config.seed = *c.seed;
    if (c.eval_every) in.config.eval.every = *c.eval_every;
    in.config.validate();
    in.corpus_file = m.corpus_file;
    in.initial = *m.initial_checkpoint;
    if (m.initial_digest && file_digest(in.initial) != *m.initial_digest) {
      throw IoError("initial checkpoint " + in.initial.string() + " changed since the manifest was written");
    }
  } else {
    if (c.config.empty() || init.empty()) throw ConfigError("run needs --config and --init, or --manifest");
    in.config = resolve_config(c);
    in.corpus_file = optional_path(c.corpus);
    in.initial = fs::absolute(init);
  }
  return execute_run(in, c);
}

// Final-snapshot WERR per set, read back from a run directory.
struct RunSummary {
  std::string name;
  std::string run_id;
  std::vector<double> werr;
};

RunSummary read_run(const fs::path& dir) {
  RunSummary s;
  s.name = dir.filename().string();
  s.run_id = read_manifest(dir / "manifest.json").run_id;
  std::ifstream in(dir / "trajectory.tsv");
  if (!in) throw IoError("missing trajectory in " + dir.string());
  std::string header, line, last;
  std::getline(in, header);
  while (std::getline(in, line)) {
    if (!line.empty()) last = line;
  }
  if (last.empty()) throw IoError("empty trajectory in " + dir.string());
  std::vector<std::string> cols, values;
  std::istringstream hs(header), ls(last);
  for (std::string t; std::getline(hs, t, '\t');) cols.push_back(t);
  for (std::string t; std::getline(ls, t, '\t');) values.push_back(t);
  for (EvalSet set : kEvalSets) {
    const std::string want = std::string(to_string(set)) + "_werr";
    bool found = false;
    for (std::size_t i = 0; i < cols.size() && i < values.size(); ++i) {
      if (cols[i] == want) {
        s.werr.push_back(std::stod(values[i]));
        found = true;
      }
    }
    if (!found) throw IoError("trajectory in " + dir.string() + " lacks column " + want);
  }
  return s;
}

int cmd_compare(const std::vector<std::string>& runs, const std::string& out) {
  std::vector<RunSummary> rows;
  for (const auto& r : runs) rows.push_back(read_run(r));
  std::ostringstream table;
  table << "run\trun_id";
  for (EvalSet s : kEvalSets) table << '\t' << to_string(s) << "_werr%";
  for (EvalSet s : kEvalSets) table << '\t' << to_string(s) << "_vs_first";
  table << '\n';
  char buf[32];
  for (const RunSummary& r : rows) {
    table << r.name << '\t' << r.run_id;
    for (double w : r.werr) {
      std::snprintf(buf, sizeof buf, "%.2f", 100.0 * w);
      table << '\t' << buf;
    }
    for (std::size_t i = 0; i < r.werr.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%+.2f", 100.0 * (r.werr[i] - rows.front().werr[i]));
      table << '\t' << buf;
    }
    table << '\n';
  }
  std::cout << table.str();
  if (!out.empty()) {
    std::ofstream f(out);
    if (!f) throw IoError("cannot write " + out);
    f << table.str();
  }
  return 0;
}

void add_common(CLI::App* app, Common& c, bool config_required) {
  auto* opt = app->add_option("--config", c.config, "Experiment config (JSON)");
  if (config_required) opt->required();
  app->add_option("--seed", c.seed, "Override the experiment seed");
  app->add_option("--workers", c.workers, "Device-level worker threads")->check(CLI::PositiveNumber);
  app->add_option("--out", c.out, "Output directory")->required();
  app->add_option("--eval-every", c.eval_every, "Evaluation cadence in rounds")->check(CLI::PositiveNumber);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated continual self-learning simulator for transducer ASR"};
  app.require_subcommand(1);

  Common gen, pre, run;
  auto* gen_cmd = app.add_subcommand("gen-corpus", "Generate and export a synthetic corpus");
  add_common(gen_cmd, gen, true);

  auto* pre_cmd = app.add_subcommand("pretrain", "Supervised training of the initial model");
  add_common(pre_cmd, pre, true);
  pre_cmd->add_option("--corpus", pre.corpus, "Corpus file from gen-corpus (default: regenerate)");

  std::string init, manifest;
  auto* run_cmd = app.add_subcommand("run", "Run a federated experiment");
  add_common(run_cmd, run, false);
  run_cmd->add_option("--corpus", run.corpus, "Corpus file from gen-corpus (default: regenerate)");
  run_cmd->add_option("--init", init, "Initial checkpoint from pretrain");
  run_cmd->add_option("--manifest", manifest, "Rerun from a run manifest");

  std::vector<std::string> runs;
  std::string compare_out;
  auto* cmp_cmd = app.add_subcommand("compare", "Tabulate final WERR of runs against the first");
  cmp_cmd->add_option("runs", runs, "Run directories")->required();
  cmp_cmd->add_option("--out", compare_out, "Also write the table here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_corpus(gen);
    if (*pre_cmd) return cmd_pretrain(pre);
    if (*run_cmd) return cmd_run(run, init, manifest);
    if (*cmp_cmd) return cmd_compare(runs, compare_out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << '\n';
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}
