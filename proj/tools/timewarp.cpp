// Command-line front end. Talks to the library only through timewarp.h.

#include "timewarp/timewarp.h"

#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
  std::optional<int> threads;
  std::optional<unsigned long long> seed;
  std::string log_level = "info";
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
  cmd->add_option("--set", c.overrides, "Override a config key, e.g. --set training.batch_size=32 (repeatable)");
  cmd->add_option("--threads", c.threads, "Worker threads (0 = all cores)");
  cmd->add_option("--seed", c.seed, "Override the run seed");
  cmd->add_option("--log-level", c.log_level, "trace, debug, info, warn, error or off");
}

using RunPtr = std::unique_ptr<tw_run, decltype(&tw_run_free)>;

int report_error(int status, const char* what) {
  std::fprintf(stderr, "timewarp %s: %s\n", what, tw_last_error());
  return status;
}

std::string report(const tw_run* run) {
  size_t needed = 0;
  tw_run_report(run, nullptr, 0, &needed);
  std::string text(needed, '\0');
  tw_run_report(run, text.data(), text.size(), &needed);
  text.resize(needed ? needed - 1 : 0);
  return text;
}

/// Opens the run with --set overrides first and dedicated flags after them.
int open_run(const Common& c, std::vector<std::string> extra, RunPtr& out) {
  std::vector<std::string> all = c.overrides;
  if (c.threads) all.push_back("threads=" + std::to_string(*c.threads));
  if (c.seed) all.push_back("seed=" + std::to_string(*c.seed));
  all.insert(all.end(), extra.begin(), extra.end());
  std::vector<const char*> ptrs;
  for (const auto& s : all) ptrs.push_back(s.c_str());
  tw_set_log_level(c.log_level.c_str());
  tw_run* run = nullptr;
  const int status = tw_run_open(c.config.c_str(), ptrs.data(), ptrs.size(), &run);
  if (status != TW_OK) return report_error(status, "config");
  out.reset(run);
  return TW_OK;
}

template <typename T>
void add_flag_override(std::vector<std::string>& extra, const std::optional<T>& v, const std::string& key) {
  if (v) extra.push_back(key + "=" + std::to_string(*v));
}

const char* or_null(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"timewarp: transferable conditional flows as MCMC proposals for molecular dynamics"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tw_version()));

  Common common;

  auto* gen = app.add_subcommand("gen-data", "Simulate Langevin trajectories and write the pair dataset");
  add_common(gen, common);

  auto* train = app.add_subcommand("train", "Train the flow (likelihood stage, then acceptance fine-tuning)");
  add_common(train, common);
  std::string stage = "likelihood";
  bool resume = false, dry_run = false;
  std::optional<long long> train_steps;
  train->add_option("--stage", stage, "likelihood or acceptance")->check(CLI::IsMember({"likelihood", "acceptance"}));
  train->add_flag("--resume", resume, "Continue from the latest checkpoint");
  train->add_flag("--dry-run", dry_run, "Build the model, print the parameter count and exit");
  train->add_option("--steps", train_steps, "Optimizer steps for this stage");

  auto* sample = app.add_subcommand("sample", "Run the MH-corrected batched sampler");
  add_common(sample, common);
  std::string checkpoint, output;
  std::optional<long long> steps;
  std::optional<int> batch;
  sample->add_option("--checkpoint", checkpoint, "Checkpoint (default: latest)");
  sample->add_option("--output", output, "Chain file");
  sample->add_option("--steps", steps, "Chain length M");
  sample->add_option("--batch", batch, "Proposals per batch B");

  auto* explore = app.add_subcommand("explore", "Run biased exploration chains");
  add_common(explore, common);
  std::optional<int> chains;
  std::optional<double> delta_u;
  explore->add_option("--checkpoint", checkpoint, "Checkpoint (default: latest)");
  explore->add_option("--output", output, "Output directory for chain files");
  explore->add_option("--chains", chains, "Parallel chains B");
  explore->add_option("--steps", steps, "Steps per chain M");
  explore->add_option("--delta-u-max", delta_u, "Energy-increase cutoff in units of T");

  auto* analyze = app.add_subcommand("analyze", "TICA, ESS/s, speed-up, free energy and plots");
  add_common(analyze, common);
  std::string chain, reference;
  double reference_seconds = 0.0;
  analyze->add_option("--chain", chain, "Model chain (default: the sample chain)");
  analyze->add_option("--reference", reference, "Reference chain or trajectory (default: MD trajectory)");
  analyze->add_option("--reference-seconds", reference_seconds, "Wall time of a trajectory reference");

  auto* cond = app.add_subcommand("eval-conditional", "Compare model and MD conditional distributions");
  add_common(cond, common);
  bool self_compare = false;
  std::optional<int> samples;
  cond->add_option("--checkpoint", checkpoint, "Checkpoint (default: latest)");
  cond->add_flag("--self", self_compare, "Compare the MD oracle with itself");
  cond->add_option("--samples", samples, "Samples per distribution");

  auto* show = app.add_subcommand("print-config", "Print the resolved configuration");
  add_common(show, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : TW_USAGE_ERROR;
  }

  std::vector<std::string> extra;
  if (*train) add_flag_override(extra, train_steps, "training." + stage + ".steps");
  if (*sample) {
    add_flag_override(extra, steps, "sampler.steps");
    add_flag_override(extra, batch, "sampler.batch");
  }
  if (*explore) {
    add_flag_override(extra, chains, "sampler.explore_chains");
    add_flag_override(extra, steps, "sampler.explore_steps");
    add_flag_override(extra, delta_u, "sampler.delta_u_max");
  }
  if (*cond) add_flag_override(extra, samples, "analysis.conditional_samples");

  RunPtr run(nullptr, &tw_run_free);
  if (int s = open_run(common, extra, run); s != TW_OK) return s;

  int status = TW_OK;
  const char* what = "";
  if (*gen) {
    what = "gen-data";
    status = tw_gen_data(run.get());
  } else if (*train) {
    what = "train";
    long long n_params = 0;
    status = tw_train(run.get(), stage.c_str(), resume, dry_run, &n_params);
    if (status == TW_OK && dry_run) std::printf("parameters: %lld\n", n_params);
  } else if (*sample) {
    what = "sample";
    long long length = 0;
    status = tw_sample(run.get(), or_null(checkpoint), or_null(output), &length);
  } else if (*explore) {
    what = "explore";
    int n = 0;
    status = tw_explore(run.get(), or_null(checkpoint), or_null(output), &n);
  } else if (*analyze) {
    what = "analyze";
    double speedup = 0.0;
    status = tw_analyze(run.get(), or_null(chain), or_null(reference), reference_seconds, &speedup);
    if (status == TW_OK && !std::isnan(speedup)) std::printf("speedup: %.6g\n", speedup);
  } else if (*cond) {
    what = "eval-conditional";
    int passed = 0, bonds_ok = 0;
    status = tw_eval_conditional(run.get(), or_null(checkpoint), self_compare, &passed, &bonds_ok);
    if (status == TW_OK) {
      std::printf("conditional: %s\n", passed ? "match" : "mismatch");
      std::printf("bond lengths: %s\n", bonds_ok ? "within threshold" : "above threshold");
    }
  } else if (*show) {
    size_t needed = 0;
    tw_run_config(run.get(), nullptr, 0, &needed);
    std::string text(needed, '\0');
    tw_run_config(run.get(), text.data(), text.size(), &needed);
    std::printf("%s\n", text.c_str());
    return TW_OK;
  }
  if (status != TW_OK) return report_error(status, what);
  std::printf("%s\n", report(run.get()).c_str());
  return TW_OK;
}
