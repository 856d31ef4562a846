#pragma once

#include "timewarp/config.hpp"

namespace tw {

/// Build identifier recorded in every run directory.
const char* code_version();

struct FamilySystems {
  std::vector<SystemPtr> train;
  std::vector<SystemPtr> test;
};

/// Bead chains named "beads-<types>" with bonds, angles, one torsion per
/// consecutive quadruple and nonbonded repulsion beyond 1-3 neighbours.
FamilySystems bead_family(const FamilyConfig& config, std::uint64_t seed);
SystemPtr bead_system(const FamilyConfig& config, const std::vector<int>& types);

/// A low-energy starting configuration (extended planar zigzag for chains,
/// a well minimum for the toy potentials).
Matrix initial_positions(const SystemSpec& system, const Potential& potential);

struct TrainOptions {
  std::string stage = "likelihood";  ///< likelihood | acceptance
  bool resume = false;               ///< continue from the latest checkpoint
  bool dry_run = false;
};

struct SampleOptions {
  std::string checkpoint;  ///< empty: latest
  std::string output;      ///< empty: chains/sample-<system>.twchain
};

struct AnalyzeOptions {
  std::string chain;      ///< empty: chains/sample-<system>.twchain
  std::string reference;  ///< chain or trajectory file; empty: the MD trajectory
  double reference_seconds = 0.0;  ///< wall time of a trajectory reference; 0: from data/timing.json
};

struct ConditionalOptions {
  std::string checkpoint;
  bool self_compare = false;  ///< dynamics oracle against itself
};

/// One run directory bound to a resolved configuration. Each command writes
/// config.json, a provenance record and its own outputs under output_dir.
class Run {
 public:
  explicit Run(RunConfig config);

  const RunConfig& config() const { return config_; }
  std::filesystem::path dir() const { return config_.output_dir; }

  io::json gen_data();
  io::json train(const TrainOptions& options);
  io::json sample(const SampleOptions& options);
  io::json explore(const SampleOptions& options);
  io::json analyze(const AnalyzeOptions& options);
  io::json eval_conditional(const ConditionalOptions& options);

  /// Path of the most recent checkpoint, or empty.
  std::filesystem::path latest_checkpoint() const;

 private:
  void record(const std::string& command, const io::json& inputs, const io::json& summary, double seconds) const;
  io::LoadedDataset dataset() const;
  std::size_t pick_system(const io::LoadedDataset& data) const;
  Constraint constraint() const;

  RunConfig config_;
};

}  // namespace tw
