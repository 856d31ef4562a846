#pragma once

#include "timewarp/io.hpp"

namespace tw {

/// Usage-level configuration problems (exit code 1 at the CLI).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bead-chain family: systems differ in their bead type sequence; masses
/// and dihedral stiffness follow from the types.
struct FamilyConfig {
  int n_beads = 4;
  int dimension = 3;
  int n_train = 8;
  int n_test = 2;
  /// Explicit type sequences; when empty they are drawn from all sequences
  /// over the type table (reversals count once), test systems first.
  std::vector<std::vector<int>> train_sequences;
  std::vector<std::vector<int>> test_sequences;
  /// Dihedral stiffness per type; a torsion uses the mean over its two
  /// central beads in k (1 + cos(2 phi - pi)).
  std::vector<double> type_dihedral{0.5, 1.0, 1.5, 2.0};
  std::vector<double> type_mass{1.0, 1.0, 1.0, 1.0};
  double bond_k = 100.0;
  double bond_r0 = 1.0;
  double angle_k = 20.0;
  double angle_theta0 = 1.91;
  double sigma = 0.8;
};

struct SystemSection {
  std::string kind = "double_well";  ///< double_well | mueller_brown | bead_family | file
  std::string name;                  ///< defaults to the kind
  std::string spec_file;             ///< kind = file: SystemSpec JSON (bead chain potential)
  bool heldout_copy = true;          ///< single-system kinds: also simulate a held-out replica
  FamilyConfig family;
};

struct PotentialSection {
  double temperature = 1.0;
  DoubleWellParams double_well;
  double mueller_brown_scale = 0.1;
};

struct DynamicsSection {
  double timestep = 0.01;
  double friction = 1.0;
  double blowup_energy = 1e6;
  long long steps = 200000;
  int spacing = 100;  ///< tau in integrator steps
  int burn_in = 10;   ///< stored frames discarded before pair extraction
};

struct DatasetSection {
  std::size_t max_pairs_per_system = 10000;
  double val_fraction = 0.1;
};

struct FlowSection {
  FlowConfig config;
  std::string init = "identity";  ///< identity | random
};

struct StageSection {
  LossWeights weights;
  long long steps = 1000;
  double lr = 5e-4;
};

struct TrainingSection {
  TrainConfig base;
  StageSection likelihood;
  StageSection acceptance{{0.9, 0.1, 0.1}, 1000, 5e-4};
  std::size_t probe_pairs = 256;
};

struct SamplerSection {
  std::string system;  ///< empty: first test system, else the first system
  long long steps = 10000;
  int batch = 10;
  int explore_chains = 100;
  long long explore_steps = 10000;
  double delta_u_max = 30.0;     ///< in units of T
  std::string constraint = "none";  ///< none | dihedral
  std::vector<int> dihedral{0, 1, 2, 3};
};

struct AnalysisSection {
  int tica_lag = 1;
  int tic = 0;
  double ess_threshold = 0.01;
  int free_energy_bins = 40;
  int conditional_samples = 1000;
  int conditional_frame = 0;
  double bond_ks_threshold = 0.05;
  bool validate_new_states = true;
  ValidationConfig validation;
};

struct RunConfig {
  int format_version = 1;
  std::uint64_t seed = 0;
  std::string output_dir = "run";
  int threads = 0;
  SystemSection system;
  PotentialSection potential;
  DynamicsSection dynamics;
  DatasetSection dataset;
  FlowSection flow;
  TrainingSection training;
  SamplerSection sampler;
  AnalysisSection analysis;

  /// Resolved document; every key the loader accepts appears here.
  io::json to_json() const;

  /// Merges `doc` over the defaults, rejecting unknown keys and type
  /// mismatches; `overrides` ("a.b=value") are applied last and win.
  static RunConfig from_json(const io::json& doc, const std::vector<std::string>& overrides = {});
  static RunConfig load(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

  void validate() const;
};

/// Keys a config document must state explicitly.
inline constexpr const char* kRequiredKeys[] = {"format_version", "seed", "output_dir", "system.kind"};

}  // namespace tw
