#pragma once

#include "timewarp/sampler.hpp"

#include <filesystem>
#include <optional>

namespace tw {

/// Descriptor used for TICA: raw coordinates when N = 1 or d = 1, otherwise
/// all pairwise distances (i < j, row-major order).
Vector features(const Matrix& positions);
Matrix trajectory_features(const std::vector<Matrix>& frames);
Matrix chain_features(const Chain& chain);

struct TicaModel {
  int lag = 1;
  Vector mean;
  Matrix transform;  ///< F x F, column k is component k
  Vector eigenvalues;

  /// Rows of `features` projected onto all components.
  Matrix project(const Matrix& features) const;
  Vector component(const Matrix& features, int k) const;
};

/// Fit on one or more feature series (T_i x F), pooling covariances.
/// lag = 0 is allowed as a test hook.
TicaModel tica_fit(const std::vector<Matrix>& series, int lag);
TicaModel tica_fit(const Matrix& series, int lag);

/// Fixed mean and variance to correlate about instead of the series' own.
struct Moments {
  double mean = 0.0;
  double variance = 1.0;
};

/// rho_1 .. rho_max_lag with the biased estimator (divide by M). With
/// `about`, deviations are taken from the given moments; a chain stuck in one
/// basin then keeps rho near one instead of decorrelating around its local
/// mean.
std::vector<double> autocorrelation(std::span<const double> series, int max_lag,
                                    std::optional<Moments> about = std::nullopt);

struct EssResult {
  double m_eff = 0.0;
  double ess_per_second = 0.0;
  int cutoff = 0;  ///< last lag included in the sum
  double rho_sum = 0.0;
  bool fallback = false;
};

/// M_eff = M / (1 + 2 sum rho), summing until the first rho below
/// `threshold` or the first negative rho, whichever comes first.
EssResult ess(std::span<const double> series, double t_sampling, double threshold = 0.01, int max_lag = 0,
              std::optional<Moments> about = std::nullopt);

/// ESS/s ratio on TIC `component` of both feature series under one model.
double speedup_factor(const Matrix& model_features, double t_model, const Matrix& md_features, double t_md,
                      const TicaModel& tica, int component = 0, double threshold = 0.01,
                      std::optional<Moments> about = std::nullopt);

struct FreeEnergyProfile {
  std::vector<double> edges;  ///< n_bins + 1
  std::vector<std::optional<double>> values;
  std::vector<double> centers() const;
};

/// -T log(histogram), shifted to min 0; empty bins have no value. The range
/// defaults to the sample range.
FreeEnergyProfile free_energy_profile(std::span<const double> samples, int n_bins, double temperature,
                                      std::optional<std::pair<double, double>> range = std::nullopt);

struct KsResult {
  double statistic = 0.0;
  double p_value = 1.0;
};
KsResult ks_two_sample(std::vector<double> a, std::vector<double> b);
KsResult ks_one_sample(std::vector<double> a, const std::function<double(double)>& cdf);
/// Asymptotic Kolmogorov tail probability with the Stephens correction.
double kolmogorov_pvalue(double statistic, double n_eff);

/// One-sided exact binomial test that k of n successes exceed rate p0:
/// P(X >= k | n, p0).
double binomial_test_greater(long long k, long long n, double p0);

/// Draws n conditional samples of positions given x_start.
using ConditionalSampler = std::function<std::vector<Matrix>(const Matrix& x_start, int n, RngStream& rng)>;

ConditionalSampler flow_conditional(ConditionalFlow& flow, std::vector<int> atom_types);
ConditionalSampler dynamics_conditional(SystemPtr system, Potential potential, LangevinParams params,
                                        long long horizon_steps, int threads = 1);

struct ConditionalReport {
  std::vector<double> model_energy;
  std::vector<double> reference_energy;
  KsResult energy;
  std::vector<double> model_projection;  ///< first descriptor
  std::vector<double> reference_projection;
  KsResult projection;
  /// Per bond: lengths from both samplers and their KS comparison.
  std::vector<std::vector<double>> model_bonds;
  std::vector<std::vector<double>> reference_bonds;
  std::vector<KsResult> bonds;
  double max_bond_ks = 0.0;
  double mean_energy_gap = 0.0;  ///< model minus reference
  bool energy_mismatch = false;  ///< energy KS p < 0.01
};

ConditionalReport compare_conditionals(const ConditionalSampler& model, const ConditionalSampler& reference,
                                       const Potential& potential, const SystemSpec& system, const Matrix& x_start,
                                       int n_samples, RngStream& rng);

struct ValidationConfig {
  int components = 2;          ///< TIC dimensions used for clustering
  int lag = 1;
  double cell = 0.5;           ///< grid cell width in TIC units
  int min_points = 20;         ///< smallest exploration-only cluster kept
  double radius_quantile = 0.9;
  double min_radius = 0.5;
  int n_ensembles = 32;
  long long horizon_steps = 500;
  double stay_fraction = 0.5;
  int threads = 1;
};

struct Candidate {
  Matrix positions;     ///< seed configuration (cluster medoid)
  Vector center;        ///< TIC coordinates of the seed
  double radius = 0.0;  ///< TIC units
  int points = 0;
  double stay = 0.0;    ///< fraction of ensemble ends within radius
  double known = 0.0;   ///< fraction ending in MD-occupied cells
  bool validated = false;
};

struct ValidationReport {
  TicaModel tica;
  std::vector<Candidate> candidates;
  bool none_found() const { return candidates.empty(); }
};

/// Clusters exploration-only regions in TIC space (fit on the MD
/// reference), then runs short MD ensembles from each cluster medoid. A
/// candidate is validated when more than stay_fraction of the ensemble
/// stays within its radius.
ValidationReport validate_new_states(const std::vector<Matrix>& md_reference, std::span<const Chain> exploration,
                                     const SystemPtr& system, const Potential& potential,
                                     const LangevinParams& dynamics, const ValidationConfig& config,
                                     const RngStream& rng);

/// Runs the ensemble test for explicit candidates (used for planted states).
void validate_candidates(std::vector<Candidate>& candidates, const TicaModel& tica,
                         const std::vector<Matrix>& md_reference, const SystemPtr& system,
                         const Potential& potential, const LangevinParams& dynamics,
                         const ValidationConfig& config, const RngStream& rng);

// Plots (SVG).
struct Series {
  std::string label;
  std::vector<double> x;
  std::vector<double> y;
};
void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                     const std::string& ylabel, const std::vector<Series>& series);
void write_scatter_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                        const std::string& ylabel, const std::vector<Series>& series);
void write_histogram_plot(const std::filesystem::path& path, const std::string& title, const std::string& xlabel,
                          const std::vector<std::pair<std::string, std::vector<double>>>& samples, int bins);

}  // namespace tw
