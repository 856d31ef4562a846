#pragma once

#include "timewarp/core.hpp"

#include <array>
#include <utility>
#include <variant>

namespace tw {

/// U(x) = barrier * (x^2 - offset^2)^2 summed over every coordinate.
struct DoubleWellParams {
  double barrier = 1.0;
  double offset = 1.0;
};

/// Four-term Mueller-Brown surface multiplied by `scale`.
struct MuellerBrownParams {
  std::array<double, 4> A{-200.0, -100.0, -170.0, 15.0};
  std::array<double, 4> a{-1.0, -1.0, -6.5, 0.7};
  std::array<double, 4> b{0.0, 0.0, 11.0, 0.6};
  std::array<double, 4> c{-10.0, -10.0, -6.5, 0.7};
  std::array<double, 4> x0{1.0, 0.0, -0.5, -1.0};
  std::array<double, 4> y0{0.0, 0.5, 1.5, 1.0};
  double scale = 0.1;
};

/// Bonded terms and truncated r^-12 repulsion read from the SystemSpec.
struct BeadChainTerms {
  SystemPtr system;
  std::vector<std::pair<int, int>> nonbonded_pairs;

  explicit BeadChainTerms(SystemPtr system);
};

class Potential {
 public:
  enum class Kind { DoubleWell1D, MuellerBrown2D, BeadChain };

  static Potential double_well(DoubleWellParams params, double temperature);
  static Potential mueller_brown(MuellerBrownParams params, double temperature);
  static Potential bead_chain(SystemPtr system, double temperature);

  Kind kind() const;
  const char* kind_name() const;
  double temperature() const { return temperature_; }
  Potential with_temperature(double temperature) const;

  /// Returns U and writes -grad U into `force` (resized as needed).
  double energy_and_force(const Matrix& positions, Matrix& force) const;
  double energy(const Matrix& positions) const;

  const DoubleWellParams* double_well_params() const { return std::get_if<DoubleWellParams>(&terms_); }
  const MuellerBrownParams* mueller_brown_params() const { return std::get_if<MuellerBrownParams>(&terms_); }
  const BeadChainTerms* bead_chain_terms() const { return std::get_if<BeadChainTerms>(&terms_); }

 private:
  using Terms = std::variant<DoubleWellParams, MuellerBrownParams, BeadChainTerms>;
  Potential(Terms terms, double temperature);

  Terms terms_;
  double temperature_;
};

/// exp(-U/T) N(x^v; 0, I) target over positions and auxiliaries.
struct AugmentedTarget {
  Potential potential;

  double temperature() const { return potential.temperature(); }
};

double potential_energy(const Potential& potential, const Matrix& positions);
Matrix force(const Potential& potential, const Matrix& positions);

/// -U(x^p)/T + log N(x^v; 0, I). The Gaussian factor carries its full
/// normalizer; the positional partition function is omitted.
double log_mu_aug(const AugmentedTarget& target, const State& state);
double log_mu_aug(const AugmentedTarget& target, const Matrix& positions, const Matrix& auxiliaries);

/// Standard normal log-density summed over every entry of `x`.
double standard_normal_logpdf(const Matrix& x);

double kinetic_energy(const Matrix& velocities, std::span<const double> masses);

/// Geometry helpers shared with the constraint predicates and analysis.
double bond_length(const Matrix& positions, int i, int j);
double bond_angle(const Matrix& positions, int i, int j, int k);
/// Signed dihedral in (-pi, pi]; d must be 3.
double dihedral_angle(const Matrix& positions, int i, int j, int k, int l);

}  // namespace tw
