#pragma once

#include "timewarp/core.hpp"
#include "timewarp/energy.hpp"

#include <stdexcept>
#include <utility>

namespace tw {

struct LangevinParams {
  double timestep = 0.01;
  double friction = 1.0;
  double temperature = 1.0;
  /// Simulation aborts when U exceeds this value.
  double blowup_energy = 1e6;

  /// Throws when timestep * friction >= 1; warns above 0.5.
  void validate() const;
};

/// Raised when the integrator produces a non-finite force or blows up.
class DynamicsError : public std::runtime_error {
 public:
  DynamicsError(const std::string& what, int atom) : std::runtime_error(what), atom_(atom) {}
  int atom() const { return atom_; }

 private:
  int atom_;
};

struct Trajectory {
  std::vector<Matrix> frames;
  int spacing = 1;
  LangevinParams params;
  SystemPtr system;
  std::string potential_kind;
  double wall_seconds = 0.0;
};

/// BAOAB splitting: B(dt/2) A(dt/2) O(dt) A(dt/2) B(dt/2). Keeps the force
/// from the end of the previous step so each step costs one evaluation.
class LangevinIntegrator {
 public:
  LangevinIntegrator(const Potential& potential, LangevinParams params, std::span<const double> masses);

  /// Draws the O-step noise from `rng`.
  void step(Matrix& positions, Matrix& velocities, RngStream& rng);
  /// Same step with caller-supplied standard-normal noise (rows = atoms).
  void step_with_noise(Matrix& positions, Matrix& velocities, const Matrix& noise);

  /// Potential energy at the positions left by the last step.
  double energy() const { return energy_; }
  long long force_evaluations() const { return evaluations_; }
  void invalidate() { have_force_ = false; }

 private:
  void evaluate(const Matrix& positions);

  const Potential& potential_;
  LangevinParams params_;
  Eigen::VectorXd inv_mass_;
  Eigen::VectorXd noise_scale_;
  double decay_;
  Matrix force_;
  double energy_ = 0.0;
  bool have_force_ = false;
  long long evaluations_ = 0;
};

std::pair<Matrix, Matrix> langevin_step(const Matrix& positions, const Matrix& velocities,
                                        const Potential& potential, const LangevinParams& params,
                                        std::span<const double> masses, RngStream& rng);

/// Velocities drawn from the Maxwell-Boltzmann law at `temperature`.
Matrix maxwell_boltzmann(std::span<const double> masses, int dimension, double temperature, RngStream& rng);

/// Runs n_steps from `initial`, storing the initial frame and every
/// store_every-th frame after it.
Trajectory simulate(const SystemPtr& system, const Potential& potential, const LangevinParams& params,
                    long long n_steps, int store_every, const Matrix& initial, RngStream& rng);

/// Final frames of n_replicas independent runs of horizon_steps from x_start.
/// Replica r uses rng.child(r), so results do not depend on `threads`.
std::vector<Matrix> conditional_ensemble(const SystemPtr& system, const Potential& potential,
                                         const LangevinParams& params, const Matrix& x_start,
                                         long long horizon_steps, int n_replicas, const RngStream& rng,
                                         int threads = 1);

}  // namespace tw
