#include "timewarp/dynamics.hpp"

#include "timewarp/parallel.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>

namespace tw {

void LangevinParams::validate() const {
  if (!(timestep > 0.0)) throw std::invalid_argument("langevin: timestep must be positive");
  if (!(friction > 0.0)) throw std::invalid_argument("langevin: friction must be positive");
  if (!(temperature >= 0.0)) throw std::invalid_argument("langevin: temperature must be >= 0");
  if (timestep * friction >= 1.0) {
    throw std::invalid_argument("langevin: timestep * friction must be < 1");
  }
  if (timestep * friction > 0.5) {
    spdlog::warn("langevin: timestep * friction = {} exceeds 0.5", timestep * friction);
  }
}

LangevinIntegrator::LangevinIntegrator(const Potential& potential, LangevinParams params,
                                       std::span<const double> masses)
    : potential_(potential), params_(params) {
  params_.validate();
  const auto n = static_cast<Eigen::Index>(masses.size());
  inv_mass_.resize(n);
  noise_scale_.resize(n);
  decay_ = std::exp(-params_.friction * params_.timestep);
  const double var = params_.temperature * (1.0 - std::exp(-2.0 * params_.friction * params_.timestep));
  for (Eigen::Index i = 0; i < n; ++i) {
    inv_mass_[i] = 1.0 / masses[i];
    noise_scale_[i] = std::sqrt(var / masses[i]);
  }
}

void LangevinIntegrator::evaluate(const Matrix& positions) {
  energy_ = potential_.energy_and_force(positions, force_);
  ++evaluations_;
  for (Eigen::Index i = 0; i < force_.rows(); ++i) {
    if (!force_.row(i).allFinite()) {
      throw DynamicsError("non-finite force on atom " + std::to_string(i), static_cast<int>(i));
    }
  }
  if (!(energy_ <= params_.blowup_energy)) {
    throw DynamicsError("potential energy " + std::to_string(energy_) + " exceeds blow-up threshold", -1);
  }
  have_force_ = true;
}

void LangevinIntegrator::step(Matrix& positions, Matrix& velocities, RngStream& rng) {
  Matrix noise = rng.normal_matrix(positions.rows(), positions.cols());
  step_with_noise(positions, velocities, noise);
}

void LangevinIntegrator::step_with_noise(Matrix& positions, Matrix& velocities, const Matrix& noise) {
  if (!have_force_) evaluate(positions);
  const double half = 0.5 * params_.timestep;
  velocities += half * (inv_mass_.asDiagonal() * force_);
  positions += half * velocities;
  velocities = decay_ * velocities + noise_scale_.asDiagonal() * noise;
  positions += half * velocities;
  evaluate(positions);
  velocities += half * (inv_mass_.asDiagonal() * force_);
}

std::pair<Matrix, Matrix> langevin_step(const Matrix& positions, const Matrix& velocities,
                                        const Potential& potential, const LangevinParams& params,
                                        std::span<const double> masses, RngStream& rng) {
  LangevinIntegrator integrator(potential, params, masses);
  Matrix x = positions;
  Matrix v = velocities;
  integrator.step(x, v, rng);
  return {std::move(x), std::move(v)};
}

Matrix maxwell_boltzmann(std::span<const double> masses, int dimension, double temperature, RngStream& rng) {
  Matrix v(static_cast<Eigen::Index>(masses.size()), dimension);
  for (Eigen::Index i = 0; i < v.rows(); ++i) {
    const double s = std::sqrt(temperature / masses[i]);
    for (int c = 0; c < dimension; ++c) v(i, c) = s * rng.normal();
  }
  return v;
}

Trajectory simulate(const SystemPtr& system, const Potential& potential, const LangevinParams& params,
                    long long n_steps, int store_every, const Matrix& initial, RngStream& rng) {
  if (!system) throw std::invalid_argument("simulate: null system");
  if (store_every < 1 || n_steps < store_every) {
    throw std::invalid_argument("simulate: need n_steps >= store_every >= 1");
  }
  if (initial.rows() != system->n_atoms || initial.cols() != system->dimension) {
    throw std::invalid_argument("simulate: initial positions do not match system shape");
  }
  const auto t0 = std::chrono::steady_clock::now();
  Trajectory traj;
  traj.spacing = store_every;
  traj.params = params;
  traj.system = system;
  traj.potential_kind = potential.kind_name();
  traj.frames.reserve(static_cast<std::size_t>(n_steps / store_every) + 1);

  LangevinIntegrator integrator(potential, params, system->masses);
  Matrix x = initial;
  Matrix v = maxwell_boltzmann(system->masses, system->dimension, params.temperature, rng);
  traj.frames.push_back(x);
  for (long long s = 1; s <= n_steps; ++s) {
    integrator.step(x, v, rng);
    if (s % store_every == 0) traj.frames.push_back(x);
  }
  traj.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return traj;
}

std::vector<Matrix> conditional_ensemble(const SystemPtr& system, const Potential& potential,
                                         const LangevinParams& params, const Matrix& x_start,
                                         long long horizon_steps, int n_replicas, const RngStream& rng,
                                         int threads) {
  if (n_replicas < 1) throw std::invalid_argument("conditional_ensemble: n_replicas must be >= 1");
  if (horizon_steps < 0) throw std::invalid_argument("conditional_ensemble: negative horizon");
  std::vector<Matrix> out(static_cast<std::size_t>(n_replicas), x_start);
  if (horizon_steps == 0) return out;
  const int store = static_cast<int>(std::min<long long>(horizon_steps, 1 << 30));
  parallel_for(out.size(), threads, [&](std::size_t r) {
    RngStream stream = rng.child(r);
    Trajectory t = simulate(system, potential, params, horizon_steps, store, x_start, stream);
    out[r] = std::move(t.frames.back());
  });
  return out;
}

}  // namespace tw
