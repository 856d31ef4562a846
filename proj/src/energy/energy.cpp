#include "timewarp/energy.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

namespace tw {

namespace {

using Vec3 = Eigen::Vector3d;

Vec3 row3(const Matrix& x, int i) { return Vec3(x(i, 0), x(i, 1), x(i, 2)); }

double double_well_energy(const DoubleWellParams& p, const Matrix& x, Matrix& f) {
  f.resize(x.rows(), x.cols());
  double u = 0.0;
  const double c2 = p.offset * p.offset;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) {
      const double s = x(r, c) * x(r, c) - c2;
      u += p.barrier * s * s;
      f(r, c) = -4.0 * p.barrier * s * x(r, c);
    }
  }
  return u;
}

double mueller_brown_energy(const MuellerBrownParams& p, const Matrix& x, Matrix& f) {
  if (x.cols() != 2) throw std::invalid_argument("Mueller-Brown potential needs dimension 2");
  f.setZero(x.rows(), 2);
  double u = 0.0;
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double px = x(r, 0);
    const double py = x(r, 1);
    for (int t = 0; t < 4; ++t) {
      const double dx = px - p.x0[t];
      const double dy = py - p.y0[t];
      const double e = p.scale * p.A[t] * std::exp(p.a[t] * dx * dx + p.b[t] * dx * dy + p.c[t] * dy * dy);
      u += e;
      f(r, 0) -= e * (2.0 * p.a[t] * dx + p.b[t] * dy);
      f(r, 1) -= e * (p.b[t] * dx + 2.0 * p.c[t] * dy);
    }
  }
  return u;
}

double bead_chain_energy(const BeadChainTerms& terms, const Matrix& x, Matrix& f) {
  const SystemSpec& sys = *terms.system;
  const int d = static_cast<int>(x.cols());
  f.setZero(x.rows(), x.cols());
  double u = 0.0;

  for (const auto& b : sys.bonds) {
    const Eigen::RowVectorXd rij = x.row(b.j) - x.row(b.i);
    const double r = rij.norm();
    const double dr = r - b.r0;
    u += b.k * dr * dr;
    if (r > 0.0) {
      const Eigen::RowVectorXd g = (2.0 * b.k * dr / r) * rij;  // dU/dx_j
      f.row(b.j) -= g;
      f.row(b.i) += g;
    }
  }

  for (const auto& a : sys.angles) {
    const Eigen::RowVectorXd u1 = x.row(a.i) - x.row(a.j);
    const Eigen::RowVectorXd u2 = x.row(a.k) - x.row(a.j);
    const double n1 = u1.norm();
    const double n2 = u2.norm();
    if (n1 == 0.0 || n2 == 0.0) {
      throw std::domain_error("angle " + std::to_string(a.i) + "-" + std::to_string(a.j) + "-" +
                              std::to_string(a.k) + " has coincident atoms");
    }
    const double cos_t = std::clamp(u1.dot(u2) / (n1 * n2), -1.0, 1.0);
    const double theta = std::acos(cos_t);
    const double sin_t = std::max(std::sqrt(std::max(0.0, 1.0 - cos_t * cos_t)), 1e-12);
    const double dtheta = theta - a.theta0;
    u += a.k_a * dtheta * dtheta;
    const double dU = 2.0 * a.k_a * dtheta;
    // dtheta/dx_i = -(u2/(n1 n2) - cos u1/n1^2) / sin
    const Eigen::RowVectorXd gi = -(u2 / (n1 * n2) - cos_t * u1 / (n1 * n1)) / sin_t;
    const Eigen::RowVectorXd gk = -(u1 / (n1 * n2) - cos_t * u2 / (n2 * n2)) / sin_t;
    f.row(a.i) -= dU * gi;
    f.row(a.k) -= dU * gk;
    f.row(a.j) += dU * (gi + gk);
  }

  if (!sys.dihedrals.empty() && d != 3) throw std::invalid_argument("dihedral terms need dimension 3");
  for (const auto& dh : sys.dihedrals) {
    const Vec3 F = row3(x, dh.i) - row3(x, dh.j);
    const Vec3 G = row3(x, dh.j) - row3(x, dh.k);
    const Vec3 H = row3(x, dh.l) - row3(x, dh.k);
    const Vec3 A = F.cross(G);
    const Vec3 B = H.cross(G);
    const double a2 = A.squaredNorm();
    const double b2 = B.squaredNorm();
    const double gn = G.norm();
    if (a2 < 1e-24 || b2 < 1e-24 || gn < 1e-12) continue;  // collinear: torque-free, phi undefined
    const double phi = std::atan2(B.cross(A).dot(G) / gn, A.dot(B));
    u += dh.k_d * (1.0 + std::cos(dh.n * phi - dh.phi0));
    const double dU = -dh.k_d * dh.n * std::sin(dh.n * phi - dh.phi0);
    const Vec3 gi = -gn / a2 * A;
    const Vec3 gl = gn / b2 * B;
    const double fg = F.dot(G) / (a2 * gn);
    const double hg = H.dot(G) / (b2 * gn);
    const Vec3 gj = -gi + fg * A - hg * B;
    const Vec3 gk = hg * B - fg * A - gl;
    for (int c = 0; c < 3; ++c) {
      f(dh.i, c) -= dU * gi[c];
      f(dh.j, c) -= dU * gj[c];
      f(dh.k, c) -= dU * gk[c];
      f(dh.l, c) -= dU * gl[c];
    }
  }

  const double sigma = sys.nonbonded_sigma;
  const double cutoff = 3.0 * sigma;
  for (const auto& [i, j] : terms.nonbonded_pairs) {
    const Eigen::RowVectorXd rij = x.row(j) - x.row(i);
    const double r = rij.norm();
    if (r < 1e-12) {
      throw std::domain_error("coincident atoms in nonbonded pair (" + std::to_string(i) + ", " +
                              std::to_string(j) + ")");
    }
    if (r >= cutoff) continue;
    const double s6 = std::pow(sigma / r, 6);
    const double e = s6 * s6;
    u += e;
    const Eigen::RowVectorXd g = (-12.0 * e / (r * r)) * rij;  // dU/dx_j
    f.row(j) -= g;
    f.row(i) += g;
  }
  return u;
}

}  // namespace

BeadChainTerms::BeadChainTerms(SystemPtr system_) : system(std::move(system_)) {
  if (!system) throw std::invalid_argument("BeadChainTerms: null system");
  system->validate();
  std::set<std::pair<int, int>> excluded;
  for (const auto& b : system->bonds) excluded.insert(std::minmax(b.i, b.j));
  for (const auto& a : system->angles) excluded.insert(std::minmax(a.i, a.k));
  for (int i = 0; i < system->n_atoms; ++i) {
    for (int j = i + 1; j < system->n_atoms; ++j) {
      if (!excluded.contains({i, j})) nonbonded_pairs.emplace_back(i, j);
    }
  }
}

Potential::Potential(Terms terms, double temperature) : terms_(std::move(terms)), temperature_(temperature) {
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw std::invalid_argument("temperature must be positive");
  }
}

Potential Potential::double_well(DoubleWellParams params, double temperature) {
  if (params.barrier < 0.0) throw std::invalid_argument("double well barrier must be >= 0");
  return Potential(params, temperature);
}

Potential Potential::mueller_brown(MuellerBrownParams params, double temperature) {
  return Potential(params, temperature);
}

Potential Potential::bead_chain(SystemPtr system, double temperature) {
  return Potential(BeadChainTerms(std::move(system)), temperature);
}

Potential::Kind Potential::kind() const {
  switch (terms_.index()) {
    case 0: return Kind::DoubleWell1D;
    case 1: return Kind::MuellerBrown2D;
    default: return Kind::BeadChain;
  }
}

const char* Potential::kind_name() const {
  switch (kind()) {
    case Kind::DoubleWell1D: return "double_well";
    case Kind::MuellerBrown2D: return "mueller_brown";
    default: return "bead_chain";
  }
}

Potential Potential::with_temperature(double temperature) const { return Potential(terms_, temperature); }

double Potential::energy_and_force(const Matrix& positions, Matrix& force) const {
  return std::visit(
      [&](const auto& t) -> double {
        using T = std::decay_t<decltype(t)>;
        if constexpr (std::is_same_v<T, DoubleWellParams>) return double_well_energy(t, positions, force);
        if constexpr (std::is_same_v<T, MuellerBrownParams>) return mueller_brown_energy(t, positions, force);
        if constexpr (std::is_same_v<T, BeadChainTerms>) return bead_chain_energy(t, positions, force);
      },
      terms_);
}

double Potential::energy(const Matrix& positions) const {
  Matrix f;
  return energy_and_force(positions, f);
}

double potential_energy(const Potential& potential, const Matrix& positions) {
  return potential.energy(positions);
}

Matrix force(const Potential& potential, const Matrix& positions) {
  Matrix f;
  potential.energy_and_force(positions, f);
  return f;
}

double standard_normal_logpdf(const Matrix& x) {
  return -0.5 * x.squaredNorm() - 0.5 * static_cast<double>(x.size()) * std::log(2.0 * std::numbers::pi);
}

double log_mu_aug(const AugmentedTarget& target, const Matrix& positions, const Matrix& auxiliaries) {
  return -target.potential.energy(positions) / target.temperature() + standard_normal_logpdf(auxiliaries);
}

double log_mu_aug(const AugmentedTarget& target, const State& state) {
  return log_mu_aug(target, state.positions, state.auxiliaries);
}

double kinetic_energy(const Matrix& velocities, std::span<const double> masses) {
  if (static_cast<Eigen::Index>(masses.size()) != velocities.rows()) {
    throw std::invalid_argument("kinetic_energy: masses length != number of atoms");
  }
  double k = 0.0;
  for (Eigen::Index i = 0; i < velocities.rows(); ++i) k += 0.5 * masses[i] * velocities.row(i).squaredNorm();
  return k;
}

double bond_length(const Matrix& positions, int i, int j) { return (positions.row(j) - positions.row(i)).norm(); }

double bond_angle(const Matrix& positions, int i, int j, int k) {
  const Eigen::RowVectorXd u1 = positions.row(i) - positions.row(j);
  const Eigen::RowVectorXd u2 = positions.row(k) - positions.row(j);
  return std::acos(std::clamp(u1.dot(u2) / (u1.norm() * u2.norm()), -1.0, 1.0));
}

double dihedral_angle(const Matrix& positions, int i, int j, int k, int l) {
  if (positions.cols() != 3) throw std::invalid_argument("dihedral_angle needs dimension 3");
  const Vec3 F = row3(positions, i) - row3(positions, j);
  const Vec3 G = row3(positions, j) - row3(positions, k);
  const Vec3 H = row3(positions, l) - row3(positions, k);
  const Vec3 A = F.cross(G);
  const Vec3 B = H.cross(G);
  const double gn = G.norm();
  return std::atan2(B.cross(A).dot(G) / gn, A.dot(B));
}

}  // namespace tw
