#include "timewarp/core.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <utility>

namespace tw {

namespace {

void require(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument(msg);
}

}  // namespace

void SystemSpec::validate() const {
  const std::string where = "system '" + name + "': ";
  require(n_atoms >= 1, where + "n_atoms must be >= 1");
  require(dimension >= 1 && dimension <= 3, where + "dimension must be 1, 2 or 3");
  require(static_cast<int>(atom_types.size()) == n_atoms, where + "atom_types length != n_atoms");
  require(static_cast<int>(masses.size()) == n_atoms, where + "masses length != n_atoms");
  for (int t : atom_types) {
    require(t >= 0 && t < kMaxAtomTypes, where + "atom type id out of range [0, 64)");
  }
  for (double m : masses) {
    require(std::isfinite(m) && m > 0.0, where + "masses must be positive");
  }
  require(std::isfinite(nonbonded_sigma) && nonbonded_sigma > 0.0,
          where + "nonbonded_sigma must be positive");
  auto idx_ok = [&](int i) { return i >= 0 && i < n_atoms; };
  std::set<std::pair<int, int>> seen;
  for (const auto& b : bonds) {
    require(idx_ok(b.i) && idx_ok(b.j) && b.i != b.j, where + "bond index out of range");
    require(b.k >= 0.0, where + "bond force constant must be >= 0");
    auto key = std::minmax(b.i, b.j);
    require(seen.insert({key.first, key.second}).second,
            where + "duplicate bond " + std::to_string(b.i) + "-" + std::to_string(b.j));
  }
  for (const auto& a : angles) {
    require(idx_ok(a.i) && idx_ok(a.j) && idx_ok(a.k), where + "angle index out of range");
    require(a.k_a >= 0.0, where + "angle force constant must be >= 0");
  }
  for (const auto& d : dihedrals) {
    require(idx_ok(d.i) && idx_ok(d.j) && idx_ok(d.k) && idx_ok(d.l),
            where + "dihedral index out of range");
    require(d.k_d >= 0.0, where + "dihedral force constant must be >= 0");
    require(dimension == 3, where + "dihedral terms need dimension 3");
  }
}

SystemSpec SystemSpec::permuted(std::span<const int> sigma) const {
  check_permutation(sigma, n_atoms);
  SystemSpec out = *this;
  for (int a = 0; a < n_atoms; ++a) {
    out.atom_types[sigma[a]] = atom_types[a];
    out.masses[sigma[a]] = masses[a];
  }
  for (auto& b : out.bonds) {
    b.i = sigma[b.i];
    b.j = sigma[b.j];
  }
  for (auto& a : out.angles) {
    a.i = sigma[a.i];
    a.j = sigma[a.j];
    a.k = sigma[a.k];
  }
  for (auto& d : out.dihedrals) {
    d.i = sigma[d.i];
    d.j = sigma[d.j];
    d.k = sigma[d.k];
    d.l = sigma[d.l];
  }
  return out;
}

State::State(Matrix positions_, Matrix auxiliaries_, SystemPtr system_)
    : positions(std::move(positions_)), auxiliaries(std::move(auxiliaries_)), system(std::move(system_)) {
  if (positions.rows() != auxiliaries.rows() || positions.cols() != auxiliaries.cols()) {
    throw std::invalid_argument("State: positions and auxiliaries shapes differ");
  }
  if (system && (positions.rows() != system->n_atoms || positions.cols() != system->dimension)) {
    throw std::invalid_argument("State: shape does not match system '" + system->name + "'");
  }
}

std::uint64_t mix64(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9e3779b97f4a7c15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

RngStream::RngStream(std::uint64_t seed, std::uint64_t stream) : seed_(seed), stream_(stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  engine_.seed(seq);
}

std::uint64_t RngStream::next_u64() {
  ++draws_;
  return engine_();
}

double RngStream::uniform() {
  // 53 random mantissa bits -> [0, 1)
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RngStream::normal() {
  ++draws_;
  return normal_(engine_);
}

std::size_t RngStream::below(std::size_t n) {
  if (n == 0) throw std::invalid_argument("RngStream::below: n must be positive");
  std::uniform_int_distribution<std::size_t> dist(0, n - 1);
  ++draws_;
  return dist(engine_);
}

Matrix RngStream::normal_matrix(Eigen::Index rows, Eigen::Index cols) {
  Matrix m(rows, cols);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = normal();
  }
  return m;
}

RngStream RngStream::child(std::uint64_t sub) const { return RngStream(mix64(seed_, stream_), sub); }

Vector center_of_geometry(const Matrix& positions) {
  if (positions.rows() == 0) throw std::invalid_argument("center_of_geometry: empty input");
  return positions.colwise().mean().transpose();
}

void check_permutation(std::span<const int> sigma, int n) {
  if (static_cast<int>(sigma.size()) != n) {
    throw std::invalid_argument("permutation length " + std::to_string(sigma.size()) +
                                " != " + std::to_string(n));
  }
  std::vector<char> hit(n, 0);
  for (int s : sigma) {
    if (s < 0 || s >= n || hit[s]) throw std::invalid_argument("permutation is not a bijection");
    hit[s] = 1;
  }
}

std::vector<int> inverse_permutation(std::span<const int> sigma) {
  check_permutation(sigma, static_cast<int>(sigma.size()));
  std::vector<int> inv(sigma.size());
  for (std::size_t a = 0; a < sigma.size(); ++a) inv[sigma[a]] = static_cast<int>(a);
  return inv;
}

Matrix permute_rows(const Matrix& rows, std::span<const int> sigma) {
  check_permutation(sigma, static_cast<int>(rows.rows()));
  Matrix out(rows.rows(), rows.cols());
  for (Eigen::Index a = 0; a < rows.rows(); ++a) out.row(sigma[a]) = rows.row(a);
  return out;
}

State apply_permutation(const State& state, std::span<const int> sigma, bool permute_system) {
  State out;
  out.positions = permute_rows(state.positions, sigma);
  out.auxiliaries = permute_rows(state.auxiliaries, sigma);
  out.system = state.system;
  if (permute_system && state.system) out.system = std::make_shared<const SystemSpec>(state.system->permuted(sigma));
  return out;
}

Matrix apply_rigid_motion(const Matrix& positions, const Matrix& rotation, const Vector& shift) {
  const auto d = positions.cols();
  if (rotation.rows() != d || rotation.cols() != d || shift.size() != d) {
    throw std::invalid_argument("apply_rigid_motion: dimension mismatch");
  }
  const Matrix gram = rotation.transpose() * rotation;
  if ((gram - Matrix::Identity(d, d)).cwiseAbs().maxCoeff() > 1e-10) {
    throw std::invalid_argument("apply_rigid_motion: rotation is not orthogonal");
  }
  if (std::abs(rotation.determinant() - 1.0) > 1e-10) {
    throw std::invalid_argument("apply_rigid_motion: rotation has det != +1");
  }
  Matrix out = positions * rotation.transpose();
  out.rowwise() += shift.transpose();
  return out;
}

Matrix random_rotation(int dimension, RngStream& rng) {
  if (dimension == 1) return Matrix::Identity(1, 1);
  Matrix g = rng.normal_matrix(dimension, dimension);
  Eigen::HouseholderQR<Matrix> qr(g);
  Matrix q = qr.householderQ();
  const Matrix r = qr.matrixQR().triangularView<Eigen::Upper>();
  // Fix column signs so the factorization is unique (Haar measure).
  for (int c = 0; c < dimension; ++c) {
    if (r(c, c) < 0) q.col(c) *= -1.0;
  }
  if (q.determinant() < 0) q.col(0) *= -1.0;
  return q;
}

bool all_finite(const Matrix& m) { return m.allFinite(); }

}  // namespace tw
