#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tw {

/// Row-major dense array; rows are atoms, columns are Cartesian components.
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;

struct Bond {
  int i = 0;
  int j = 0;
  double k = 0.0;
  double r0 = 0.0;
};

struct Angle {
  int i = 0;
  int j = 0;
  int k = 0;
  double k_a = 0.0;
  double theta0 = 0.0;
};

struct Dihedral {
  int i = 0;
  int j = 0;
  int k = 0;
  int l = 0;
  double k_d = 0.0;
  int n = 1;
  double phi0 = 0.0;
};

/// Topology and parameters of one molecular system. Atom types feed the
/// learned embedding of the flow, so two systems that share types share
/// the same per-atom features.
struct SystemSpec {
  static constexpr int kFormatVersion = 1;
  static constexpr int kMaxAtomTypes = 64;

  std::string name;
  int n_atoms = 0;
  int dimension = 3;
  std::vector<int> atom_types;
  std::vector<double> masses;
  std::vector<Bond> bonds;
  std::vector<Angle> angles;
  std::vector<Dihedral> dihedrals;
  double nonbonded_sigma = 1.0;

  /// Throws std::invalid_argument on any violated invariant.
  void validate() const;

  /// Reorders atoms so that new atom i is old atom sigma^-1(i); bonded terms
  /// are relabeled accordingly.
  SystemSpec permuted(std::span<const int> sigma) const;
};

using SystemPtr = std::shared_ptr<const SystemSpec>;

/// One configuration: positions plus the non-physical auxiliary channel.
struct State {
  Matrix positions;
  Matrix auxiliaries;
  SystemPtr system;

  State() = default;
  State(Matrix positions_, Matrix auxiliaries_, SystemPtr system_);

  int n_atoms() const { return static_cast<int>(positions.rows()); }
  int dimension() const { return static_cast<int>(positions.cols()); }
};

/// Seeded pseudo-random stream. Equal (seed, stream) pairs always produce
/// the same draw sequence; parallel tasks must use distinct stream ids.
class RngStream {
 public:
  RngStream(std::uint64_t seed, std::uint64_t stream);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t stream() const { return stream_; }
  std::uint64_t draws() const { return draws_; }

  double uniform();
  double normal();
  std::uint64_t next_u64();
  /// Uniform integer in [0, n).
  std::size_t below(std::size_t n);
  Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols);

  /// Child stream derived from this stream's identity (not its position).
  RngStream child(std::uint64_t sub) const;

 private:
  std::uint64_t seed_;
  std::uint64_t stream_;
  std::uint64_t draws_ = 0;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Mixes two 64-bit words into one (splitmix64 finalizer).
std::uint64_t mix64(std::uint64_t a, std::uint64_t b);

Vector center_of_geometry(const Matrix& positions);

/// Row i of the output is row sigma^-1(i) of the input, i.e. old atom a moves
/// to slot sigma[a].
Matrix permute_rows(const Matrix& rows, std::span<const int> sigma);
/// With permute_system the returned state references a relabeled SystemSpec.
State apply_permutation(const State& state, std::span<const int> sigma, bool permute_system = false);
std::vector<int> inverse_permutation(std::span<const int> sigma);
void check_permutation(std::span<const int> sigma, int n);

/// Maps every row x to R x + a. R must be a proper rotation.
Matrix apply_rigid_motion(const Matrix& positions, const Matrix& rotation, const Vector& shift);

/// Uniform random rotation: QR of a Gaussian matrix with sign fix.
Matrix random_rotation(int dimension, RngStream& rng);

bool all_finite(const Matrix& m);

}  // namespace tw
