#pragma once

#include "timewarp/training.hpp"

#include <functional>
#include <limits>

namespace tw {

/// Ordered sampler output. Positions are stored flat, frame-major.
struct Chain {
  SystemPtr system;
  int n_atoms = 0;
  int dimension = 0;
  Matrix initial;
  std::vector<double> positions;
  std::vector<std::uint8_t> accepted;
  std::vector<std::int64_t> batch_index;
  std::vector<double> energies;

  long long requested = 0;  ///< M
  int batch = 1;            ///< B
  std::uint64_t seed = 0;
  std::string checkpoint_id;
  double t_sampling = 0.0;  ///< seconds, excludes model loading

  long long acceptance_count = 0;
  long long proposals = 0;
  long long constraint_rejections = 0;
  long long nonfinite = 0;
  long long energy_evaluations = 0;
  bool aborted = false;
  std::string abort_reason;

  std::size_t size() const { return accepted.size(); }
  Matrix frame(std::size_t m) const;
  void push(const Matrix& x, bool was_accepted, std::int64_t batch_id, double energy);
  /// One coordinate of one atom across all frames.
  std::vector<double> coordinate(int atom, int axis) const;
};

/// Pure predicate on (previous positions, proposal positions); false rejects.
using Constraint = std::function<bool(const Matrix& previous, const Matrix& proposal)>;

Constraint always_pass();
/// Fails when the signed dihedral (i, j, k, l) changes sign. Requires d = 3.
Constraint dihedral_sign_constraint(int i, int j, int k, int l);

/// Proposal distribution over augmented states (positions, auxiliaries).
class Proposer {
 public:
  virtual ~Proposer() = default;
  /// `count` proposals from positions x, stacked row-wise, with the forward
  /// log-density of each (positions, auxiliaries) pair.
  virtual ConditionalFlow::Proposals propose(const Matrix& x, int count, RngStream& rng) = 0;
  /// log p((x, eps_b) | proposal_b) for every stacked proposal b.
  virtual Vector reverse_log_density(const Matrix& proposals, const Matrix& x, const Matrix& eps) = 0;
};

class FlowProposer : public Proposer {
 public:
  FlowProposer(ConditionalFlow& flow, std::vector<int> atom_types) : flow_(flow), types_(std::move(atom_types)) {}
  ConditionalFlow::Proposals propose(const Matrix& x, int count, RngStream& rng) override;
  Vector reverse_log_density(const Matrix& proposals, const Matrix& x, const Matrix& eps) override;

 private:
  ConditionalFlow& flow_;
  std::vector<int> types_;
};

/// Energy and temperature of the positional target; the auxiliary part of
/// the augmented target is always N(0, I).
struct TargetFn {
  std::function<double(const Matrix&)> energy;
  double temperature = 1.0;

  static TargetFn from(const Potential& potential);
  double log_mu(const Matrix& positions, const Matrix& auxiliaries) const;
};

/// min(0, log r) for one pair of augmented states; non-finite gives -inf.
double mh_log_alpha(const AugmentedTarget& target, ConditionalFlow& flow, std::span<const int> atom_types,
                    const State& x, const State& proposal);

/// Fresh N(0, I) auxiliaries; positions untouched.
State gibbs_refresh_aux(const State& state, RngStream& rng);

/// Batched Metropolis-Hastings with auxiliary refresh. Per batch the stream
/// is consumed as: proposer draws, then B auxiliary draws for the current
/// state, then B uniforms. Emits exactly M states (X_0 excluded) unless the
/// proposer fails, in which case the chain so far is returned with
/// `aborted` set.
Chain sample_mcmc(Proposer& proposer, const TargetFn& target, const Matrix& x0, long long M, int B, RngStream& rng,
                  const Constraint& constraint = always_pass());

Chain sample_mcmc(ConditionalFlow& flow, const AugmentedTarget& target, const State& x0, long long M, int B,
                  RngStream& rng, const Constraint& constraint = always_pass());

struct ExploreConfig {
  long long steps = 10000;
  int chains = 100;
  double delta_u_max = 30.0;
  int threads = 0;
};

/// Biased exploration: accept iff U(X~) - U(X) < delta_u_max and the
/// constraint passes. Chain c uses rng.child(c); chains are evaluated in
/// fixed groups so results do not depend on the thread count. Every chain
/// carries the total wall time.
std::vector<Chain> explore(ConditionalFlow& flow, const Potential& potential, const State& x0,
                           const ExploreConfig& config, RngStream& rng, const Constraint& constraint = always_pass());

inline constexpr double kInfinity = std::numeric_limits<double>::infinity();

}  // namespace tw
