#include "timewarp/sampler.hpp"

#include "timewarp/parallel.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>

namespace tw {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

Chain empty_chain(SystemPtr system, const Matrix& x0, long long M, int B, std::uint64_t seed) {
  Chain c;
  c.system = std::move(system);
  c.n_atoms = static_cast<int>(x0.rows());
  c.dimension = static_cast<int>(x0.cols());
  c.initial = x0;
  c.requested = M;
  c.batch = B;
  c.seed = seed;
  const auto reserve = static_cast<std::size_t>(std::min<long long>(M, 1LL << 24));
  c.positions.reserve(reserve * static_cast<std::size_t>(x0.size()));
  c.accepted.reserve(reserve);
  c.batch_index.reserve(reserve);
  c.energies.reserve(reserve);
  return c;
}

}  // namespace

Matrix Chain::frame(std::size_t m) const {
  Matrix x(n_atoms, dimension);
  const double* p = positions.data() + m * static_cast<std::size_t>(n_atoms * dimension);
  for (int r = 0; r < n_atoms; ++r) {
    for (int c = 0; c < dimension; ++c) x(r, c) = *p++;
  }
  return x;
}

void Chain::push(const Matrix& x, bool was_accepted, std::int64_t batch_id, double energy) {
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    for (Eigen::Index c = 0; c < x.cols(); ++c) positions.push_back(x(r, c));
  }
  accepted.push_back(was_accepted ? 1 : 0);
  batch_index.push_back(batch_id);
  energies.push_back(energy);
}

std::vector<double> Chain::coordinate(int atom, int axis) const {
  std::vector<double> out(size());
  const std::size_t stride = static_cast<std::size_t>(n_atoms * dimension);
  for (std::size_t m = 0; m < out.size(); ++m) out[m] = positions[m * stride + atom * dimension + axis];
  return out;
}

Constraint always_pass() {
  return [](const Matrix&, const Matrix&) { return true; };
}

Constraint dihedral_sign_constraint(int i, int j, int k, int l) {
  return [=](const Matrix& prev, const Matrix& next) {
    const double a = dihedral_angle(prev, i, j, k, l);
    const double b = dihedral_angle(next, i, j, k, l);
    return std::signbit(a) == std::signbit(b);
  };
}

ConditionalFlow::Proposals FlowProposer::propose(const Matrix& x, int count, RngStream& rng) {
  return flow_.sample(FlowInput::repeat(x, types_, count), rng);
}

Vector FlowProposer::reverse_log_density(const Matrix& proposals, const Matrix& x, const Matrix& eps) {
  const auto n = x.rows();
  const auto count = static_cast<int>(proposals.rows() / n);
  FlowInput reverse = FlowInput::repeat(x, types_, count);
  reverse.cond = proposals;
  Matrix targets(proposals.rows(), proposals.cols());
  for (int b = 0; b < count; ++b) targets.middleRows(b * n, n) = x;
  return flow_.log_density(reverse, targets, eps);
}

TargetFn TargetFn::from(const Potential& potential) {
  return {[potential](const Matrix& x) { return potential.energy(x); }, potential.temperature()};
}

double TargetFn::log_mu(const Matrix& positions, const Matrix& auxiliaries) const {
  return -energy(positions) / temperature + standard_normal_logpdf(auxiliaries);
}

double mh_log_alpha(const AugmentedTarget& target, ConditionalFlow& flow, std::span<const int> atom_types,
                    const State& x, const State& proposal) {
  const double r =
      r_theta(target, flow, atom_types, x.positions, x.auxiliaries, proposal.positions, proposal.auxiliaries);
  if (!std::isfinite(r)) return -kInfinity;
  return std::min(0.0, r);
}

State gibbs_refresh_aux(const State& state, RngStream& rng) {
  State out = state;
  out.auxiliaries = rng.normal_matrix(state.positions.rows(), state.positions.cols());
  return out;
}

Chain sample_mcmc(Proposer& proposer, const TargetFn& target, const Matrix& x0, long long M, int B, RngStream& rng,
                  const Constraint& constraint) {
  if (M < 1) throw std::invalid_argument("sample_mcmc: M must be >= 1");
  if (B < 1) throw std::invalid_argument("sample_mcmc: B must be >= 1");
  Chain chain = empty_chain(nullptr, x0, M, B, rng.seed());
  const auto n = x0.rows();
  const auto d = x0.cols();
  const auto total = static_cast<std::size_t>(M);

  Matrix x = x0;
  double ux = target.energy(x);
  ++chain.energy_evaluations;
  std::vector<double> u(static_cast<std::size_t>(B));
  const auto t0 = Clock::now();

  for (std::int64_t batch_id = 0; chain.size() < total; ++batch_id) {
    ConditionalFlow::Proposals props;
    Vector log_rev;
    Matrix eps;
    try {
      props = proposer.propose(x, B, rng);
      eps = rng.normal_matrix(B * n, d);
      for (auto& ub : u) ub = rng.uniform();
      log_rev = proposer.reverse_log_density(props.positions, x, eps);
    } catch (const std::exception& e) {
      chain.aborted = true;
      chain.abort_reason = e.what();
      spdlog::error("sample_mcmc: proposer failed after {} states: {}", chain.size(), e.what());
      break;
    }
    for (int b = 0; b < B && chain.size() < total; ++b) {
      ++chain.proposals;
      const Matrix y = props.positions.middleRows(b * n, n);
      if (!constraint(x, y)) {
        ++chain.constraint_rejections;
        chain.push(x, false, batch_id, ux);
        continue;
      }
      const double uy = target.energy(y);
      ++chain.energy_evaluations;
      const double log_r = target.log_mu(y, props.auxiliaries.middleRows(b * n, n)) + log_rev[b] -
                           (-ux / target.temperature + standard_normal_logpdf(eps.middleRows(b * n, n))) -
                           props.log_prob[b];
      if (!std::isfinite(log_r)) {
        ++chain.nonfinite;
        chain.push(x, false, batch_id, ux);
        continue;
      }
      if (u[static_cast<std::size_t>(b)] < std::exp(std::min(0.0, log_r))) {
        x = y;
        ux = uy;
        ++chain.acceptance_count;
        chain.push(x, true, batch_id, ux);
        break;
      }
      chain.push(x, false, batch_id, ux);
    }
  }
  chain.t_sampling = seconds_since(t0);
  return chain;
}

Chain sample_mcmc(ConditionalFlow& flow, const AugmentedTarget& target, const State& x0, long long M, int B,
                  RngStream& rng, const Constraint& constraint) {
  if (!x0.system) throw std::invalid_argument("sample_mcmc: initial state has no system");
  FlowProposer proposer(flow, x0.system->atom_types);
  Chain chain = sample_mcmc(proposer, TargetFn::from(target.potential), x0.positions, M, B, rng, constraint);
  chain.system = x0.system;
  return chain;
}

std::vector<Chain> explore(ConditionalFlow& flow, const Potential& potential, const State& x0,
                           const ExploreConfig& config, RngStream& rng, const Constraint& constraint) {
  if (config.steps < 1) throw std::invalid_argument("explore: steps must be >= 1");
  if (config.chains < 1) throw std::invalid_argument("explore: chains must be >= 1");
  if (!x0.system) throw std::invalid_argument("explore: initial state has no system");
  constexpr int kGroup = 10;
  const auto n = x0.positions.rows();
  const auto d = x0.positions.cols();
  const auto& types = x0.system->atom_types;
  const double u0 = potential.energy(x0.positions);

  std::vector<Chain> chains;
  for (int c = 0; c < config.chains; ++c) {
    chains.push_back(empty_chain(x0.system, x0.positions, config.steps, 1, rng.seed()));
    chains.back().energy_evaluations = 1;
  }
  const int n_groups = (config.chains + kGroup - 1) / kGroup;
  const auto t0 = Clock::now();

  parallel_for(static_cast<std::size_t>(n_groups), config.threads, [&](std::size_t g) {
    const int first = static_cast<int>(g) * kGroup;
    const int count = std::min(kGroup, config.chains - first);
    std::vector<RngStream> streams;
    std::vector<double> energy(static_cast<std::size_t>(count), u0);
    for (int k = 0; k < count; ++k) streams.push_back(rng.child(static_cast<std::uint64_t>(first + k)));
    FlowInput input = FlowInput::repeat(x0.positions, types, count);
    Matrix zp(count * n, d), zv(count * n, d);

    for (long long step = 0; step < config.steps; ++step) {
      for (int k = 0; k < count; ++k) {
        zp.middleRows(k * n, n) = streams[static_cast<std::size_t>(k)].normal_matrix(n, d);
        zv.middleRows(k * n, n) = streams[static_cast<std::size_t>(k)].normal_matrix(n, d);
      }
      ConditionalFlow::Proposals props;
      try {
        props = flow.sample_from_latents(input, zp, zv);
      } catch (const std::exception& e) {
        for (int k = 0; k < count; ++k) {
          chains[static_cast<std::size_t>(first + k)].aborted = true;
          chains[static_cast<std::size_t>(first + k)].abort_reason = e.what();
        }
        spdlog::error("explore: flow failed at step {}: {}", step, e.what());
        return;
      }
      for (int k = 0; k < count; ++k) {
        Chain& chain = chains[static_cast<std::size_t>(first + k)];
        auto& ux = energy[static_cast<std::size_t>(k)];
        const Matrix x = input.cond.middleRows(k * n, n);
        const Matrix y = props.positions.middleRows(k * n, n);
        ++chain.proposals;
        bool accept = false;
        double uy = ux;
        if (!constraint(x, y)) {
          ++chain.constraint_rejections;
        } else {
          uy = potential.energy(y);
          ++chain.energy_evaluations;
          if (!std::isfinite(uy)) {
            ++chain.nonfinite;
          } else {
            accept = uy - ux < config.delta_u_max;
          }
        }
        if (accept) {
          input.cond.middleRows(k * n, n) = y;
          ux = uy;
          ++chain.acceptance_count;
          chain.push(y, true, step, uy);
        } else {
          chain.push(x, false, step, ux);
        }
      }
    }
  });
  const double elapsed = seconds_since(t0);
  for (auto& c : chains) c.t_sampling = elapsed;
  return chains;
}

}  // namespace tw
