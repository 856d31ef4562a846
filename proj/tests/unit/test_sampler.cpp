#include "timewarp/sampler.hpp"
#include "timewarp/training.hpp"

#include "helpers.hpp"

#include <doctest.h>

using namespace tw;

namespace {

FlowConfig small(int d) {
  FlowConfig c;
  c.dimension = d;
  c.n_coupling = 2;
  c.n_transformer = 1;
  c.feature_dim = 8;
  c.embedding_dim = 4;
  c.mlp_hidden = 8;
  c.lengthscales = {0.5};
  c.vocab_size = 4;
  return c;
}

SystemPtr particle() {
  auto s = std::make_shared<SystemSpec>();
  s->name = "particle";
  s->n_atoms = 1;
  s->dimension = 1;
  s->atom_types = {0};
  s->masses = {1.0};
  s->validate();
  return s;
}

/// Finite-state proposal Q on positions {0, 1, ..., K-1} with N(0, 1)
/// auxiliaries, so the augmented ratio reduces to the textbook one.
class DiscreteProposer : public Proposer {
 public:
  explicit DiscreteProposer(Matrix q) : q_(std::move(q)) {}

  ConditionalFlow::Proposals propose(const Matrix& x, int count, RngStream& rng) override {
    const int i = static_cast<int>(x(0, 0));
    ConditionalFlow::Proposals p{Matrix(count, 1), Matrix(count, 1), Vector(count)};
    for (int b = 0; b < count; ++b) {
      double u = rng.uniform();
      int j = 0;
      while (j + 1 < q_.cols() && u >= q_(i, j)) u -= q_(i, j++);
      p.positions(b, 0) = j;
      p.auxiliaries(b, 0) = rng.normal();
      p.log_prob[b] = std::log(q_(i, j)) + standard_normal_logpdf(p.auxiliaries.row(b));
    }
    return p;
  }

  Vector reverse_log_density(const Matrix& proposals, const Matrix& x, const Matrix& eps) override {
    Vector out(proposals.rows());
    for (Eigen::Index b = 0; b < proposals.rows(); ++b) {
      out[b] = std::log(q_(static_cast<int>(proposals(b, 0)), static_cast<int>(x(0, 0)))) +
               standard_normal_logpdf(eps.row(b));
    }
    return out;
  }

 private:
  Matrix q_;
};

Matrix analytic_kernel(const Matrix& q, const std::vector<double>& energy) {
  const auto k = q.rows();
  Matrix kern = Matrix::Zero(k, k);
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      if (i == j) continue;
      const double r = std::exp(energy[i] - energy[j]) * q(j, i) / q(i, j);
      kern(i, j) = q(i, j) * std::min(1.0, r);
    }
    kern(i, i) = 1.0 - kern.row(i).sum();
  }
  return kern;
}

Matrix empirical_kernel(const Chain& c, const Matrix& x0, int k) {
  Matrix counts = Matrix::Zero(k, k);
  int prev = static_cast<int>(x0(0, 0));
  for (std::size_t m = 0; m < c.size(); ++m) {
    const int next = static_cast<int>(c.positions[m]);
    counts(prev, next) += 1.0;
    prev = next;
  }
  for (int i = 0; i < k; ++i) counts.row(i) /= counts.row(i).sum();
  return counts;
}

double dw_tv(const Chain& c, const Potential& pot) {
  auto u = [&](double x) { return pot.energy(Matrix::Constant(1, 1, x)); };
  const auto ref = testing::quadrature_marginal(u, pot.temperature(), -3.0, 3.0, 60);
  return testing::total_variation(testing::histogram(c.coordinate(0, 0), -3.0, 3.0, 60), ref);
}

}  // namespace

TEST_CASE("gibbs refresh") {
  auto sys = particle();
  RngStream rng(1, 0);
  State s(Matrix::Constant(1, 1, 0.4), Matrix::Zero(1, 1), sys);
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  std::vector<double> draws;
  for (int i = 0; i < 100000; ++i) {
    State t = gibbs_refresh_aux(s, rng);
    CHECK_EQ(t.positions(0, 0), 0.4);
    draws.push_back(t.auxiliaries(0, 0));
    if (i < 100) {
      CHECK(log_mu_aug(target, t) - standard_normal_logpdf(t.auxiliaries) ==
            doctest::Approx(-pot.energy(s.positions)).epsilon(1e-14));
    }
  }
  CHECK(testing::ks_normal_pvalue(draws) > 0.01);
}

TEST_CASE("mh_log_alpha basics") {
  auto sys = particle();
  ConditionalFlow flow(small(1), 3, FlowInit::Random);
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  RngStream rng(2, 0);
  std::vector<int> types = {0};
  for (int i = 0; i < 20; ++i) {
    State x(rng.normal_matrix(1, 1), rng.normal_matrix(1, 1), sys);
    CHECK(mh_log_alpha(target, flow, types, x, x) == doctest::Approx(0.0).epsilon(1e-9));
  }
  // Flat target with the identity flow: symmetric proposal, always accept.
  ConditionalFlow id(small(1), 3, FlowInit::Identity);
  AugmentedTarget flat{Potential::double_well({0.0, 1.0}, 1.0)};
  for (int i = 0; i < 20; ++i) {
    State x(rng.normal_matrix(1, 1), rng.normal_matrix(1, 1), sys);
    State y(rng.normal_matrix(1, 1) * 3.0, rng.normal_matrix(1, 1), sys);
    CHECK(mh_log_alpha(flat, id, types, x, y) == doctest::Approx(0.0).epsilon(1e-12));
  }
  State far(Matrix::Constant(1, 1, 1e200), Matrix::Zero(1, 1), sys);
  State x(Matrix::Zero(1, 1), Matrix::Zero(1, 1), sys);
  CHECK(mh_log_alpha(target, id, types, x, far) == -kInfinity);
}

TEST_CASE("empirical kernel matches the analytic MH kernel") {
  SUBCASE("two states") {
    Matrix q(2, 2);
    q << 0.3, 0.7, 0.6, 0.4;
    const std::vector<double> e = {0.0, 0.8};
    DiscreteProposer prop(q);
    TargetFn target{[&](const Matrix& x) { return e[static_cast<int>(x(0, 0))]; }, 1.0};
    RngStream rng(4, 0);
    Matrix x0 = Matrix::Zero(1, 1);
    Chain c = sample_mcmc(prop, target, x0, 1000000, 1, rng);
    CHECK((empirical_kernel(c, x0, 2) - analytic_kernel(q, e)).cwiseAbs().maxCoeff() < 0.01);
  }
  SUBCASE("three states, batched") {
    Matrix q(3, 3);
    q << 0.2, 0.5, 0.3, 0.4, 0.1, 0.5, 0.25, 0.25, 0.5;
    const std::vector<double> e = {0.0, 1.2, 0.5};
    DiscreteProposer prop(q);
    TargetFn target{[&](const Matrix& x) { return e[static_cast<int>(x(0, 0))]; }, 1.0};
    RngStream rng(5, 0);
    Matrix x0 = Matrix::Zero(1, 1);
    Chain c = sample_mcmc(prop, target, x0, 1000000, 8, rng);
    CHECK(c.size() == 1000000);
    CHECK((empirical_kernel(c, x0, 3) - analytic_kernel(q, e)).cwiseAbs().maxCoeff() < 0.01);
  }
}

TEST_CASE("B = 1 matches a single-proposal reference loop") {
  auto sys = particle();
  ConditionalFlow flow(small(1), 7, FlowInit::Random);
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  std::vector<int> types = {0};
  const long long M = 100000;
  State x0(Matrix::Constant(1, 1, -1.0), Matrix::Zero(1, 1), sys);

  RngStream a(8, 0);
  Chain chain = sample_mcmc(flow, target, x0, M, 1, a);

  RngStream b(8, 0);
  Matrix x = x0.positions;
  long long accepted = 0, mismatches = 0;
  for (long long m = 0; m < M; ++m) {
    Matrix zp = b.normal_matrix(1, 1);
    Matrix zv = b.normal_matrix(1, 1);
    Matrix eps = b.normal_matrix(1, 1);
    const double u = b.uniform();
    auto prop = flow.sample_from_latents(FlowInput::repeat(x, types, 1), zp, zv);
    const double la =
        mh_log_alpha(target, flow, types, State(x, eps, sys), State(prop.positions, prop.auxiliaries, sys));
    if (u < std::exp(la)) {
      x = prop.positions;
      ++accepted;
    }
    if (x(0, 0) != chain.positions[static_cast<std::size_t>(m)]) ++mismatches;
  }
  CHECK(mismatches == 0);
  CHECK(chain.acceptance_count == accepted);
  CHECK(chain.proposals == M);
}

TEST_CASE("stationarity on the double well") {
  auto sys = particle();
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  State x0(Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1), sys);
  for (auto init : {FlowInit::Identity, FlowInit::Random}) {
    ConditionalFlow flow(small(1), 9, init);
    RngStream rng(10, 0);
    Chain c = sample_mcmc(flow, target, x0, 200000, 4, rng);
    CHECK(dw_tv(c, pot) < 0.05);
  }
}

TEST_CASE("batch size does not change the stationary law") {
  auto sys = particle();
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  State x0(Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1), sys);
  ConditionalFlow flow(small(1), 11, FlowInit::Identity);
  auto thinned = [&](int B, std::uint64_t stream) {
    RngStream rng(12, stream);
    Chain c = sample_mcmc(flow, target, x0, 100000, B, rng);
    std::vector<double> xs;
    for (std::size_t m = 0; m < c.size(); m += 50) xs.push_back(c.positions[m]);
    return xs;
  };
  CHECK(testing::ks_two_sample_pvalue(thinned(1, 0), thinned(16, 1)) > 0.01);
}

TEST_CASE("batched sampler accounting") {
  auto sys = particle();
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  State x0(Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1), sys);
  ConditionalFlow flow(small(1), 13, FlowInit::Random);
  for (int B : {1, 3, 8}) {
    for (long long M : {1LL, 7LL, 1000LL}) {
      RngStream rng(14, 0);
      Chain c = sample_mcmc(flow, target, x0, M, B, rng);
      REQUIRE(c.size() == static_cast<std::size_t>(M));
      long long moves = 0, flags = 0;
      double prev = x0.positions(0, 0);
      for (std::size_t m = 0; m < c.size(); ++m) {
        if (c.positions[m] != prev) ++moves;
        flags += c.accepted[m];
        prev = c.positions[m];
        CHECK(c.energies[m] == pot.energy(c.frame(m)));
        if (m > 0) CHECK(c.batch_index[m] >= c.batch_index[m - 1]);
      }
      CHECK(moves == c.acceptance_count);
      CHECK(flags == c.acceptance_count);
      // Within one batch at most one acceptance, and it ends the batch.
      for (std::size_t m = 0; m + 1 < c.size(); ++m) {
        if (c.accepted[m]) CHECK(c.batch_index[m + 1] > c.batch_index[m]);
      }
    }
  }
  RngStream rng(15, 0);
  auto reject_all = [](const Matrix&, const Matrix&) { return false; };
  Chain none = sample_mcmc(flow, target, x0, 500, 4, rng, reject_all);
  CHECK(none.size() == 500);
  CHECK(none.acceptance_count == 0);
  CHECK(none.constraint_rejections == 500);
  for (double v : none.positions) CHECK(v == 1.0);
  CHECK_THROWS_AS(sample_mcmc(flow, target, x0, 0, 1, rng), std::invalid_argument);
  CHECK_THROWS_AS(sample_mcmc(flow, target, x0, 1, 0, rng), std::invalid_argument);
}

TEST_CASE("proposer failure aborts with the chain so far") {
  class Failing : public DiscreteProposer {
   public:
    using DiscreteProposer::DiscreteProposer;
    ConditionalFlow::Proposals propose(const Matrix& x, int count, RngStream& rng) override {
      if (++calls > 5) throw FlowError("non-finite output", 0);
      return DiscreteProposer::propose(x, count, rng);
    }
    int calls = 0;
  };
  Failing prop(Matrix::Constant(2, 2, 0.5));
  TargetFn target{[](const Matrix&) { return 0.0; }, 1.0};
  RngStream rng(16, 0);
  Chain c = sample_mcmc(prop, target, Matrix::Zero(1, 1), 100, 2, rng);
  CHECK(c.aborted);
  CHECK(c.size() > 0);
  CHECK(c.size() <= 10);
  CHECK(c.abort_reason.find("non-finite") != std::string::npos);
}

TEST_CASE("explore") {
  auto sys = particle();
  auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  State x0(Matrix::Constant(1, 1, 1.0), Matrix::Zero(1, 1), sys);
  ConditionalFlow id(small(1), 17, FlowInit::Identity);

  SUBCASE("infinite cutoff is a Gaussian random walk") {
    RngStream rng(18, 0);
    auto chains = explore(id, pot, x0, {2000, 3, kInfinity, 1}, rng);
    REQUIRE(chains.size() == 3);
    std::vector<double> steps;
    for (const auto& c : chains) {
      CHECK(c.acceptance_count == 2000);
      double prev = 1.0;
      for (double v : c.positions) {
        steps.push_back(v - prev);
        prev = v;
      }
    }
    CHECK(testing::ks_normal_pvalue(steps) > 0.01);
  }
  SUBCASE("minus infinite cutoff rejects everything") {
    RngStream rng(19, 0);
    auto chains = explore(id, pot, x0, {300, 2, -kInfinity, 1}, rng);
    for (const auto& c : chains) {
      CHECK(c.size() == 300);
      CHECK(c.acceptance_count == 0);
      for (double v : c.positions) CHECK(v == 1.0);
    }
  }
  SUBCASE("energy increases stay below the cutoff; thread count does not matter") {
    ConditionalFlow flow(small(1), 20, FlowInit::Random);
    RngStream r1(21, 0), r2(21, 0);
    auto one = explore(flow, pot, x0, {500, 23, 0.5, 1}, r1);
    auto many = explore(flow, pot, x0, {500, 23, 0.5, 3}, r2);
    for (std::size_t k = 0; k < one.size(); ++k) {
      CHECK(one[k].positions == many[k].positions);
      double prev = pot.energy(x0.positions);
      for (double e : one[k].energies) {
        CHECK(e - prev < 0.5);
        prev = e;
      }
    }
  }
}

TEST_CASE("explore with a trained flow crosses a barrier Langevin does not") {
  // Train on a low-barrier well where MD crosses often, then explore a
  // barrier of 8 kT.
  auto sys = particle();
  auto easy = Potential::double_well({1.5, 1.0}, 1.0);
  auto hard = Potential::double_well({8.0, 1.0}, 1.0);
  RngStream rng(22, 0);
  LangevinParams lp;
  lp.timestep = 0.01;
  auto traj = simulate(sys, easy, lp, 200000, 50, Matrix::Constant(1, 1, -1.0), rng);
  PairDataset ds;
  ds.systems = {sys};
  ds.system_split = {Split::Train};
  ds.pairs = extract_pairs(traj, 0, 2000, rng);
  ds.pair_split.assign(ds.pairs.size(), Split::Train);
  assign_val_split(ds, 0.1);
  ConditionalFlow flow(small(1), 23, FlowInit::Identity);
  TrainConfig cfg;
  cfg.steps = 400;
  cfg.lr = 3e-3;
  cfg.batch_size = 64;
  cfg.eval_every = 100;
  cfg.rotation_augment = false;
  train(flow, ds, {easy}, cfg, rng);

  State x0(Matrix::Constant(1, 1, -1.0), Matrix::Zero(1, 1), sys);
  auto chains = explore(flow, hard, x0, {10000, 1, 30.0, 1}, rng);
  const auto xs = chains[0].coordinate(0, 0);
  const bool left = std::any_of(xs.begin(), xs.end(), [](double v) { return v < -0.8; });
  const bool right = std::any_of(xs.begin(), xs.end(), [](double v) { return v > 0.8; });
  CHECK((left && right));

  // Langevin with the same number of energy evaluations, over 20 seeds; a
  // crossing within the budget has probability of a few percent.
  int md_crossed = 0;
  for (std::uint64_t k = 0; k < 20; ++k) {
    RngStream md_rng = rng.child(k);
    auto md = simulate(sys, hard, lp, chains[0].energy_evaluations, 1, x0.positions, md_rng);
    bool right_md = false;
    for (const auto& f : md.frames) right_md = right_md || f(0, 0) > 0.8;
    md_crossed += right_md ? 1 : 0;
  }
  CHECK(md_crossed <= 3);
}

TEST_CASE("dihedral sign constraint") {
  auto sys = testing::bead_chain(4, 3);
  // A chain with dihedral near 1 rad.
  Matrix x(4, 3);
  x << 1, 0, 0, 0, 0, 0, 0, 1, 0, std::cos(1.0), 1, -std::sin(1.0);
  CHECK(dihedral_angle(x, 0, 1, 2, 3) == doctest::Approx(1.0).epsilon(1e-9));
  auto c = dihedral_sign_constraint(0, 1, 2, 3);
  Matrix mirror = x;
  mirror.col(2) *= -1.0;
  CHECK_FALSE(c(x, mirror));
  CHECK(c(x, x));
  RngStream rng(24, 0);
  int failures = 0;
  for (int i = 0; i < 10000; ++i) {
    Matrix y = x;
    for (Eigen::Index k = 0; k < y.size(); ++k) y.data()[k] += 0.0099 * (2.0 * rng.uniform() - 1.0);
    failures += c(x, y) ? 0 : 1;
  }
  CHECK(failures == 0);
  CHECK(always_pass()(x, mirror));
}
