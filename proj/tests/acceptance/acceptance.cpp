// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance [work_dir] [--only 1,2,...]

#include "timewarp/pipeline.hpp"

#include "../unit/helpers.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <functional>
#include <map>
#include <numbers>
#include <set>
#include <sstream>

using namespace tw;
namespace fs = std::filesystem;
using io::json;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

struct Outcome {
  bool pass = false;
  std::string detail;
};

fs::path g_work = fs::temp_directory_path() / "tw_acceptance";

std::string fmt_g(double v) {
  std::ostringstream s;
  s.precision(4);
  s << v;
  return s.str();
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

FlowConfig small_flow(int d, int layers, int features) {
  FlowConfig c;
  c.dimension = d;
  c.n_coupling = layers;
  c.n_transformer = 1;
  c.feature_dim = features;
  c.embedding_dim = 4;
  c.mlp_hidden = features;
  c.lengthscales = {0.5, 1.0};
  c.vocab_size = 8;
  return c;
}

// ------------------------------------------------------------------ 1

Outcome sampler_exactness() {
  const auto t0 = Clock::now();
  auto sys = particle();
  const auto pot = Potential::double_well({1.0, 1.0}, 1.0);
  AugmentedTarget target{pot};
  auto u = [&](double x) { return pot.energy(Matrix::Constant(1, 1, x)); };
  const double lo = -3.0, hi = 3.0;
  const int bins = 60;
  const auto reference = testing::quadrature_marginal(u, 1.0, lo, hi, bins, 100000);

  std::string detail;
  bool pass = true;
  for (auto init : {FlowInit::Identity, FlowInit::Random}) {
    ConditionalFlow flow(small_flow(1, 2, 8), 21, init);
    // Push the random flow further from a symmetric random walk.
    if (init == FlowInit::Random) flow.set_position_scale_bias(0, 0.4);
    RngStream rng(1, init == FlowInit::Identity ? 0 : 1);
    State x0(Matrix::Constant(1, 1, -1.0), Matrix::Zero(1, 1), sys);
    const Chain c = sample_mcmc(flow, target, x0, 1000000, 4, rng);
    const double tv = testing::total_variation(testing::histogram(c.coordinate(0, 0), lo, hi, bins), reference);
    pass = pass && c.size() == 1000000 && tv < 0.05;
    detail += std::string(init == FlowInit::Identity ? "identity" : "random") + " TV " + fmt_g(tv) +
              " (acceptance " + fmt_g(static_cast<double>(c.acceptance_count) / c.proposals) + "), ";
  }
  const double secs = seconds_since(t0);
  pass = pass && secs < 600.0;
  return {pass, detail + "M = 1e6 each, " + fmt_g(secs) + " s (limits: TV < 0.05, 600 s)"};
}

// ------------------------------------------------------------------ 2

/// Finite-state proposal on positions {0, .., K-1} with N(0, 1) auxiliaries.
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

Outcome kernel_correctness() {
  Matrix q(3, 3);
  q << 0.2, 0.5, 0.3, 0.4, 0.1, 0.5, 0.25, 0.25, 0.5;
  const std::vector<double> e = {0.0, 1.2, 0.5};

  // Metropolis-Hastings kernel written out by hand.
  Matrix analytic = Matrix::Zero(3, 3);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 3; ++j) {
      if (i != j) analytic(i, j) = q(i, j) * std::min(1.0, std::exp(e[i] - e[j]) * q(j, i) / q(i, j));
    }
    analytic(i, i) = 1.0 - analytic.row(i).sum();
  }

  DiscreteProposer prop(q);
  TargetFn target{[&](const Matrix& x) { return e[static_cast<std::size_t>(x(0, 0))]; }, 1.0};
  RngStream rng(2, 0);
  const Matrix x0 = Matrix::Zero(1, 1);
  const Chain c = sample_mcmc(prop, target, x0, 1000000, 1, rng);

  Matrix counts = Matrix::Zero(3, 3);
  int prev = 0;
  for (std::size_t m = 0; m < c.size(); ++m) {
    const int next = static_cast<int>(c.positions[m]);
    counts(prev, next) += 1.0;
    prev = next;
  }
  for (int i = 0; i < 3; ++i) counts.row(i) /= counts.row(i).sum();
  const double worst = (counts - analytic).cwiseAbs().maxCoeff();
  return {c.size() == 1000000 && worst < 0.01,
          "max |empirical - analytic| = " + fmt_g(worst) + " over 1e6 steps (limit 0.01)"};
}

// ------------------------------------------------------------------ 3

Outcome flow_bijectivity() {
  const auto t0 = Clock::now();
  // Inversion on random conditioning and latents.
  ConditionalFlow flow3(small_flow(3, 6, 8), 31, FlowInit::Random);
  RngStream rng(3, 0);
  const std::vector<int> types4 = {0, 1, 2, 1};
  double worst_inv = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Matrix x = rng.normal_matrix(4, 3);
    const FlowInput in = FlowInput::repeat(x, types4, 1);
    const Matrix zp = rng.normal_matrix(4, 3), zv = rng.normal_matrix(4, 3);
    ad::Tape tape(false);
    auto ctx = flow3.context(tape, in);
    auto f = flow3.forward(tape, ctx, tape.constant(zp), tape.constant(zv));
    auto g = flow3.inverse(tape, ctx, f.p, f.v);
    worst_inv = std::max({worst_inv, (g.p.value() - zp).cwiseAbs().maxCoeff(),
                          (g.v.value() - zv).cwiseAbs().maxCoeff()});
  }

  // Whole-flow log |det J| against a central-difference Jacobian (dim 8).
  ConditionalFlow flow2(small_flow(2, 4, 8), 32, FlowInit::Random);
  const std::vector<int> types2 = {0, 3};
  auto map = [&](const FlowInput& in, const Matrix& z) {
    ad::Tape tape(false);
    auto ctx = flow2.context(tape, in);
    auto f = flow2.forward(tape, ctx, tape.constant(z.leftCols(2)), tape.constant(z.rightCols(2)));
    Matrix out(2, 4);
    out << f.p.value(), f.v.value();
    return std::pair<Matrix, double>{out, f.log_det.scalar()};
  };
  double worst_det = 0.0;
  for (int t = 0; t < 20; ++t) {
    const FlowInput in = FlowInput::repeat(rng.normal_matrix(2, 2), types2, 1);
    const Matrix z = rng.normal_matrix(2, 4);
    const double ld = map(in, z).second;
    Eigen::MatrixXd jac(8, 8);
    const double h = 1e-6;
    for (int k = 0; k < 8; ++k) {
      Matrix up = z, dn = z;
      up(k / 4, k % 4) += h;
      dn(k / 4, k % 4) -= h;
      const Matrix dy = (map(in, up).first - map(in, dn).first) / (2.0 * h);
      for (int m = 0; m < 8; ++m) jac(m, k) = dy(m / 4, m % 4);
    }
    worst_det = std::max(worst_det, std::abs(std::log(std::abs(jac.determinant())) - ld));
  }

  // Grid quadrature of p(y^p, y^v | x) for N = 2, d = 1 (four dimensions).
  ConditionalFlow flow1(small_flow(1, 3, 8), 33, FlowInit::Random);
  Matrix x(2, 1);
  x << -0.3, 0.5;
  const std::vector<int> types1 = {0, 1};
  const int n = 33;
  const double lo = -6.5, hi = 6.5, h = (hi - lo) / (n - 1);
  const int chunk = n * n * n;
  const FlowInput in = FlowInput::repeat(x, types1, chunk);
  double mass = 0.0;
  for (int a = 0; a < n; ++a) {
    Matrix yp(2 * chunk, 1), yv(2 * chunk, 1);
    Vector w(chunk);
    for (int k = 0; k < chunk; ++k) {
      const int idx[4] = {a, k / (n * n), (k / n) % n, k % n};
      double wt = 1.0;
      for (int g : idx) wt *= (g == 0 || g == n - 1) ? 0.5 : 1.0;
      w[k] = wt;
      yp(2 * k, 0) = x(0, 0) + lo + h * idx[0];
      yp(2 * k + 1, 0) = x(1, 0) + lo + h * idx[1];
      yv(2 * k, 0) = lo + h * idx[2];
      yv(2 * k + 1, 0) = lo + h * idx[3];
    }
    const Vector lp = flow1.log_density(in, yp, yv);
    mass += (w.array() * lp.array().exp()).sum();
  }
  mass *= h * h * h * h;

  const double secs = seconds_since(t0);
  const bool pass = worst_inv < 1e-6 && worst_det < 1e-4 && std::abs(mass - 1.0) < 0.01 && secs < 300.0;
  return {pass, "inversion residual " + fmt_g(worst_inv) + " (1000 cases), log det error " + fmt_g(worst_det) +
                    " (dim 8), density mass " + fmt_g(mass) + ", " + fmt_g(secs) + " s"};
}

// ------------------------------------------------------------------ 4

/// MD pairs of a planar three-bead chain.
struct PlanarData {
  PairDataset ds;
  std::vector<Potential> pots;
};

PlanarData planar_chain_data() {
  PlanarData d;
  FamilyConfig f;
  f.n_beads = 3;
  f.dimension = 2;
  f.bond_k = 30.0;
  f.angle_k = 8.0;
  auto sys = bead_system(f, {0, 1, 2});
  d.pots.push_back(Potential::bead_chain(sys, 1.0));
  LangevinParams lp;
  lp.timestep = 0.01;
  RngStream rng(41, 0);
  auto traj = simulate(sys, d.pots[0], lp, 400000, 50, initial_positions(*sys, d.pots[0]), rng);
  d.ds.systems.push_back(sys);
  d.ds.system_split.push_back(Split::Train);
  d.ds.pairs = extract_pairs(traj, 0, 8000, rng);
  assign_val_split(d.ds, 0.1);
  return d;
}

Outcome symmetry_suite() {
  const auto t0 = Clock::now();
  ConditionalFlow flow(small_flow(3, 4, 8), 42, FlowInit::Random);
  RngStream rng(4, 0);
  const std::vector<int> types = {0, 1, 1, 2, 1};

  // Type-preserving permutations of the three type-1 atoms.
  double worst_perm = 0.0;
  for (int t = 0; t < 50; ++t) {
    const Matrix x = rng.normal_matrix(5, 3);
    const Matrix yp = x + 0.5 * rng.normal_matrix(5, 3), yv = rng.normal_matrix(5, 3);
    const double base = flow.log_density(FlowInput::repeat(x, types, 1), yp, yv)[0];
    for (const std::vector<int>& sigma : {std::vector<int>{0, 2, 1, 3, 4}, std::vector<int>{0, 4, 2, 3, 1},
                                          std::vector<int>{0, 2, 4, 3, 1}}) {
      const double p = flow.log_density(FlowInput::repeat(permute_rows(x, sigma), types, 1),
                                        permute_rows(yp, sigma), permute_rows(yv, sigma))[0];
      worst_perm = std::max(worst_perm, std::abs(p - base));
    }
  }

  // Translations: four atoms, dyadic coordinates and integer shifts keep
  // the centroid and every subtraction exact, so the densities must agree
  // bit for bit.
  const std::vector<int> four = {0, 1, 1, 2};
  bool bitwise = true;
  double worst_shift = 0.0;
  for (int t = 0; t < 50; ++t) {
    Matrix x = rng.normal_matrix(4, 3), yp = x + 0.5 * rng.normal_matrix(4, 3);
    const Matrix yv4 = rng.normal_matrix(4, 3);
    x = (x * 1024.0).array().round() / 1024.0;
    yp = (yp * 1024.0).array().round() / 1024.0;
    Eigen::RowVectorXd a(3);
    a << static_cast<double>(t % 7) - 3.0, 5.0, -2.0;
    const double base = flow.log_density(FlowInput::repeat(x, four, 1), yp, yv4)[0];
    const double moved = flow.log_density(FlowInput::repeat(x.rowwise() + a, four, 1), yp.rowwise() + a, yv4)[0];
    bitwise = bitwise && moved == base;
    // Generic shifts on five atoms agree to rounding.
    const Matrix yv = rng.normal_matrix(5, 3);
    const Eigen::RowVectorXd b = 10.0 * rng.normal_matrix(1, 3).row(0);
    const Matrix xg = rng.normal_matrix(5, 3), ypg = xg + 0.5 * rng.normal_matrix(5, 3);
    const double g0 = flow.log_density(FlowInput::repeat(xg, types, 1), ypg, yv)[0];
    const double g1 = flow.log_density(FlowInput::repeat(xg.rowwise() + b, types, 1), ypg.rowwise() + b, yv)[0];
    worst_shift = std::max(worst_shift, std::abs(g1 - g0));
  }

  // Rotations: train on a planar chain with rotation augmentation, then
  // compare densities of rotated held-out pairs.
  auto data = planar_chain_data();
  FlowConfig fc = small_flow(2, 4, 16);
  fc.mlp_hidden = 32;
  ConditionalFlow trained(fc, 43);
  TrainConfig tc;
  tc.batch_size = 64;
  tc.lr = 1e-3;
  tc.steps = 3000;
  tc.eval_every = 500;
  tc.checkpoint_every = 100000;
  tc.rotation_augment = true;
  RngStream train_rng(44, 0);
  const auto result = train(trained, data.ds, data.pots, tc, train_rng);

  // Signed difference averaged over pairs and four rotations each; the
  // per-pair absolute gap is reported alongside.
  const auto val = data.ds.indices(Split::Val);
  const auto& sys = data.ds.systems[0];
  RngStream rot_rng(45, 0);
  double sum = 0.0, sum_sq = 0.0, abs_sum = 0.0;
  int count = 0;
  for (std::size_t k = 0; k < val.size() && k < 2000; ++k) {
    const auto& pair = data.ds.pairs[val[k]];
    auto [xc, yc] = canonicalize(pair.start, pair.end);
    const Matrix yv = rot_rng.normal_matrix(xc.rows(), 2);
    const Vector zero = Vector::Zero(2);
    const double base = trained.log_density(FlowInput::repeat(xc, sys->atom_types, 1), yc, yv)[0];
    for (int rep = 0; rep < 4; ++rep) {
      const Matrix r = random_rotation(2, rot_rng);
      const double rotated =
          trained.log_density(FlowInput::repeat(apply_rigid_motion(xc, r, zero), sys->atom_types, 1),
                              apply_rigid_motion(yc, r, zero), apply_rigid_motion(yv, r, zero))[0];
      sum += rotated - base;
      sum_sq += (rotated - base) * (rotated - base);
      abs_sum += std::abs(rotated - base);
      ++count;
    }
  }
  const double gap = sum / count;
  const double se = std::sqrt((sum_sq / count - gap * gap) / count);

  const bool pass = worst_perm < 1e-10 && bitwise && worst_shift < 1e-10 && std::abs(gap) < 0.1;
  return {pass, "permutation " + fmt_g(worst_perm) + ", translation " + (bitwise ? "bitwise equal" : "NOT equal") +
                    " (generic shifts " + fmt_g(worst_shift) + "), rotated pairs " + fmt_g(gap) + " +- " + fmt_g(se) +
                    " nats mean difference over " + std::to_string(count) + " rotations (mean |difference| " +
                    fmt_g(abs_sum / count) + ") after training (val loss " + fmt_g(result.initial_val) + " -> " +
                    fmt_g(result.best_val) + "), " + fmt_g(seconds_since(t0)) + " s"};
}

// ------------------------------------------------------------------ 5

double total_value(ConditionalFlow& flow, const TrainBatch& b, const LossWeights& w) {
  ad::Tape tape(false);
  return total_loss(tape, flow, b, w).total.scalar();
}

Outcome gradient_fidelity() {
  auto sys = testing::bead_chain(3, 3);
  std::vector<Potential> pots = {Potential::bead_chain(sys, 1.0)};
  RngStream rng(5, 0);
  PairDataset ds;
  ds.systems.push_back(sys);
  ds.system_split.push_back(Split::Train);
  for (int i = 0; i < 6; ++i) {
    TrajectoryPair p;
    p.frame = i;
    p.start = testing::chain_config(3, 3, rng, 0.1);
    p.end = p.start + 0.05 * rng.normal_matrix(3, 3);
    ds.pairs.push_back(p);
    ds.pair_split.push_back(Split::Train);
  }
  FlowConfig c;
  c.dimension = 3;
  c.n_coupling = 1;
  c.n_transformer = 1;
  c.feature_dim = 3;
  c.embedding_dim = 2;
  c.mlp_hidden = 3;
  c.lengthscales = {0.5};
  c.vocab_size = 4;
  ConditionalFlow flow(c, 51, FlowInit::Random);
  const auto n_params = flow.params().parameter_count();
  const auto idx = ds.indices(Split::Train);
  const TrainBatch batch = make_batch_ordered(ds, idx, pots, true, rng);

  std::string detail;
  bool pass = n_params <= 500;
  const std::pair<const char*, LossWeights> terms[] = {
      {"lik", {1, 0, 0}}, {"acc", {0, 1, 0}}, {"ent", {0, 0, 1}}};
  for (const auto& [name, w] : terms) {
    auto& params = flow.params();
    params.zero_grad();
    {
      ad::Tape tape;
      tape.backward(total_loss(tape, flow, batch, w).total);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
      const int id = static_cast<int>(i);
      const Matrix analytic = params.grad(id);
      const Matrix keep = params.value(id);
      const Matrix fd = testing::fd_gradient(
          [&](const Matrix& v) {
            params.value(id) = v;
            return total_value(flow, batch, w);
          },
          keep, 1e-6);
      params.value(id) = keep;
      worst = std::max(worst, testing::rel_error(analytic, fd, 1e-4));
    }
    pass = pass && worst < 1e-4;
    detail += std::string(name) + " " + fmt_g(worst) + ", ";
  }
  return {pass, "max relative error " + detail + std::to_string(n_params) + " parameters (limit 1e-4, <= 500)"};
}

// ------------------------------------------------------------------ 9

std::vector<double> ar1(double phi, std::size_t m, RngStream& rng) {
  std::vector<double> x(m);
  x[0] = rng.normal() / std::sqrt(1.0 - phi * phi);
  for (std::size_t t = 1; t < m; ++t) x[t] = phi * x[t - 1] + rng.normal();
  return x;
}

Outcome ess_validity() {
  const std::size_t m = 1000000;
  std::string detail;
  bool pass = true;
  for (double phi : {0.2, 0.5, 0.8, 0.95}) {
    RngStream rng(9, static_cast<std::uint64_t>(phi * 100));
    const auto x = ar1(phi, m, rng);
    const double expect = static_cast<double>(m) * (1.0 - phi) / (1.0 + phi);
    const double err = std::abs(ess(x, 1.0).m_eff / expect - 1.0);
    pass = pass && err < 0.05;
    detail += "phi " + fmt_g(phi) + ": " + fmt_g(100 * err) + "%, ";
  }
  RngStream rng(9, 1000);
  const auto white = ar1(0.0, m, rng);
  const double err = std::abs(ess(white, 1.0).m_eff / static_cast<double>(m) - 1.0);
  pass = pass && err < 0.05;
  return {pass, detail + "white noise: " + fmt_g(100 * err) + "% (limit 5%)"};
}

// ------------------------------------------------------------------ 10

Outcome exploration_validation() {
  auto sys = particle();
  const auto pot = Potential::double_well({6.0, 1.0}, 1.0);
  LangevinParams lp;
  lp.timestep = 0.01;
  RngStream rng(10, 0);
  // MD only ever saw the left well; exploration also found the right one.
  auto left = simulate(sys, pot, lp, 200000, 10, Matrix::Constant(1, 1, -1.0), rng);
  auto right = simulate(sys, pot, lp, 50000, 10, Matrix::Constant(1, 1, 1.0), rng);
  std::vector<Matrix> md;
  for (const auto& f : left.frames) {
    if (f(0, 0) < 0.0) md.push_back(f);
  }
  Chain explored;
  explored.system = sys;
  explored.n_atoms = 1;
  explored.dimension = 1;
  explored.initial = md.front();
  for (std::size_t k = 0; k < 2000; ++k) explored.push(md[k], true, 0, pot.energy(md[k]));
  for (const auto& f : right.frames) explored.push(f, true, 0, pot.energy(f));
  const std::vector<Chain> chains = {explored};

  ValidationConfig cfg;
  cfg.components = 1;
  auto run = [&] {
    auto rep = validate_new_states(md, chains, sys, pot, lp, cfg, RngStream(11, 0));
    std::vector<Candidate> decoys;
    if (!rep.candidates.empty()) {
      Candidate decoy;
      decoy.positions = Matrix::Zero(1, 1);
      decoy.center = rep.tica.project(trajectory_features({decoy.positions})).row(0).transpose();
      decoy.radius = rep.candidates[0].radius;
      decoys.push_back(decoy);
      validate_candidates(decoys, rep.tica, md, sys, pot, lp, cfg, RngStream(12, 0));
    }
    return std::pair{rep, decoys};
  };
  const auto [rep, decoys] = run();
  const auto [again, decoys_again] = run();

  const bool found = rep.candidates.size() == 1 && rep.candidates[0].positions(0, 0) > 0.5;
  const bool real_ok = found && rep.candidates[0].validated;
  const bool decoy_rejected = !decoys.empty() && !decoys[0].validated;
  const bool deterministic = found && again.candidates.size() == 1 &&
                             again.candidates[0].stay == rep.candidates[0].stay &&
                             decoys_again[0].stay == decoys[0].stay;
  std::string detail = std::to_string(rep.candidates.size()) + " candidate(s)";
  if (found) {
    detail += ", planted well stay " + fmt_g(rep.candidates[0].stay) + (real_ok ? " validated" : " NOT validated");
  }
  if (!decoys.empty()) {
    detail += ", barrier-top decoy stay " + fmt_g(decoys[0].stay) + (decoy_rejected ? " rejected" : " NOT rejected");
  }
  detail += deterministic ? ", identical on rerun" : ", differs on rerun";
  return {real_ok && decoy_rejected && deterministic, detail};
}

// ------------------------------------------------------------------ 6-8
//
// One bead-family run shared by the learning, fine-tuning and transfer
// checks. Type 3 carries a stiff torsion and only sits at chain ends in the
// training set, so the held-out 0-3-3-1 chain has a barrier none of the
// training systems has.

json bead_run_config() {
  return {{"format_version", 1},
          {"seed", 3},
          {"output_dir", (g_work / "beads").string()},
          {"threads", 1},
          {"system",
           {{"kind", "bead_family"},
            {"family",
             {{"n_beads", 4},
              {"dimension", 3},
              {"type_dihedral", {0.5, 1.0, 1.5, 7.0}},
              {"bond_k", 30.0},
              {"angle_k", 8.0},
              {"train_sequences",
               {{0, 0, 1, 3}, {3, 1, 0, 2}, {1, 2, 2, 0}, {2, 0, 2, 3}, {3, 2, 1, 1}, {0, 1, 1, 2}, {1, 0, 0, 3}, {2, 2, 0, 1}}},
              {"test_sequences", {{0, 3, 3, 1}, {3, 1, 2, 0}}}}}}},
          {"dynamics", {{"steps", 500000}, {"spacing", 100}, {"burn_in", 10}}},
          {"dataset", {{"max_pairs_per_system", 5000}}},
          {"flow",
           {{"architecture",
             {{"n_coupling", 4}, {"n_transformer", 1}, {"feature_dim", 16}, {"mlp_hidden", 32}, {"lengthscales", {0.5, 1.5}}}}}},
          {"training",
           {{"batch_size", 64},
            {"eval_every", 500},
            {"checkpoint_every", 1000},
            {"val_pairs", 256},
            {"probe_pairs", 256},
            {"likelihood", {{"steps", 8000}, {"lr", 1e-3}}},
            {"acceptance",
             {{"steps", 1000}, {"lr", 2e-4}, {"weights", {{"lik", 0.5}, {"acc", 1.0}, {"ent", 1.0}}}}}}},
          {"sampler", {{"steps", 2000}, {"batch", 10}}}};
}

struct BeadRun {
  std::unique_ptr<Run> run;
  io::LoadedDataset data;
  std::vector<std::size_t> test_systems;
  fs::path likelihood_ckpt;
  fs::path acceptance_ckpt;
  double likelihood_seconds = 0.0;  ///< gen-data plus stage (i)
  double acceptance_seconds = 0.0;
};

BeadRun& bead_run(bool fine_tuned) {
  static BeadRun b;
  if (!b.run) {
    const auto t0 = Clock::now();
    fs::remove_all(g_work / "beads");
    b.run = std::make_unique<Run>(RunConfig::from_json(bead_run_config()));
    b.run->gen_data();
    b.likelihood_ckpt = b.run->train({"likelihood"}).at("checkpoint").get<std::string>();
    b.likelihood_seconds = seconds_since(t0);
    b.data = io::load_dataset(b.run->dir() / "data" / "manifest.json");
    for (std::size_t s = 0; s < b.data.dataset.systems.size(); ++s) {
      if (b.data.dataset.system_split[s] == Split::Test) b.test_systems.push_back(s);
    }
  }
  if (fine_tuned && b.acceptance_ckpt.empty()) {
    const auto t0 = Clock::now();
    b.acceptance_ckpt = b.run->train({"acceptance"}).at("checkpoint").get<std::string>();
    b.acceptance_seconds = seconds_since(t0);
  }
  return b;
}

const std::string& system_name(const BeadRun& b, std::size_t s) { return b.data.dataset.systems[s]->name; }

Outcome learning_signal() {
  auto& b = bead_run(false);
  auto trained = io::load_checkpoint(b.likelihood_ckpt);
  ConditionalFlow identity(trained.flow->config(), 0, FlowInit::Identity);
  bool ok = !b.test_systems.empty();
  std::string detail;
  for (auto s : b.test_systems) {
    std::vector<std::size_t> idx;
    for (auto k : b.data.dataset.indices(Split::Test)) {
      if (static_cast<std::size_t>(b.data.dataset.pairs[k].system) == s && idx.size() < 1000) idx.push_back(k);
    }
    RngStream rng(61, s);
    const auto batch = make_batch_ordered(b.data.dataset, idx, b.data.potentials, false, rng);
    const LossWeights lik{1.0, 0.0, 0.0};
    const double base = evaluate_loss(identity, batch, lik);
    const double model = evaluate_loss(*trained.flow, batch, lik);
    ok = ok && base - model >= 2.0;
    detail += system_name(b, s) + " " + fmt_g(model) + " vs identity " + fmt_g(base) + " (" +
              std::to_string(idx.size()) + " pairs), ";
  }
  ok = ok && b.likelihood_seconds < 1800.0;
  return {ok, detail + "gen-data + stage (i) " + fmt_g(b.likelihood_seconds) + " s"};
}

// Start of an MCMC run: a frame from the held-out system's own MD.
Matrix md_frame(const BeadRun& b, std::size_t s, std::size_t frame) {
  for (const auto& t : b.data.trajectories) {
    if (t.system->name == system_name(b, s)) return t.frames.at(frame);
  }
  throw std::runtime_error("no trajectory for " + system_name(b, s));
}

Chain run_chain(ConditionalFlow& flow, const BeadRun& b, std::size_t s, const Matrix& x, long long m, int batch,
                std::uint64_t seed) {
  const auto& sys = b.data.dataset.systems[s];
  const AugmentedTarget target{b.data.potentials[s]};
  RngStream rng(seed, s);
  State x0(x, rng.normal_matrix(x.rows(), x.cols()), sys);
  return sample_mcmc(flow, target, x0, m, batch, rng);
}

Outcome finetuning_effect() {
  auto& b = bead_run(true);
  auto stage1 = io::load_checkpoint(b.likelihood_ckpt);
  auto stage2 = io::load_checkpoint(b.acceptance_ckpt);
  long long k1 = 0, n1 = 0, k2 = 0, n2 = 0;
  bool each_higher = true, enough = true;
  std::string detail;
  for (auto s : b.test_systems) {
    const Matrix x = md_frame(b, s, 5);
    const Chain c1 = run_chain(*stage1.flow, b, s, x, 100000, 10, 71);
    const Chain c2 = run_chain(*stage2.flow, b, s, x, 100000, 10, 71);
    const double a1 = double(c1.acceptance_count) / double(c1.proposals);
    const double a2 = double(c2.acceptance_count) / double(c2.proposals);
    each_higher = each_higher && a2 > a1;
    enough = enough && c1.proposals >= 10000 && c2.proposals >= 10000;
    k1 += c1.acceptance_count;
    n1 += c1.proposals;
    k2 += c2.acceptance_count;
    n2 += c2.proposals;
    detail += system_name(b, s) + " " + fmt_g(a1) + " -> " + fmt_g(a2) + " (" + std::to_string(c2.proposals) +
              " proposals, p=" + fmt_g(binomial_test_greater(c2.acceptance_count, c2.proposals, a1)) + "), ";
  }
  const double p = binomial_test_greater(k2, n2, double(k1) / double(n1));
  detail += "pooled p=" + fmt_g(p) + ", stage (ii) " + fmt_g(b.acceptance_seconds) + " s";
  return {!b.test_systems.empty() && each_higher && enough && p < 0.05, detail};
}

// Dihedral basins with a dead zone around the barrier: 0 cis, 1 trans,
// -1 in between.
int basin(const Matrix& x) {
  const double phi = std::abs(dihedral_angle(x, 0, 1, 2, 3));
  return phi < 1.2 ? 0 : phi > 1.94 ? 1 : -1;
}

// Planar 4-bead chain at the bond and angle minima, cis or trans.
Matrix planar_chain(const FamilyConfig& f, bool cis) {
  const double r = f.bond_r0, c = std::cos(f.angle_theta0), sn = std::sin(f.angle_theta0);
  Matrix x(4, 3);
  x << r * c, r * sn, 0.0,  //
      0.0, 0.0, 0.0,         //
      r, 0.0, 0.0,           //
      r - r * c, (cis ? 1.0 : -1.0) * r * sn, 0.0;
  return x;
}

Outcome transfer_speedup() {
  auto& b = bead_run(true);
  const auto t0 = Clock::now();
  std::size_t s = b.test_systems.at(0);
  for (auto t : b.test_systems) {
    if (b.data.dataset.systems[t]->dihedrals[0].k_d > b.data.dataset.systems[s]->dihedrals[0].k_d) s = t;
  }
  const auto& sys = b.data.dataset.systems[s];
  const Potential& pot = b.data.potentials[s];
  LangevinParams lp;
  for (const auto& t : b.data.trajectories) {
    if (t.system->name == sys->name) lp = t.params;
  }
  const auto family = b.run->config().system.family;
  auto flow = io::load_checkpoint(b.acceptance_ckpt).flow;

  // TICA on MD pooled from one run per basin.
  std::vector<Matrix> basin_runs;
  Moments reference;
  for (bool cis : {true, false}) {
    RngStream rng(81, cis ? 1 : 2);
    Matrix x = planar_chain(family, cis);
    Matrix v = maxwell_boltzmann(sys->masses, 3, pot.temperature(), rng);
    LangevinIntegrator integ(pot, lp, sys->masses);
    std::vector<Matrix> frames;
    for (int f = 0; f < 20000; ++f) {
      for (int k = 0; k < 100; ++k) integ.step(x, v, rng);
      frames.push_back(x);
    }
    basin_runs.push_back(trajectory_features(frames));
  }
  const TicaModel tica = tica_fit(basin_runs, 10);

  // Timewarp MCMC from an MD frame, then Langevin for the same wall time.
  const Matrix start = md_frame(b, s, 5);
  const Chain tw_chain = run_chain(*flow, b, s, start, 150000, 10, 83);
  RngStream rng(85, 0);
  Matrix x = start;
  Matrix v = maxwell_boltzmann(sys->masses, 3, pot.temperature(), rng);
  LangevinIntegrator integ(pot, lp, sys->masses);
  std::vector<Matrix> md;
  long long md_steps = 0;
  int crossings = 0, last = basin(x);
  const auto md0 = Clock::now();
  while (seconds_since(md0) < tw_chain.t_sampling) {
    for (int k = 0; k < 500; ++k) {
      integ.step(x, v, rng);
      if (k % 10 == 0) {
        const int now = basin(x);
        if (now >= 0 && now != last) {
          ++crossings;
          last = now;
        }
      }
    }
    md_steps += 500;
    md.push_back(x);
  }
  const double t_md = seconds_since(md0);
  const double per_million = 1e6 * crossings / double(md_steps);

  int tw_crossings = 0;
  last = basin(start);
  for (std::size_t m = 0; m < tw_chain.size(); ++m) {
    const int now = basin(tw_chain.frame(m));
    if (now >= 0 && now != last) {
      ++tw_crossings;
      last = now;
    }
  }
  const Matrix tw_features = chain_features(tw_chain);
  const Matrix md_features = trajectory_features(md);
  const double ratio = speedup_factor(tw_features, tw_chain.t_sampling, md_features, t_md, tica, 0, 0.01, reference);

  // Exploration against Langevin with the same number of chains and steps.
  ExploreConfig ec;
  ec.chains = 100;
  ec.steps = 10000;
  ec.threads = 1;
  RngStream erng(87, 0);
  State x0(start, erng.normal_matrix(start.rows(), start.cols()), sys);
  const auto chains = explore(*flow, pot, x0, ec, erng);
  auto both = [](const std::vector<int>& seen) { return seen[0] > 0 && seen[1] > 0; };
  int explore_both = 0;
  for (const auto& c : chains) {
    std::vector<int> seen(2, 0);
    for (std::size_t m = 0; m < c.size(); ++m) {
      const int k = basin(c.frame(m));
      if (k >= 0) ++seen[static_cast<std::size_t>(k)];
    }
    explore_both += both(seen);
  }
  int langevin_both = 0;
  for (int c = 0; c < 100; ++c) {
    RngStream lrng(89, static_cast<std::uint64_t>(c));
    Matrix y = start;
    Matrix w = maxwell_boltzmann(sys->masses, 3, pot.temperature(), lrng);
    std::vector<int> seen(2, 0);
    for (int m = 0; m < 10000; ++m) {
      integ.step(y, w, lrng);
      const int k = basin(y);
      if (k >= 0) ++seen[static_cast<std::size_t>(k)];
    }
    langevin_both += both(seen);
  }

  const double total = seconds_since(t0) + b.likelihood_seconds + b.acceptance_seconds;
  const bool ok = per_million < 0.1 && ratio > 1.0 && explore_both >= 1 && langevin_both == 0 && total < 3600.0;
  std::string detail = sys->name + " (k_d " + fmt_g(sys->dihedrals[0].k_d) + "): Langevin " +
                       std::to_string(crossings) + " crossings in " + fmt_g(double(md_steps)) + " steps (" +
                       fmt_g(per_million) + " per 1e6), Timewarp " + std::to_string(tw_crossings) +
                       " crossings, acceptance " + fmt_g(double(tw_chain.acceptance_count) / tw_chain.proposals) +
                       ", " + fmt_g(tw_chain.t_sampling) + " s each; ESS/s ratio " + fmt_g(ratio) +
                       "; explore visits both basins in " + std::to_string(explore_both) + "/100 chains, Langevin " +
                       std::to_string(langevin_both) + "/100; total " + fmt_g(total) + " s";
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--only" && i + 1 < argc) {
      std::stringstream s(argv[++i]);
      for (std::string item; std::getline(s, item, ',');) only.insert(std::stoi(item));
    } else {
      g_work = a;
    }
  }
  fs::create_directories(g_work);
  spdlog::set_level(spdlog::level::warn);

  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
      {"sampler exactness on the double well", sampler_exactness},
      {"MH kernel on a 3-state target", kernel_correctness},
      {"flow bijectivity and density exactness", flow_bijectivity},
      {"symmetry suite", symmetry_suite},
      {"loss gradient fidelity", gradient_fidelity},
      {"learning signal on the bead family", learning_signal},
      {"acceptance fine-tuning effect", finetuning_effect},
      {"transfer and speed-up on a held-out system", transfer_speedup},
      {"ESS estimator validity", ess_validity},
      {"exploration validation protocol", exploration_validation},
  };
  std::FILE* results = std::fopen((g_work / "results.txt").c_str(), "w");
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k + 1);
    if (!only.empty() && !only.count(id)) continue;
    Outcome o;
    const auto t0 = Clock::now();
    try {
      o = criteria[k].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    if (!o.pass) ++failures;
    const std::string line = fmt::format("{} criterion {} ({}): {} [{:.1f} s]", o.pass ? "PASS" : "FAIL", id,
                                         criteria[k].first, o.detail, seconds_since(t0));
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    if (results) {
      std::fprintf(results, "%s\n", line.c_str());
      std::fflush(results);
    }
  }
  if (results) std::fclose(results);
  return failures == 0 ? 0 : 1;
}
