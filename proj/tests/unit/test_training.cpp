#include "timewarp/training.hpp"

#include "helpers.hpp"

#include <doctest.h>

using namespace tw;

namespace {

FlowConfig tiny(int d) {
  FlowConfig c;
  c.dimension = d;
  c.n_coupling = 1;
  c.n_transformer = 1;
  c.feature_dim = 3;
  c.embedding_dim = 2;
  c.mlp_hidden = 3;
  c.lengthscales = {0.5};
  c.vocab_size = 4;
  return c;
}

SystemPtr particle(int d, const std::string& name = "particle") {
  auto s = std::make_shared<SystemSpec>();
  s->name = name;
  s->n_atoms = 1;
  s->dimension = d;
  s->atom_types = {0};
  s->masses = {1.0};
  s->validate();
  return s;
}

struct Fixture {
  PairDataset ds;
  std::vector<Potential> pots;
};

/// Double-well pairs from a short Langevin run, last 20% as val.
Fixture double_well_fixture(std::size_t n_pairs = 200) {
  Fixture f;
  auto sys = particle(1);
  f.pots.push_back(Potential::double_well({1.0, 1.0}, 1.0));
  RngStream rng(11, 0);
  LangevinParams lp;
  lp.timestep = 0.01;
  auto traj = simulate(sys, f.pots[0], lp, 20000, 20, Matrix::Constant(1, 1, -1.0), rng);
  f.ds.systems.push_back(sys);
  f.ds.system_split.push_back(Split::Train);
  f.ds.pairs = extract_pairs(traj, 0, n_pairs, rng);
  f.ds.pair_split.assign(f.ds.pairs.size(), Split::Train);
  assign_val_split(f.ds, 0.2);
  return f;
}

/// Chain pairs built from random configurations; gives a d = 3 batch with
/// several segments.
Fixture chain_fixture() {
  Fixture f;
  auto sys = testing::bead_chain(3, 3);
  f.pots.push_back(Potential::bead_chain(sys, 1.0));
  RngStream rng(12, 0);
  f.ds.systems.push_back(sys);
  f.ds.system_split.push_back(Split::Train);
  for (int i = 0; i < 6; ++i) {
    TrajectoryPair p;
    p.frame = i;
    p.start = testing::chain_config(3, 3, rng, 0.1);
    p.end = p.start + 0.05 * rng.normal_matrix(3, 3);
    f.ds.pairs.push_back(p);
    f.ds.pair_split.push_back(Split::Train);
  }
  return f;
}

double total_value(ConditionalFlow& flow, const TrainBatch& b, const LossWeights& w) {
  ad::Tape tape(false);
  return total_loss(tape, flow, b, w).total.scalar();
}

}  // namespace

TEST_CASE("loss gradients match finite differences") {
  auto f = chain_fixture();
  ConditionalFlow flow(tiny(3), 3, FlowInit::Random);
  CHECK(flow.params().parameter_count() < 500);
  RngStream rng(4, 0);
  const auto idx = f.ds.indices(Split::Train);
  TrainBatch batch = make_batch_ordered(f.ds, idx, f.pots, true, rng);
  for (LossWeights w : {LossWeights{1, 0, 0}, LossWeights{0, 1, 0}, LossWeights{0, 0, 1}, LossWeights{0.99, 0.01, 0.1}}) {
    auto& params = flow.params();
    params.zero_grad();
    ad::Tape tape;
    tape.backward(total_loss(tape, flow, batch, w).total);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const Matrix analytic = params.grad(static_cast<int>(i));
      const Matrix keep = params.value(static_cast<int>(i));
      Matrix fd = testing::fd_gradient(
          [&](const Matrix& v) {
            params.value(static_cast<int>(i)) = v;
            return total_value(flow, batch, w);
          },
          keep, 1e-6);
      params.value(static_cast<int>(i)) = keep;
      INFO("weights " << w.lik << "/" << w.acc << "/" << w.ent << " param " << params.name(static_cast<int>(i)));
      CHECK(testing::rel_error(analytic, fd, 1e-4) < 1e-4);
    }
  }
}

TEST_CASE("identity flow losses have closed forms") {
  auto f = chain_fixture();
  ConditionalFlow flow(tiny(3), 5, FlowInit::Identity);
  RngStream rng(6, 0);
  const auto idx = f.ds.indices(Split::Train);
  TrainBatch b = make_batch_ordered(f.ds, idx, f.pots, false, rng);
  const auto& segs = b.input.segs;

  double lik = 0.0, acc = 0.0, ent = 0.0;
  for (int k = 0; k < segs.count(); ++k) {
    auto rows = [&](const Matrix& m) { return Matrix(m.middleRows(segs.begin(k), segs.size(k))); };
    const Matrix x = rows(b.input.cond);
    lik -= standard_normal_logpdf(rows(b.target_p) - x) + standard_normal_logpdf(rows(b.target_v));
    const Matrix y = x + rows(b.zp);
    // Identity transport: forward and reverse Gaussian terms cancel.
    acc += (f.pots[0].energy(y) - f.pots[0].energy(x)) / f.pots[0].temperature();
    ent += standard_normal_logpdf(rows(b.zp)) + standard_normal_logpdf(rows(b.zv));
  }
  const double n = segs.count();
  ad::Tape tape(false);
  CHECK(loss_lik(tape, flow, b).scalar() == doctest::Approx(lik / n).epsilon(1e-10));
  CHECK(loss_acc(tape, flow, b).scalar() == doctest::Approx(acc / n).epsilon(1e-10));
  CHECK(loss_ent(tape, flow, b).scalar() == doctest::Approx(ent / n).epsilon(1e-10));

  // A constant log-scale c on the position channel lowers log p by n_atoms * d * c.
  const double base = loss_ent(tape, flow, b).scalar();
  flow.set_position_scale_bias(0, 0.3);
  ad::Tape fresh(false);
  CHECK(loss_ent(fresh, flow, b).scalar() == doctest::Approx(base - 3 * 3 * 0.3).epsilon(1e-10));
}

TEST_CASE("loss_acc agrees with r_theta per pair") {
  auto f = double_well_fixture(20);
  ConditionalFlow flow(tiny(1), 7, FlowInit::Random);
  RngStream rng(8, 0);
  const auto idx = f.ds.indices(Split::Train);
  TrainBatch b = make_batch_ordered(f.ds, idx, f.pots, false, rng);
  ad::Tape tape(false);
  auto terms = acceptance_terms(tape, flow, b);
  auto props = flow.sample_from_latents(b.input, b.zp, b.zv);
  AugmentedTarget target{f.pots[0]};
  const int types[] = {0};
  for (int k = 0; k < b.input.segs.count(); ++k) {
    const double r = r_theta(target, flow, types, b.input.cond.row(k), b.cond_v.row(k), props.positions.row(k),
                             props.auxiliaries.row(k));
    CHECK(terms.log_r.value()(k, 0) == doctest::Approx(r).epsilon(1e-8));
  }
}

TEST_CASE("zero learning rate leaves parameters unchanged") {
  auto f = double_well_fixture();
  ConditionalFlow flow(tiny(1), 9, FlowInit::Random);
  const auto before = flow.params().flatten();
  TrainConfig cfg;
  cfg.lr = 0.0;
  cfg.steps = 5;
  cfg.batch_size = 8;
  cfg.eval_every = 5;
  cfg.rotation_augment = false;
  RngStream rng(1, 0);
  train(flow, f.ds, f.pots, cfg, rng);
  CHECK(flow.params().flatten() == before);
}

TEST_CASE("training reduces the likelihood loss and is deterministic") {
  auto f = double_well_fixture();
  TrainConfig cfg;
  cfg.lr = 5e-3;
  cfg.steps = 300;
  cfg.batch_size = 32;
  cfg.eval_every = 50;
  cfg.rotation_augment = false;
  auto run = [&](std::vector<TrainRecord>* hist) {
    ConditionalFlow flow(tiny(1), 21, FlowInit::Identity);
    RngStream rng(2, 0);
    int evals = 0;
    long long last_ckpt = -1;
    TrainHooks hooks{[&](const TrainRecord&) { ++evals; }, [&](long long s, double) { last_ckpt = s; }};
    auto res = train(flow, f.ds, f.pots, cfg, rng, hooks);
    CHECK(evals == static_cast<int>(res.history.size()));
    CHECK(last_ckpt == res.steps_done);
    *hist = res.history;
    CHECK(res.history.back().val_total < res.initial_val - 0.1);
    return flow.params().flatten();
  };
  std::vector<TrainRecord> h1, h2;
  auto p1 = run(&h1);
  auto p2 = run(&h2);
  CHECK(p1 == p2);
  CHECK(h1.back().val_total == h2.back().val_total);
}

TEST_CASE("config validation and divergence") {
  TrainConfig cfg;
  cfg.weights = {0, 0, 0};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg.weights = {1, -1, 0};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);

  auto f = double_well_fixture();
  ConditionalFlow flow(tiny(1), 9, FlowInit::Random);
  TrainConfig bad;
  bad.lr = 50.0;
  bad.grad_clip = 0.0;
  bad.steps = 200;
  bad.batch_size = 16;
  bad.eval_every = 5;
  bad.divergence_factor = 0.5;
  bad.rotation_augment = false;
  RngStream rng(3, 0);
  CHECK_THROWS_AS(train(flow, f.ds, f.pots, bad, rng), std::exception);
}
