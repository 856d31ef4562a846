#include "timewarp/training.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cmath>
#include <numbers>

namespace tw {

using ad::Tape;
using ad::Var;

void LossWeights::validate() const {
  if (lik < 0.0 || acc < 0.0 || ent < 0.0) throw std::invalid_argument("loss weights must be >= 0");
  if (lik == 0.0 && acc == 0.0 && ent == 0.0) throw std::invalid_argument("loss weights must not all be zero");
}

void TrainConfig::validate() const {
  weights.validate();
  if (batch_size < 1) throw std::invalid_argument("training.batch_size must be >= 1");
  if (!(lr >= 0.0)) throw std::invalid_argument("training.lr must be >= 0");
  if (steps < 0) throw std::invalid_argument("training steps must be >= 0");
  if (plateau_patience < 1) throw std::invalid_argument("training.plateau_patience must be >= 1");
  if (eval_every < 1) throw std::invalid_argument("training.eval_every must be >= 1");
  if (checkpoint_every < 1) throw std::invalid_argument("training.checkpoint_every must be >= 1");
  if (val_pairs < 1) throw std::invalid_argument("training.val_pairs must be >= 1");
  if (grad_clip < 0.0) throw std::invalid_argument("training.grad_clip must be >= 0");
}

namespace {

void add_pair(TrainBatch& b, const PairDataset& ds, const TrajectoryPair& pair, const std::vector<Potential>& pots,
              bool rotate, RngStream& rng) {
  const SystemSpec& sys = *ds.systems.at(static_cast<std::size_t>(pair.system));
  const Potential& pot = pots.at(static_cast<std::size_t>(pair.system));
  Matrix cond = pair.start;
  Matrix target = pair.end;
  if (pot.kind() == Potential::Kind::BeadChain) {
    std::tie(cond, target) = canonicalize(cond, target);
    if (rotate && sys.dimension > 1) std::tie(cond, target) = rotation_augment(cond, target, rng);
  }
  const auto n = cond.rows();
  const auto d = cond.cols();
  auto grow = [](Matrix& m, const Matrix& add) {
    Matrix g(m.rows() + add.rows(), add.cols());
    if (m.rows() > 0) g.topRows(m.rows()) = m;
    g.bottomRows(add.rows()) = add;
    m = std::move(g);
  };
  b.input.append(cond, sys.atom_types);
  grow(b.target_p, target);
  grow(b.cond_v, rng.normal_matrix(n, d));
  grow(b.target_v, rng.normal_matrix(n, d));
  grow(b.zp, rng.normal_matrix(n, d));
  grow(b.zv, rng.normal_matrix(n, d));
  b.potentials.push_back(&pot);
}

Matrix inverse_temperatures(const TrainBatch& b) {
  Matrix t(static_cast<Eigen::Index>(b.potentials.size()), 1);
  for (std::size_t s = 0; s < b.potentials.size(); ++s) t(static_cast<Eigen::Index>(s), 0) = 1.0 / b.potentials[s]->temperature();
  return t;
}

Var checked_mean(Var per_sample, int* skipped) {
  int n = 0;
  Var m = ad::finite_mean(per_sample, &n);
  if (skipped) *skipped += n;
  return m;
}

}  // namespace

TrainBatch make_batch(const PairDataset& dataset, std::span<const std::size_t> indices,
                      const std::vector<Potential>& potentials, std::size_t size, bool rotate, RngStream& rng) {
  if (indices.empty()) throw std::invalid_argument("make_batch: no pairs to draw from");
  TrainBatch b;
  for (std::size_t k = 0; k < size; ++k) {
    add_pair(b, dataset, dataset.pairs[indices[rng.below(indices.size())]], potentials, rotate, rng);
  }
  return b;
}

TrainBatch make_batch_ordered(const PairDataset& dataset, std::span<const std::size_t> indices,
                              const std::vector<Potential>& potentials, bool rotate, RngStream& rng) {
  if (indices.empty()) throw std::invalid_argument("make_batch_ordered: no pairs");
  TrainBatch b;
  for (std::size_t i : indices) add_pair(b, dataset, dataset.pairs[i], potentials, rotate, rng);
  return b;
}

Var loss_lik(Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, int* skipped) {
  Var cond = tape.constant(batch.input.cond);
  auto ctx = flow.context(tape, batch.input, cond);
  Var logp = flow.log_density(tape, ctx, cond, tape.constant(batch.target_p), tape.constant(batch.target_v));
  return ad::neg(checked_mean(logp, skipped));
}

AcceptanceTerms acceptance_terms(Tape& tape, ConditionalFlow& flow, const TrainBatch& batch) {
  const auto& segs = batch.input.segs;
  const int d = flow.config().dimension;
  Var cond = tape.constant(batch.input.cond);
  auto ctx = flow.context(tape, batch.input, cond);
  auto s = flow.sample(tape, ctx, cond, tape.constant(batch.zp), tape.constant(batch.zv));

  FlowInput reverse{segs, batch.input.types, s.positions.value()};
  auto rctx = flow.context(tape, reverse, s.positions);
  Var log_rev = flow.log_density(tape, rctx, s.positions, cond, tape.constant(batch.cond_v));

  const Matrix inv_t = inverse_temperatures(batch);
  Matrix norm(segs.count(), 1);
  Matrix log_mu_old(segs.count(), 1);
  for (int k = 0; k < segs.count(); ++k) {
    norm(k, 0) = -0.5 * segs.size(k) * d * std::log(2.0 * std::numbers::pi);
    const Matrix xp = batch.input.cond.middleRows(segs.begin(k), segs.size(k));
    const Matrix xv = batch.cond_v.middleRows(segs.begin(k), segs.size(k));
    log_mu_old(k, 0) = -batch.potentials[k]->energy(xp) * inv_t(k, 0) + standard_normal_logpdf(xv);
  }
  Var energy = ad::potential_energy(s.positions, segs, batch.potentials);
  Var log_mu_new = ad::add(ad::neg(ad::mul(energy, tape.constant(inv_t))),
                           ad::add(ad::scale(ad::segment_sum(ad::square(s.auxiliaries), segs), -0.5),
                                   tape.constant(std::move(norm))));
  Var log_r = ad::sub(ad::add(log_mu_new, log_rev), ad::add(tape.constant(std::move(log_mu_old)), s.log_prob));
  return {log_r, s.log_prob};
}

Var loss_acc(Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, int* skipped) {
  return ad::neg(checked_mean(acceptance_terms(tape, flow, batch).log_r, skipped));
}

Var loss_ent(Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, int* skipped) {
  return checked_mean(acceptance_terms(tape, flow, batch).log_p_forward, skipped);
}

LossTerms total_loss(Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, const LossWeights& w) {
  w.validate();
  LossTerms t;
  int samples = 0;
  Var total;
  auto accumulate = [&](Var term, double weight) {
    Var part = ad::scale(term, weight);
    total = total.valid() ? ad::add(total, part) : part;
  };
  if (w.lik > 0.0) {
    t.lik = loss_lik(tape, flow, batch, &t.skipped);
    samples += batch.input.segs.count();
    accumulate(t.lik, w.lik);
  }
  if (w.acc > 0.0 || w.ent > 0.0) {
    auto terms = acceptance_terms(tape, flow, batch);
    t.acc = ad::neg(checked_mean(terms.log_r, &t.skipped));
    t.ent = checked_mean(terms.log_p_forward, &t.skipped);
    samples += 2 * batch.input.segs.count();
    if (w.acc > 0.0) accumulate(t.acc, w.acc);
    if (w.ent > 0.0) accumulate(t.ent, w.ent);
  }
  if (t.skipped > 0.01 * samples) {
    throw TrainingError("non-finite loss terms in " + std::to_string(t.skipped) + " of " + std::to_string(samples) +
                        " samples (more than 1%)");
  }
  t.total = total;
  return t;
}

double r_theta(const AugmentedTarget& target, ConditionalFlow& flow, std::span<const int> atom_types,
               const Matrix& x_p, const Matrix& x_v, const Matrix& y_p, const Matrix& y_v) {
  const double fwd = flow.log_density(FlowInput::repeat(x_p, atom_types, 1), y_p, y_v)[0];
  const double rev = flow.log_density(FlowInput::repeat(y_p, atom_types, 1), x_p, x_v)[0];
  return log_mu_aug(target, y_p, y_v) + rev - log_mu_aug(target, x_p, x_v) - fwd;
}

double evaluate_loss(ConditionalFlow& flow, const TrainBatch& batch, const LossWeights& weights) {
  Tape tape(false);
  return total_loss(tape, flow, batch, weights).total.scalar();
}

TrainResult train(ConditionalFlow& flow, const PairDataset& dataset, const std::vector<Potential>& potentials,
                  const TrainConfig& config, RngStream& rng, const TrainHooks& hooks) {
  config.validate();
  dataset.check_split_hygiene();
  if (potentials.size() != dataset.systems.size()) {
    throw std::invalid_argument("train: need one potential per dataset system");
  }
  const auto train_idx = dataset.indices(Split::Train);
  if (train_idx.empty()) throw std::invalid_argument("train: dataset has no train pairs");
  auto val_idx = dataset.indices(Split::Val);
  if (val_idx.empty()) {
    spdlog::warn("train: no val pairs; validating on train pairs");
    val_idx = train_idx;
  }
  // Evenly spaced fixed validation subset.
  std::vector<std::size_t> val_pick;
  const std::size_t n_val = std::min(config.val_pairs, val_idx.size());
  for (std::size_t k = 0; k < n_val; ++k) val_pick.push_back(val_idx[k * val_idx.size() / n_val]);
  RngStream val_rng = rng.child(0x76616c);  // "val"
  const TrainBatch val_batch = make_batch_ordered(dataset, val_pick, potentials, config.rotation_augment, val_rng);

  TrainResult result;
  result.initial_val = evaluate_loss(flow, val_batch, config.weights);
  result.best_val = result.initial_val;
  spdlog::info("train: {} params, initial val loss {:.4f}", flow.params().parameter_count(), result.initial_val);

  ad::AdamConfig adam;
  adam.lr = config.lr;
  int bad_evals = 0;
  double sum_lik = 0, sum_acc = 0, sum_ent = 0, sum_total = 0;
  int n_acc = 0;
  const auto t0 = std::chrono::steady_clock::now();
  auto& params = flow.params();

  for (long long step = 1; step <= config.steps; ++step) {
    TrainBatch batch = make_batch(dataset, train_idx, potentials, config.batch_size, config.rotation_augment, rng);
    params.zero_grad();
    Tape tape;
    LossTerms terms = total_loss(tape, flow, batch, config.weights);
    tape.backward(terms.total);
    if (config.grad_clip > 0.0) {
      double sq = 0.0;
      for (std::size_t i = 0; i < params.size(); ++i) sq += params.grad(static_cast<int>(i)).squaredNorm();
      const double norm = std::sqrt(sq);
      if (norm > config.grad_clip) {
        for (std::size_t i = 0; i < params.size(); ++i) params.grad(static_cast<int>(i)) *= config.grad_clip / norm;
      }
    }
    ad::adam_step(params, adam);
    sum_total += terms.total.scalar();
    if (terms.lik.valid()) sum_lik += terms.lik.scalar();
    if (terms.acc.valid()) sum_acc += terms.acc.scalar();
    if (terms.ent.valid()) sum_ent += terms.ent.scalar();
    ++n_acc;
    result.steps_done = step;

    const bool last = step == config.steps;
    if (step % config.eval_every == 0 || last) {
      TrainRecord rec;
      rec.step = step;
      rec.lr = adam.lr;
      rec.train_lik = sum_lik / n_acc;
      rec.train_acc = sum_acc / n_acc;
      rec.train_ent = sum_ent / n_acc;
      rec.train_total = sum_total / n_acc;
      rec.val_total = evaluate_loss(flow, val_batch, config.weights);
      rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      sum_lik = sum_acc = sum_ent = sum_total = 0;
      n_acc = 0;
      result.history.push_back(rec);
      if (hooks.on_eval) hooks.on_eval(rec);
      spdlog::info("train: step {} lr {:.2e} train {:.4f} val {:.4f}", step, adam.lr, rec.train_total, rec.val_total);

      const double limit =
          result.initial_val + config.divergence_factor * std::max(1.0, std::abs(result.initial_val));
      if (!std::isfinite(rec.val_total) || rec.val_total > limit) {
        throw TrainingError("training diverged at step " + std::to_string(step) + ": val loss " +
                            std::to_string(rec.val_total) + " vs initial " + std::to_string(result.initial_val) +
                            " (lr " + std::to_string(adam.lr) + ")");
      }
      if (rec.val_total < result.best_val) {
        result.best_val = rec.val_total;
        bad_evals = 0;
      } else if (++bad_evals >= config.plateau_patience) {
        adam.lr *= 0.5;
        bad_evals = 0;
        spdlog::info("train: plateau, lr -> {:.2e}", adam.lr);
        if (adam.lr < config.min_lr) {
          result.stopped_on_plateau = true;
        }
      }
    }
    if (hooks.on_checkpoint && (step % config.checkpoint_every == 0 || last || result.stopped_on_plateau)) {
      hooks.on_checkpoint(step, result.history.empty() ? result.initial_val : result.history.back().val_total);
    }
    if (result.stopped_on_plateau) break;
  }
  if (config.steps == 0 && hooks.on_checkpoint) hooks.on_checkpoint(0, result.initial_val);
  result.final_lr = adam.lr;
  return result;
}

}  // namespace tw
