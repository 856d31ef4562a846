#pragma once

#include "timewarp/dataset.hpp"
#include "timewarp/flow.hpp"

#include <filesystem>
#include <functional>

namespace tw {

struct LossWeights {
  double lik = 1.0;
  double acc = 0.0;
  double ent = 0.0;

  void validate() const;
};

/// One minibatch of (conditioning, target) pairs stacked as flow segments.
/// Positions stay in the frame chosen by the batch builder; the flow
/// canonicalizes internally, energies are evaluated on these coordinates.
struct TrainBatch {
  FlowInput input;
  Matrix target_p;
  Matrix target_v;
  Matrix cond_v;  ///< auxiliaries of the conditioning state
  std::vector<const Potential*> potentials;  ///< one per segment

  /// Standard-normal latents for the generative pass, drawn once per batch.
  Matrix zp;
  Matrix zv;
};

/// Draws `size` pairs uniformly (with replacement) from `indices`. Bead
/// chains are canonicalized and, with rotate = true, randomly rotated;
/// external-field potentials keep their absolute coordinates. Fresh
/// auxiliaries and latents come from `rng`.
TrainBatch make_batch(const PairDataset& dataset, std::span<const std::size_t> indices,
                      const std::vector<Potential>& potentials, std::size_t size, bool rotate, RngStream& rng);

/// Batch covering `indices` in order (used for validation and tests).
TrainBatch make_batch_ordered(const PairDataset& dataset, std::span<const std::size_t> indices,
                              const std::vector<Potential>& potentials, bool rotate, RngStream& rng);

struct LossTerms {
  ad::Var lik;
  ad::Var acc;
  ad::Var ent;
  ad::Var total;
  int skipped = 0;  ///< non-finite per-sample terms dropped
};

/// -mean log p(target | cond).
ad::Var loss_lik(ad::Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, int* skipped = nullptr);

/// Per-segment log r for the flow sample drawn from the batch latents.
struct AcceptanceTerms {
  ad::Var log_r;          ///< segments x 1
  ad::Var log_p_forward;  ///< log p(sample | cond), segments x 1
};
AcceptanceTerms acceptance_terms(ad::Tape& tape, ConditionalFlow& flow, const TrainBatch& batch);

/// -mean log r over flow samples (pathwise gradient through the sample).
ad::Var loss_acc(ad::Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, int* skipped = nullptr);
/// +mean log p(sample | cond): the negative entropy estimate.
ad::Var loss_ent(ad::Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, int* skipped = nullptr);

/// Weighted total; terms with zero weight are not built. Throws when more
/// than 1% of the per-sample terms are non-finite.
LossTerms total_loss(ad::Tape& tape, ConditionalFlow& flow, const TrainBatch& batch, const LossWeights& w);

/// log r(X, X~) = log mu(X~) + log p(X | X~^p) - log mu(X) - log p(X~ | X^p).
double r_theta(const AugmentedTarget& target, ConditionalFlow& flow, std::span<const int> atom_types,
               const Matrix& x_p, const Matrix& x_v, const Matrix& y_p, const Matrix& y_v);

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr = 5e-4;
  long long steps = 1000;
  LossWeights weights;
  int plateau_patience = 5;
  int eval_every = 100;
  int checkpoint_every = 500;
  std::size_t val_pairs = 256;
  bool rotation_augment = true;
  double grad_clip = 100.0;   ///< global gradient norm cap, 0 disables
  double min_lr = 1e-6;       ///< stop once plateau halving drops below this
  double divergence_factor = 10.0;

  void validate() const;
};

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainRecord {
  long long step = 0;
  double lr = 0.0;
  double train_lik = 0.0;
  double train_acc = 0.0;
  double train_ent = 0.0;
  double train_total = 0.0;
  double val_total = 0.0;
  double seconds = 0.0;
};

struct TrainResult {
  std::vector<TrainRecord> history;
  double initial_val = 0.0;
  double best_val = 0.0;
  double final_lr = 0.0;
  long long steps_done = 0;
  bool stopped_on_plateau = false;
};

struct TrainHooks {
  /// Called after every evaluation.
  std::function<void(const TrainRecord&)> on_eval;
  /// Called every checkpoint_every steps and once at the end.
  std::function<void(long long step, double val_loss)> on_checkpoint;
};

/// Adam on the weighted loss with plateau halving of the learning rate.
/// Validation uses a fixed set of val pairs with fixed auxiliaries.
TrainResult train(ConditionalFlow& flow, const PairDataset& dataset, const std::vector<Potential>& potentials,
                  const TrainConfig& config, RngStream& rng, const TrainHooks& hooks = {});

/// Weighted loss on one batch without recording gradients.
double evaluate_loss(ConditionalFlow& flow, const TrainBatch& batch, const LossWeights& weights);

}  // namespace tw
