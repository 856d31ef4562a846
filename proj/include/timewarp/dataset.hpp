#pragma once

#include "timewarp/core.hpp"
#include "timewarp/dynamics.hpp"

#include <optional>
#include <string_view>

namespace tw {

enum class Split { Train, Val, Test };

const char* split_name(Split s);
Split parse_split(std::string_view s);

/// Two frames of one trajectory, one stored spacing (tau) apart.
struct TrajectoryPair {
  int system = 0;  ///< index into PairDataset::systems
  int frame = 0;   ///< index of the earlier frame
  int gap_steps = 0;
  Matrix start;
  Matrix end;
};

struct PairDataset {
  std::vector<SystemPtr> systems;
  std::vector<Split> system_split;  ///< Train systems contribute train and val pairs.
  std::vector<TrajectoryPair> pairs;
  std::vector<Split> pair_split;

  std::vector<std::size_t> indices(Split s) const;
  /// Throws if any system name appears in both train and test.
  void check_split_hygiene() const;
};

/// Samples up to max_pairs distinct consecutive-frame pairs uniformly
/// without replacement. Warns and returns all pairs if fewer exist.
std::vector<TrajectoryPair> extract_pairs(const Trajectory& trajectory, int system_index, std::size_t max_pairs,
                                          RngStream& rng);

/// Fresh N(0, I) auxiliaries for both endpoints; MD velocities are never used.
std::pair<State, State> attach_auxiliaries(const TrajectoryPair& pair, const SystemPtr& system, RngStream& rng);

/// Shifts both arrays by minus the centroid of `conditioning`.
std::pair<Matrix, Matrix> canonicalize(const Matrix& conditioning, const Matrix& target);

/// Applies one random rotation about the origin to both endpoints. With
/// d = 1 this is the identity (a warning is logged once). `forced` replaces
/// the random draw.
std::pair<Matrix, Matrix> rotation_augment(const Matrix& conditioning, const Matrix& target, RngStream& rng,
                                           const Matrix* forced = nullptr);

/// Splits pairs of train systems into train/val by frame order: the last
/// val_fraction of each system's pairs (by frame index) become val.
void assign_val_split(PairDataset& dataset, double val_fraction);

}  // namespace tw
