#include "timewarp/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <atomic>
#include <numeric>
#include <set>

namespace tw {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    default: return "test";
  }
}

Split parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw std::invalid_argument("unknown split tag '" + std::string(s) + "'");
}

std::vector<std::size_t> PairDataset::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    if (pair_split[i] == s) out.push_back(i);
  }
  return out;
}

void PairDataset::check_split_hygiene() const {
  if (pair_split.size() != pairs.size() || system_split.size() != systems.size()) {
    throw std::logic_error("split labels do not cover every pair and system");
  }
  std::set<std::string> train, test;
  for (std::size_t s = 0; s < systems.size(); ++s) {
    (system_split[s] == Split::Test ? test : train).insert(systems[s]->name);
  }
  for (const auto& name : train) {
    if (test.contains(name)) throw std::logic_error("system '" + name + "' is in both train and test splits");
  }
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    const bool test_system = system_split[pairs[i].system] == Split::Test;
    if (test_system != (pair_split[i] == Split::Test)) {
      throw std::logic_error("pair split does not match its system split");
    }
  }
}

std::vector<TrajectoryPair> extract_pairs(const Trajectory& trajectory, int system_index, std::size_t max_pairs,
                                          RngStream& rng) {
  if (trajectory.frames.size() < 2) throw std::invalid_argument("extract_pairs: need at least 2 frames");
  const std::size_t available = trajectory.frames.size() - 1;
  if (max_pairs > available) {
    spdlog::warn("extract_pairs: requested {} pairs but only {} available; using all", max_pairs, available);
    max_pairs = available;
  }
  // Partial Fisher-Yates over frame indices.
  std::vector<std::size_t> idx(available);
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < max_pairs; ++i) {
    std::swap(idx[i], idx[i + rng.below(available - i)]);
  }
  idx.resize(max_pairs);
  std::vector<TrajectoryPair> out;
  out.reserve(max_pairs);
  for (std::size_t f : idx) {
    out.push_back({system_index, static_cast<int>(f), trajectory.spacing, trajectory.frames[f],
                   trajectory.frames[f + 1]});
  }
  return out;
}

std::pair<State, State> attach_auxiliaries(const TrajectoryPair& pair, const SystemPtr& system, RngStream& rng) {
  Matrix v0 = rng.normal_matrix(pair.start.rows(), pair.start.cols());
  Matrix v1 = rng.normal_matrix(pair.end.rows(), pair.end.cols());
  return {State(pair.start, std::move(v0), system), State(pair.end, std::move(v1), system)};
}

std::pair<Matrix, Matrix> canonicalize(const Matrix& conditioning, const Matrix& target) {
  if (conditioning.rows() != target.rows() || conditioning.cols() != target.cols()) {
    throw std::invalid_argument("canonicalize: shapes differ");
  }
  const Eigen::RowVectorXd mean = conditioning.colwise().mean();
  Matrix a = conditioning.rowwise() - mean;
  Matrix b = target.rowwise() - mean;
  return {std::move(a), std::move(b)};
}

std::pair<Matrix, Matrix> rotation_augment(const Matrix& conditioning, const Matrix& target, RngStream& rng,
                                           const Matrix* forced) {
  const auto d = static_cast<int>(conditioning.cols());
  if (d == 1) {
    static std::atomic<bool> warned{false};
    if (!warned.exchange(true)) spdlog::warn("rotation_augment: dimension 1 has no rotations; identity used");
    return {conditioning, target};
  }
  const Matrix r = forced ? *forced : random_rotation(d, rng);
  return {conditioning * r.transpose(), target * r.transpose()};
}

void assign_val_split(PairDataset& dataset, double val_fraction) {
  if (val_fraction < 0.0 || val_fraction >= 1.0) throw std::invalid_argument("val_fraction must be in [0, 1)");
  dataset.pair_split.assign(dataset.pairs.size(), Split::Train);
  for (std::size_t s = 0; s < dataset.systems.size(); ++s) {
    std::vector<std::size_t> mine;
    for (std::size_t i = 0; i < dataset.pairs.size(); ++i) {
      if (dataset.pairs[i].system == static_cast<int>(s)) mine.push_back(i);
    }
    if (dataset.system_split[s] == Split::Test) {
      for (auto i : mine) dataset.pair_split[i] = Split::Test;
      continue;
    }
    std::sort(mine.begin(), mine.end(),
              [&](auto a, auto b) { return dataset.pairs[a].frame < dataset.pairs[b].frame; });
    const auto n_val = static_cast<std::size_t>(val_fraction * static_cast<double>(mine.size()));
    for (std::size_t k = mine.size() - n_val; k < mine.size(); ++k) dataset.pair_split[mine[k]] = Split::Val;
  }
}

}  // namespace tw
