#pragma once

// Minimal tape-based reverse-mode differentiation over dense row-major
// matrices. Every node is a matrix; scalars are 1x1. Batches of molecules
// are stacked row-wise and described by Segments.

#include "timewarp/core.hpp"
#include "timewarp/energy.hpp"

#include <deque>
#include <functional>
#include <initializer_list>
#include <map>
#include <string_view>
#include <utility>

namespace tw::ad {

/// Row ranges of a stacked batch: segment s covers rows [begin(s), begin(s)+size(s)).
class Segments {
 public:
  Segments() = default;
  static Segments uniform(int count, int size);
  static Segments from_sizes(std::span<const int> sizes);

  void push(int size);
  int count() const { return static_cast<int>(offsets_.size()) - 1; }
  int begin(int s) const { return offsets_[s]; }
  int size(int s) const { return offsets_[s + 1] - offsets_[s]; }
  int rows() const { return offsets_.back(); }
  int max_size() const { return max_size_; }
  bool operator==(const Segments&) const = default;

 private:
  std::vector<int> offsets_{0};
  int max_size_ = 0;
};

/// Named trainable arrays with gradient accumulators and Adam moments.
class ParamStore {
 public:
  int add(const std::string& name, Matrix value);
  /// Index of `name`, or -1.
  int find(std::string_view name) const;
  int at(std::string_view name) const;

  std::size_t size() const { return entries_.size(); }
  const std::string& name(int i) const { return entries_[i].name; }
  Matrix& value(int i) { return entries_[i].value; }
  const Matrix& value(int i) const { return entries_[i].value; }
  Matrix& grad(int i) { return entries_[i].grad; }
  const Matrix& grad(int i) const { return entries_[i].grad; }
  Matrix& adam_m(int i) { return entries_[i].m; }
  Matrix& adam_v(int i) { return entries_[i].v; }
  const Matrix& adam_m(int i) const { return entries_[i].m; }
  const Matrix& adam_v(int i) const { return entries_[i].v; }
  long long adam_steps() const { return adam_steps_; }
  void set_adam_steps(long long n) { adam_steps_ = n; }

  std::size_t parameter_count() const;
  void zero_grad();
  std::vector<double> flatten() const;
  void unflatten(std::span<const double> flat);

 private:
  struct Entry {
    std::string name;
    Matrix value;
    Matrix grad;
    Matrix m;
    Matrix v;
  };
  std::vector<Entry> entries_;
  std::map<std::string, int, std::less<>> index_;
  long long adam_steps_ = 0;
};

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam update from the accumulated gradients. Throws if any
/// gradient is non-finite, naming the parameter; nothing is updated then.
void adam_step(ParamStore& store, const AdamConfig& config);

class Tape;

class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  /// With record = false only forward values are kept (inference mode).
  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }
  std::size_t size() const { return nodes_.size(); }

  Var constant(Matrix value);
  Var param(ParamStore& store, int index);
  Var param(ParamStore& store, std::string_view name) { return param(store, store.at(name)); }

  /// Reverse sweep from a 1x1 loss; parameter gradients are added to their stores.
  void backward(Var loss);
  /// Gradient of the last backward() with respect to `v` (zeros if unreached).
  Matrix grad(Var v) const;

  // Op construction interface.
  using Backward = std::function<void(Tape&, const Matrix& grad_out)>;
  Var push(Matrix value, std::initializer_list<Var> parents, Backward backward) {
    return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(backward));
  }
  Var push(Matrix value, std::span<const Var> parents, Backward backward);
  bool needs_grad(Var v) const { return nodes_[v.id_].needs_grad; }
  void accumulate(Var v, const Matrix& g);
  Matrix& grad_slot(Var v);
  const Matrix& value(int id) const { return nodes_[id].value; }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    Backward backward;
    bool needs_grad = false;
    ParamStore* store = nullptr;
    int param_index = -1;
  };
  std::deque<Node> nodes_;
  std::map<std::pair<const ParamStore*, int>, int> param_ids_;
  bool record_;
};

// Elementwise and linear algebra.
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
/// x W + b, with b a 1 x out row broadcast over rows.
Var affine(Var x, Var w, Var b);
Var broadcast_rows(Var row, Eigen::Index rows);
Var exp(Var a);
Var log(Var a);
Var tanh(Var a);
Var relu(Var a);
Var silu(Var a);
Var square(Var a);
/// Elementwise clamp to [lo, hi]; `clamped` (if given) counts clamped entries.
Var clamp(Var a, double lo, double hi, long long* clamped = nullptr);
/// Softmax along axis 1 (each row sums to 1) or axis 0 (each column).
Var softmax(Var a, int axis = 1);
Var sum(Var a);
Var mean(Var a);
/// Sum over `axis`: axis 1 gives rows x 1, axis 0 gives 1 x cols.
Var sum_axis(Var a, int axis);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count);
/// Per-row normalization to zero mean and unit variance (no affine).
Var layer_norm_rows(Var a, double eps = 1e-5);

// Segment (batched molecule) ops.
/// count x 1: sum of every entry in each segment.
Var segment_sum(Var a, const Segments& segs);
/// count x cols: per-segment mean of rows.
Var segment_mean_rows(Var a, const Segments& segs);
/// rows x cols: row s of `per_segment` repeated over segment s.
Var expand_segments(Var per_segment, const Segments& segs);
/// rows x cols: rows minus their segment centroid.
Var center_segments(Var a, const Segments& segs);
/// rows x max_size: w_ij = softmax_j(-|x_i - x_j|^2 / l^2) within each segment;
/// columns beyond the segment size are zero.
Var kernel_weights(Var x, const Segments& segs, double lengthscale);
/// rows x cols: out_i = sum_j w_ij v_j within each segment.
Var block_mix(Var w, Var v, const Segments& segs);
/// Row r of the result is row idx[r] of `table`.
Var gather_rows(Var table, std::vector<int> idx);
/// count x 1 potential energies of each segment, gradient -force.
Var potential_energy(Var x, const Segments& segs, std::vector<const Potential*> potentials);
/// 1x1 mean over the finite entries of `a`; `skipped` receives the number dropped.
Var finite_mean(Var a, int* skipped = nullptr);

}  // namespace tw::ad
