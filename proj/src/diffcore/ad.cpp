#include "timewarp/ad.hpp"

#include <cmath>
#include <sstream>

namespace tw::ad {

namespace {

std::string shape(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void same_shape(const char* op, Var a, Var b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape(a.value()) + " vs " +
                                shape(b.value()));
  }
}

void same_tape(const char* op, Var a, Var b) {
  if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": operands live on different tapes");
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

}  // namespace

// ---------------------------------------------------------------- Segments

Segments Segments::uniform(int count, int size) {
  Segments s;
  for (int i = 0; i < count; ++i) s.push(size);
  return s;
}

Segments Segments::from_sizes(std::span<const int> sizes) {
  Segments s;
  for (int n : sizes) s.push(n);
  return s;
}

void Segments::push(int size) {
  if (size < 1) throw std::invalid_argument("Segments: segment size must be >= 1");
  offsets_.push_back(offsets_.back() + size);
  max_size_ = std::max(max_size_, size);
}

// -------------------------------------------------------------- ParamStore

int ParamStore::add(const std::string& name, Matrix value) {
  if (index_.contains(name)) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  const int id = static_cast<int>(entries_.size());
  Entry e{name, value, Matrix::Zero(value.rows(), value.cols()), Matrix::Zero(value.rows(), value.cols()),
          Matrix::Zero(value.rows(), value.cols())};
  entries_.push_back(std::move(e));
  index_.emplace(name, id);
  return id;
}

int ParamStore::find(std::string_view name) const {
  auto it = index_.find(name);
  return it == index_.end() ? -1 : it->second;
}

int ParamStore::at(std::string_view name) const {
  const int i = find(name);
  if (i < 0) throw std::out_of_range("ParamStore: no parameter '" + std::string(name) + "'");
  return i;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += static_cast<std::size_t>(e.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.setZero();
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> out;
  out.reserve(parameter_count());
  for (const auto& e : entries_) out.insert(out.end(), e.value.data(), e.value.data() + e.value.size());
  return out;
}

void ParamStore::unflatten(std::span<const double> flat) {
  if (flat.size() != parameter_count()) throw std::invalid_argument("ParamStore::unflatten: size mismatch");
  std::size_t k = 0;
  for (auto& e : entries_) {
    std::copy_n(flat.data() + k, e.value.size(), e.value.data());
    k += static_cast<std::size_t>(e.value.size());
  }
}

void adam_step(ParamStore& store, const AdamConfig& c) {
  for (std::size_t i = 0; i < store.size(); ++i) {
    if (!store.grad(static_cast<int>(i)).allFinite()) {
      throw std::runtime_error("adam_step: non-finite gradient for parameter '" +
                               store.name(static_cast<int>(i)) + "'");
    }
  }
  const long long t = store.adam_steps() + 1;
  store.set_adam_steps(t);
  const double bc1 = 1.0 - std::pow(c.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(t));
  for (std::size_t k = 0; k < store.size(); ++k) {
    const int i = static_cast<int>(k);
    const Matrix& g = store.grad(i);
    Matrix& m = store.adam_m(i);
    Matrix& v = store.adam_v(i);
    m = c.beta1 * m + (1.0 - c.beta1) * g;
    v = c.beta2 * v + (1.0 - c.beta2) * g.cwiseProduct(g);
    store.value(i).array() -= c.lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + c.eps);
  }
}

// --------------------------------------------------------------------- Var

const Matrix& Var::value() const {
  if (!tape_) throw std::logic_error("Var: uninitialized");
  return tape_->value(id_);
}

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw std::invalid_argument("Var::scalar: value is " + shape(v));
  return v(0, 0);
}

// -------------------------------------------------------------------- Tape

Var Tape::constant(Matrix value) {
  nodes_.push_back(Node{std::move(value), {}, {}, false, nullptr, -1});
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::param(ParamStore& store, int index) {
  auto key = std::make_pair(static_cast<const ParamStore*>(&store), index);
  if (auto it = param_ids_.find(key); it != param_ids_.end()) return Var(this, it->second);
  nodes_.push_back(Node{store.value(index), {}, {}, record_, &store, index});
  const int id = static_cast<int>(nodes_.size()) - 1;
  param_ids_.emplace(key, id);
  return Var(this, id);
}

Var Tape::push(Matrix value, std::span<const Var> parents, Backward backward) {
  bool needs = false;
  const int next_id = static_cast<int>(nodes_.size());
  for (const Var& p : parents) {
    if (p.tape_ != this) throw std::invalid_argument("Tape::push: parent from another tape");
    if (p.id_ >= next_id) throw std::logic_error("Tape::push: cycle detected");
    needs = needs || nodes_[p.id_].needs_grad;
  }
  needs = needs && record_;
  nodes_.push_back(Node{std::move(value), {}, needs ? std::move(backward) : Backward{}, needs, nullptr, -1});
  return Var(this, next_id);
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id_];
  if (!n.needs_grad) return;
  if (n.grad.size() == 0) {
    n.grad = g;
  } else {
    n.grad += g;
  }
}

Matrix& Tape::grad_slot(Var v) {
  Node& n = nodes_[v.id_];
  if (n.grad.size() == 0) n.grad = Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape_ != this) throw std::invalid_argument("Tape::backward: loss from another tape");
  if (loss.value().size() != 1) throw std::invalid_argument("Tape::backward: loss must be scalar");
  if (!record_) throw std::logic_error("Tape::backward: tape was not recording");
  for (auto& n : nodes_) n.grad.resize(0, 0);
  Node& root = nodes_[loss.id_];
  if (!root.needs_grad) return;  // constant loss: every gradient is zero
  root.grad = Matrix::Ones(1, 1);
  for (int id = loss.id_; id >= 0; --id) {
    Node& n = nodes_[id];
    if (n.grad.size() == 0) continue;
    if (n.backward) {
      n.backward(*this, n.grad);
    } else if (n.store) {
      n.store->grad(n.param_index) += n.grad;
    }
  }
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id_];
  if (n.grad.size() == 0) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// --------------------------------------------------------------------- ops

Var add(Var a, Var b) {
  same_tape("add", a, b);
  same_shape("add", a, b);
  return a.tape()->push(a.value() + b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  same_tape("sub", a, b);
  same_shape("sub", a, b);
  return a.tape()->push(a.value() - b.value(), {a, b}, [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  same_tape("mul", a, b);
  same_shape("mul", a, b);
  return a.tape()->push(a.value().cwiseProduct(b.value()), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g.cwiseProduct(b.value()));
    if (t.needs_grad(b)) t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale(Var a, double s) {
  return a.tape()->push(s * a.value(), {a}, [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

Var add_scalar(Var a, double s) {
  Matrix v = a.value().array() + s;
  return a.tape()->push(std::move(v), {a}, [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var matmul(Var a, Var b) {
  same_tape("matmul", a, b);
  if (a.cols() != b.rows()) {
    throw std::invalid_argument("matmul: shape mismatch " + shape(a.value()) + " x " + shape(b.value()));
  }
  Matrix v = a.value() * b.value();
  return a.tape()->push(std::move(v), {a, b}, [a, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(a)) t.accumulate(a, g * b.value().transpose());
    if (t.needs_grad(b)) t.accumulate(b, a.value().transpose() * g);
  });
}

Var affine(Var x, Var w, Var b) {
  same_tape("affine", x, w);
  same_tape("affine", x, b);
  if (x.cols() != w.rows() || b.rows() != 1 || b.cols() != w.cols()) {
    throw std::invalid_argument("affine: shape mismatch x " + shape(x.value()) + ", W " + shape(w.value()) +
                                ", b " + shape(b.value()));
  }
  Matrix v = x.value() * w.value();
  v.rowwise() += b.value().row(0);
  return x.tape()->push(std::move(v), {x, w, b}, [x, w, b](Tape& t, const Matrix& g) {
    if (t.needs_grad(x)) t.accumulate(x, g * w.value().transpose());
    if (t.needs_grad(w)) t.accumulate(w, x.value().transpose() * g);
    if (t.needs_grad(b)) t.accumulate(b, g.colwise().sum());
  });
}

Var broadcast_rows(Var row, Eigen::Index rows) {
  if (row.rows() != 1) throw std::invalid_argument("broadcast_rows: input is " + shape(row.value()));
  Matrix v = row.value().replicate(rows, 1);
  return row.tape()->push(std::move(v), {row},
                          [row](Tape& t, const Matrix& g) { t.accumulate(row, g.colwise().sum()); });
}

Var exp(Var a) {
  Matrix v = a.value().array().exp();
  const int self = static_cast<int>(a.tape()->size());
  return a.tape()->push(std::move(v), {a}, [a, self](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(t.value(self)));
  });
}

Var log(Var a) {
  Matrix v = a.value().array().log();
  return a.tape()->push(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseQuotient(a.value()));
  });
}

Var tanh(Var a) {
  Matrix v = a.value().array().tanh();
  const int self = static_cast<int>(a.tape()->size());
  return a.tape()->push(std::move(v), {a}, [a, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    t.accumulate(a, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var relu(Var a) {
  Matrix v = a.value().cwiseMax(0.0);
  return a.tape()->push(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, (a.value().array() > 0.0).select(g, 0.0));
  });
}

Var silu(Var a) {
  Matrix v = a.value().unaryExpr([](double x) { return x * sigmoid(x); });
  return a.tape()->push(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    Matrix d = a.value().unaryExpr([](double x) {
      const double s = sigmoid(x);
      return s * (1.0 + x * (1.0 - s));
    });
    t.accumulate(a, g.cwiseProduct(d));
  });
}

Var square(Var a) {
  Matrix v = a.value().array().square();
  return a.tape()->push(std::move(v), {a}, [a](Tape& t, const Matrix& g) {
    t.accumulate(a, 2.0 * g.cwiseProduct(a.value()));
  });
}

Var clamp(Var a, double lo, double hi, long long* clamped) {
  const Matrix& x = a.value();
  if (clamped) {
    *clamped += static_cast<long long>((x.array() < lo).count() + (x.array() > hi).count());
  }
  Matrix v = x.cwiseMax(lo).cwiseMin(hi);
  return a.tape()->push(std::move(v), {a}, [a, lo, hi](Tape& t, const Matrix& g) {
    const auto& xv = a.value().array();
    t.accumulate(a, ((xv >= lo) && (xv <= hi)).select(g, 0.0));
  });
}

Var softmax(Var a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
  Matrix x = axis == 1 ? a.value() : Matrix(a.value().transpose());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double m = x.row(r).maxCoeff();
    x.row(r) = (x.row(r).array() - m).exp();
    x.row(r) /= x.row(r).sum();
  }
  Matrix v = axis == 1 ? std::move(x) : Matrix(x.transpose());
  const int self = static_cast<int>(a.tape()->size());
  return a.tape()->push(std::move(v), {a}, [a, self, axis](Tape& t, const Matrix& g) {
    Matrix y = axis == 1 ? t.value(self) : Matrix(t.value(self).transpose());
    Matrix gy = axis == 1 ? g : Matrix(g.transpose());
    Eigen::VectorXd dots = (gy.cwiseProduct(y)).rowwise().sum();
    Matrix dx = y.cwiseProduct(gy - dots.replicate(1, gy.cols()));
    t.accumulate(a, axis == 1 ? dx : Matrix(dx.transpose()));
  });
}

Var sum(Var a) {
  Matrix v(1, 1);
  v(0, 0) = a.value().sum();
  const auto r = a.rows();
  const auto c = a.cols();
  return a.tape()->push(std::move(v), {a}, [a, r, c](Tape& t, const Matrix& g) {
    t.accumulate(a, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var a) {
  const double n = static_cast<double>(a.value().size());
  if (n == 0) throw std::invalid_argument("mean: empty input");
  return scale(sum(a), 1.0 / n);
}

Var sum_axis(Var a, int axis) {
  if (axis != 0 && axis != 1) throw std::invalid_argument("sum_axis: axis must be 0 or 1");
  Matrix v = axis == 1 ? Matrix(a.value().rowwise().sum()) : Matrix(a.value().colwise().sum());
  const auto r = a.rows();
  const auto c = a.cols();
  return a.tape()->push(std::move(v), {a}, [a, axis, r, c](Tape& t, const Matrix& g) {
    t.accumulate(a, axis == 1 ? Matrix(g.replicate(1, c)) : Matrix(g.replicate(r, 1)));
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat_cols: no inputs");
  Tape* tape = parts[0].tape();
  const auto rows = parts[0].rows();
  Eigen::Index cols = 0;
  for (const Var& p : parts) {
    if (p.tape() != tape) throw std::invalid_argument("concat_cols: operands live on different tapes");
    if (p.rows() != rows) throw std::invalid_argument("concat_cols: row count mismatch");
    cols += p.cols();
  }
  Matrix v(rows, cols);
  Eigen::Index c = 0;
  for (const Var& p : parts) {
    v.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  std::vector<Var> keep(parts.begin(), parts.end());
  return tape->push(std::move(v), parts, [keep](Tape& t, const Matrix& g) {
    Eigen::Index off = 0;
    for (const Var& p : keep) {
      if (t.needs_grad(p)) t.accumulate(p, g.middleCols(off, p.cols()));
      off += p.cols();
    }
  });
}

Var slice_cols(Var a, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > a.cols()) {
    throw std::invalid_argument("slice_cols: range out of bounds for " + shape(a.value()));
  }
  Matrix v = a.value().middleCols(begin, count);
  const auto r = a.rows();
  const auto c = a.cols();
  return a.tape()->push(std::move(v), {a}, [a, begin, count, r, c](Tape& t, const Matrix& g) {
    Matrix full = Matrix::Zero(r, c);
    full.middleCols(begin, count) = g;
    t.accumulate(a, full);
  });
}

Var layer_norm_rows(Var a, double eps) {
  const Matrix& x = a.value();
  const auto n = static_cast<double>(x.cols());
  Eigen::VectorXd mu = x.rowwise().mean();
  Matrix xc = x - mu.replicate(1, x.cols());
  Eigen::VectorXd inv_std = ((xc.array().square().rowwise().sum() / n) + eps).rsqrt();
  Matrix y = inv_std.asDiagonal() * xc;
  const int self = static_cast<int>(a.tape()->size());
  return a.tape()->push(std::move(y), {a}, [a, self, inv_std, n](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Eigen::VectorXd gm = g.rowwise().mean();
    Eigen::VectorXd gym = g.cwiseProduct(y).rowwise().sum() / n;
    Matrix dx = g - gm.replicate(1, g.cols()) - gym.asDiagonal() * y;
    t.accumulate(a, inv_std.asDiagonal() * dx);
  });
}

Var segment_sum(Var a, const Segments& segs) {
  if (a.rows() != segs.rows()) throw std::invalid_argument("segment_sum: rows != segment rows");
  Matrix v(segs.count(), 1);
  for (int s = 0; s < segs.count(); ++s) v(s, 0) = a.value().middleRows(segs.begin(s), segs.size(s)).sum();
  const auto c = a.cols();
  return a.tape()->push(std::move(v), {a}, [a, segs, c](Tape& t, const Matrix& g) {
    Matrix d(segs.rows(), c);
    for (int s = 0; s < segs.count(); ++s) d.middleRows(segs.begin(s), segs.size(s)).setConstant(g(s, 0));
    t.accumulate(a, d);
  });
}

Var segment_mean_rows(Var a, const Segments& segs) {
  if (a.rows() != segs.rows()) throw std::invalid_argument("segment_mean_rows: rows != segment rows");
  Matrix v(segs.count(), a.cols());
  for (int s = 0; s < segs.count(); ++s) {
    v.row(s) = a.value().middleRows(segs.begin(s), segs.size(s)).colwise().mean();
  }
  return a.tape()->push(std::move(v), {a}, [a, segs](Tape& t, const Matrix& g) {
    Matrix d(segs.rows(), g.cols());
    for (int s = 0; s < segs.count(); ++s) {
      const Eigen::RowVectorXd share = g.row(s) / static_cast<double>(segs.size(s));
      d.middleRows(segs.begin(s), segs.size(s)) = share.replicate(segs.size(s), 1);
    }
    t.accumulate(a, d);
  });
}

Var expand_segments(Var per_segment, const Segments& segs) {
  if (per_segment.rows() != segs.count()) throw std::invalid_argument("expand_segments: rows != segment count");
  Matrix v(segs.rows(), per_segment.cols());
  for (int s = 0; s < segs.count(); ++s) {
    v.middleRows(segs.begin(s), segs.size(s)) = per_segment.value().row(s).replicate(segs.size(s), 1);
  }
  return per_segment.tape()->push(std::move(v), {per_segment}, [per_segment, segs](Tape& t, const Matrix& g) {
    Matrix d(segs.count(), g.cols());
    for (int s = 0; s < segs.count(); ++s) d.row(s) = g.middleRows(segs.begin(s), segs.size(s)).colwise().sum();
    t.accumulate(per_segment, d);
  });
}

Var center_segments(Var a, const Segments& segs) {
  return sub(a, expand_segments(segment_mean_rows(a, segs), segs));
}

Var kernel_weights(Var x, const Segments& segs, double lengthscale) {
  if (!(lengthscale > 0.0)) throw std::invalid_argument("kernel_weights: lengthscale must be positive");
  if (x.rows() != segs.rows()) throw std::invalid_argument("kernel_weights: rows != segment rows");
  const Matrix& xv = x.value();
  const double inv_l2 = 1.0 / (lengthscale * lengthscale);
  Matrix w = Matrix::Zero(segs.rows(), segs.max_size());
  for (int s = 0; s < segs.count(); ++s) {
    const int b = segs.begin(s);
    const int n = segs.size(s);
    for (int i = 0; i < n; ++i) {
      double mx = -std::numeric_limits<double>::infinity();
      for (int j = 0; j < n; ++j) {
        w(b + i, j) = -(xv.row(b + i) - xv.row(b + j)).squaredNorm() * inv_l2;
        mx = std::max(mx, w(b + i, j));
      }
      double z = 0.0;
      for (int j = 0; j < n; ++j) {
        w(b + i, j) = std::exp(w(b + i, j) - mx);
        z += w(b + i, j);
      }
      for (int j = 0; j < n; ++j) w(b + i, j) /= z;
    }
  }
  const int self = static_cast<int>(x.tape()->size());
  return x.tape()->push(std::move(w), {x}, [x, segs, inv_l2, self](Tape& t, const Matrix& g) {
    const Matrix& w = t.value(self);
    const Matrix& xv = x.value();
    Matrix d = Matrix::Zero(xv.rows(), xv.cols());
    for (int s = 0; s < segs.count(); ++s) {
      const int b = segs.begin(s);
      const int n = segs.size(s);
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j < n; ++j) dot += g(b + i, j) * w(b + i, j);
        for (int j = 0; j < n; ++j) {
          const double da = w(b + i, j) * (g(b + i, j) - dot);
          if (da == 0.0) continue;
          const Eigen::RowVectorXd diff = xv.row(b + i) - xv.row(b + j);
          d.row(b + i) -= (2.0 * inv_l2 * da) * diff;
          d.row(b + j) += (2.0 * inv_l2 * da) * diff;
        }
      }
    }
    t.accumulate(x, d);
  });
}

Var block_mix(Var w, Var v, const Segments& segs) {
  same_tape("block_mix", w, v);
  if (w.rows() != segs.rows() || v.rows() != segs.rows() || w.cols() != segs.max_size()) {
    throw std::invalid_argument("block_mix: shapes " + shape(w.value()) + ", " + shape(v.value()) +
                                " do not match segments");
  }
  Matrix out(segs.rows(), v.cols());
  for (int s = 0; s < segs.count(); ++s) {
    const int b = segs.begin(s);
    const int n = segs.size(s);
    out.middleRows(b, n).noalias() = w.value().block(b, 0, n, n) * v.value().middleRows(b, n);
  }
  return w.tape()->push(std::move(out), {w, v}, [w, v, segs](Tape& t, const Matrix& g) {
    if (t.needs_grad(w)) {
      Matrix dw = Matrix::Zero(w.rows(), w.cols());
      for (int s = 0; s < segs.count(); ++s) {
        const int b = segs.begin(s);
        const int n = segs.size(s);
        dw.block(b, 0, n, n).noalias() = g.middleRows(b, n) * v.value().middleRows(b, n).transpose();
      }
      t.accumulate(w, dw);
    }
    if (t.needs_grad(v)) {
      Matrix dv(v.rows(), v.cols());
      for (int s = 0; s < segs.count(); ++s) {
        const int b = segs.begin(s);
        const int n = segs.size(s);
        dv.middleRows(b, n).noalias() = w.value().block(b, 0, n, n).transpose() * g.middleRows(b, n);
      }
      t.accumulate(v, dv);
    }
  });
}

Var gather_rows(Var table, std::vector<int> idx) {
  Matrix v(static_cast<Eigen::Index>(idx.size()), table.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] < 0 || idx[r] >= table.rows()) {
      throw std::out_of_range("gather_rows: index " + std::to_string(idx[r]) + " outside table of " +
                              std::to_string(table.rows()) + " rows");
    }
    v.row(static_cast<Eigen::Index>(r)) = table.value().row(idx[r]);
  }
  return table.tape()->push(std::move(v), {table}, [table, idx = std::move(idx)](Tape& t, const Matrix& g) {
    Matrix d = Matrix::Zero(table.rows(), table.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) d.row(idx[r]) += g.row(static_cast<Eigen::Index>(r));
    t.accumulate(table, d);
  });
}

Var potential_energy(Var x, const Segments& segs, std::vector<const Potential*> potentials) {
  if (static_cast<int>(potentials.size()) != segs.count() || x.rows() != segs.rows()) {
    throw std::invalid_argument("potential_energy: one potential per segment required");
  }
  Matrix u(segs.count(), 1);
  Matrix forces(x.rows(), x.cols());
  for (int s = 0; s < segs.count(); ++s) {
    Matrix f;
    Matrix xs = x.value().middleRows(segs.begin(s), segs.size(s));
    u(s, 0) = potentials[s]->energy_and_force(xs, f);
    forces.middleRows(segs.begin(s), segs.size(s)) = f;
  }
  return x.tape()->push(std::move(u), {x}, [x, segs, forces = std::move(forces)](Tape& t, const Matrix& g) {
    Matrix d(forces.rows(), forces.cols());
    for (int s = 0; s < segs.count(); ++s) {
      d.middleRows(segs.begin(s), segs.size(s)) = -g(s, 0) * forces.middleRows(segs.begin(s), segs.size(s));
    }
    t.accumulate(x, d);
  });
}

Var finite_mean(Var a, int* skipped) {
  const Matrix& x = a.value();
  const auto mask = x.array().isFinite();
  const auto n_ok = static_cast<double>(mask.count());
  if (skipped) *skipped = static_cast<int>(x.size() - mask.count());
  Matrix v(1, 1);
  v(0, 0) = n_ok > 0 ? mask.select(x, 0.0).sum() / n_ok : std::numeric_limits<double>::quiet_NaN();
  return a.tape()->push(std::move(v), {a}, [a, n_ok](Tape& t, const Matrix& g) {
    if (n_ok == 0) return;
    const auto ok = a.value().array().isFinite();
    t.accumulate(a, ok.select(Matrix::Constant(a.rows(), a.cols(), g(0, 0) / n_ok), 0.0));
  });
}

}  // namespace tw::ad
