#include "timewarp/flow.hpp"

#include <cmath>
#include <numbers>

namespace tw {

using ad::Tape;
using ad::Var;

void FlowConfig::validate() const {
  if (dimension < 1 || dimension > 3) throw std::invalid_argument("flow.dimension must be 1, 2 or 3");
  if (n_coupling < 1) throw std::invalid_argument("flow.n_coupling must be >= 1");
  if (n_transformer < 0) throw std::invalid_argument("flow.n_transformer must be >= 0");
  if (feature_dim < 1 || embedding_dim < 1 || mlp_hidden < 1) {
    throw std::invalid_argument("flow.feature_dim, flow.embedding_dim and flow.mlp_hidden must be >= 1");
  }
  if (lengthscales.empty()) throw std::invalid_argument("flow.lengthscales must not be empty");
  for (double l : lengthscales) {
    if (!(l > 0.0)) throw std::invalid_argument("flow.lengthscales must be positive");
  }
  if (vocab_size < 1 || vocab_size > SystemSpec::kMaxAtomTypes) {
    throw std::invalid_argument("flow.vocab_size must be in [1, 64]");
  }
  if (!(scale_clamp > 0.0)) throw std::invalid_argument("flow.scale_clamp must be positive");
}

void FlowInput::append(const Matrix& positions, std::span<const int> atom_types) {
  if (static_cast<std::size_t>(positions.rows()) != atom_types.size()) {
    throw std::invalid_argument("FlowInput: atom type count does not match positions");
  }
  if (cond.size() > 0 && cond.cols() != positions.cols()) {
    throw std::invalid_argument("FlowInput: dimension mismatch between molecules");
  }
  const auto old_rows = cond.rows();
  Matrix grown(old_rows + positions.rows(), positions.cols());
  if (old_rows > 0) grown.topRows(old_rows) = cond;
  grown.bottomRows(positions.rows()) = positions;
  cond = std::move(grown);
  types.insert(types.end(), atom_types.begin(), atom_types.end());
  segs.push(static_cast<int>(positions.rows()));
}

FlowInput FlowInput::repeat(const Matrix& positions, std::span<const int> atom_types, int copies) {
  if (copies < 1) throw std::invalid_argument("FlowInput::repeat: copies must be >= 1");
  if (static_cast<std::size_t>(positions.rows()) != atom_types.size()) {
    throw std::invalid_argument("FlowInput: atom type count does not match positions");
  }
  FlowInput in;
  in.cond = positions.replicate(copies, 1);
  in.segs = ad::Segments::uniform(copies, static_cast<int>(positions.rows()));
  in.types.reserve(atom_types.size() * static_cast<std::size_t>(copies));
  for (int c = 0; c < copies; ++c) in.types.insert(in.types.end(), atom_types.begin(), atom_types.end());
  return in;
}

Matrix attention_weights(const Matrix& positions, double lengthscale) {
  if (!(lengthscale > 0.0)) throw std::invalid_argument("attention_weights: lengthscale must be positive");
  Tape tape(false);
  const auto n = static_cast<int>(positions.rows());
  return ad::kernel_weights(tape.constant(positions), ad::Segments::uniform(1, n), lengthscale).value();
}

double base_log_normalizer(int n_atoms, int dimension) {
  return -static_cast<double>(n_atoms) * dimension * std::log(2.0 * std::numbers::pi);
}

ConditionalFlow::ConditionalFlow(FlowConfig config, std::uint64_t seed, FlowInit init) : config_(std::move(config)) {
  config_.validate();
  RngStream rng(seed, 0x666c6f77);  // "flow"
  const int d = config_.dimension;
  const int D = config_.feature_dim;
  const int H = config_.embedding_dim;
  const int hid = config_.mlp_hidden;
  const int heads = static_cast<int>(config_.lengthscales.size());
  nets_.resize(static_cast<std::size_t>(config_.n_coupling));
  for (int l = 0; l < config_.n_coupling; ++l) {
    for (int k = 0; k < 4; ++k) {
      const std::string p = "c" + std::to_string(l) + "." + kNets[k] + ".";
      Net& net = nets_[l][k];
      net.embed = params_.add(p + "embed", rng.normal_matrix(config_.vocab_size, H));
      net.in1 = add_linear(p + "in1", 2 * d + H, hid, rng, 1.0);
      net.in2 = add_linear(p + "in2", hid, D, rng, 1.0);
      for (int b = 0; b < config_.n_transformer; ++b) {
        const std::string q = p + "blk" + std::to_string(b) + ".";
        Block blk;
        for (int h = 0; h < heads; ++h) {
          blk.values.push_back(
              params_.add(q + "v" + std::to_string(h), rng.normal_matrix(D, D) * std::sqrt(1.0 / D)));
        }
        blk.mix = params_.add(q + "mix", rng.normal_matrix(heads * D, D) * std::sqrt(0.5 / (heads * D)));
        blk.mlp1 = add_linear(q + "mlp1", D, hid, rng, 2.0);
        blk.mlp2 = add_linear(q + "mlp2", hid, D, rng, 0.5);
        net.blocks.push_back(std::move(blk));
      }
      net.out1 = add_linear(p + "out1", D, hid, rng, 1.0);
      net.out2 = add_linear(p + "out2", hid, d, rng, init == FlowInit::Identity ? 0.0 : 0.02);
    }
  }
}

ConditionalFlow::Linear ConditionalFlow::add_linear(const std::string& name, int in, int out, RngStream& rng,
                                                    double gain) {
  Linear l;
  l.w = params_.add(name + ".w", rng.normal_matrix(in, out) * std::sqrt(gain / in));
  l.b = params_.add(name + ".b", Matrix::Zero(1, out));
  return l;
}

Var ConditionalFlow::linear(Tape& tape, const Linear& l, Var x) {
  return ad::affine(x, tape.param(params_, l.w), tape.param(params_, l.b));
}

ConditionalFlow::Context ConditionalFlow::context(Tape& tape, const FlowInput& input, Var cond) {
  if (input.cond.cols() != config_.dimension) {
    throw std::invalid_argument("flow: conditioning dimension " + std::to_string(input.cond.cols()) +
                                " does not match flow dimension " + std::to_string(config_.dimension));
  }
  if (static_cast<int>(input.types.size()) != input.segs.rows()) {
    throw std::invalid_argument("flow: atom type count does not match segments");
  }
  for (int t : input.types) {
    if (t < 0 || t >= config_.vocab_size) {
      throw std::invalid_argument("flow: atom type " + std::to_string(t) + " outside vocabulary");
    }
  }
  Context ctx;
  ctx.input = &input;
  ctx.cond = ad::center_segments(cond, input.segs);
  for (double l : config_.lengthscales) ctx.weights.push_back(ad::kernel_weights(ctx.cond, input.segs, l));
  return ctx;
}

ConditionalFlow::Context ConditionalFlow::context(Tape& tape, const FlowInput& input) {
  return context(tape, input, tape.constant(input.cond));
}

Var ConditionalFlow::transformer(Tape& tape, const Context& ctx, const Net& net, Var z) {
  const auto& segs = ctx.input->segs;
  Var h = ad::gather_rows(tape.param(params_, net.embed), ctx.input->types);
  const Var parts[] = {ctx.cond, h, z};
  Var r = linear(tape, net.in2, ad::silu(linear(tape, net.in1, ad::concat_cols(parts))));
  for (const Block& blk : net.blocks) {
    Var u = config_.layer_norm ? ad::layer_norm_rows(r) : r;
    std::vector<Var> heads;
    for (std::size_t k = 0; k < blk.values.size(); ++k) {
      heads.push_back(ad::block_mix(ctx.weights[k], ad::matmul(u, tape.param(params_, blk.values[k])), segs));
    }
    r = ad::add(r, ad::matmul(ad::concat_cols(heads), tape.param(params_, blk.mix)));
    u = config_.layer_norm ? ad::layer_norm_rows(r) : r;
    r = ad::add(r, linear(tape, blk.mlp2, ad::relu(linear(tape, blk.mlp1, u))));
  }
  return linear(tape, net.out2, ad::silu(linear(tape, net.out1, r)));
}

ConditionalFlow::Pass ConditionalFlow::coupling_forward(Tape& tape, const Context& ctx, int layer, Var zp, Var zv) {
  const auto& nets = nets_.at(static_cast<std::size_t>(layer));
  const auto& segs = ctx.input->segs;
  long long clamped = 0;
  const double c = config_.scale_clamp;
  Var sp = ad::clamp(transformer(tape, ctx, nets[0], zv), -c, c, &clamped);
  Var p = ad::add(ad::mul(ad::exp(sp), zp), transformer(tape, ctx, nets[1], zv));
  Var sv = ad::clamp(transformer(tape, ctx, nets[2], p), -c, c, &clamped);
  Var v = ad::add(ad::mul(ad::exp(sv), zv), transformer(tape, ctx, nets[3], p));
  clamped_ += clamped;
  return {p, v, ad::add(ad::segment_sum(sp, segs), ad::segment_sum(sv, segs))};
}

ConditionalFlow::Pass ConditionalFlow::coupling_inverse(Tape& tape, const Context& ctx, int layer, Var yp, Var yv) {
  const auto& nets = nets_.at(static_cast<std::size_t>(layer));
  const auto& segs = ctx.input->segs;
  long long clamped = 0;
  const double c = config_.scale_clamp;
  Var sv = ad::clamp(transformer(tape, ctx, nets[2], yp), -c, c, &clamped);
  Var v = ad::mul(ad::sub(yv, transformer(tape, ctx, nets[3], yp)), ad::exp(ad::neg(sv)));
  Var sp = ad::clamp(transformer(tape, ctx, nets[0], v), -c, c, &clamped);
  Var p = ad::mul(ad::sub(yp, transformer(tape, ctx, nets[1], v)), ad::exp(ad::neg(sp)));
  clamped_ += clamped;
  return {p, v, ad::neg(ad::add(ad::segment_sum(sp, segs), ad::segment_sum(sv, segs)))};
}

void ConditionalFlow::check_finite(const Pass& pass, int layer) const {
  if (!pass.p.value().allFinite() || !pass.v.value().allFinite()) {
    throw FlowError("flow: non-finite output in coupling layer " + std::to_string(layer), layer);
  }
}

ConditionalFlow::Pass ConditionalFlow::forward(Tape& tape, const Context& ctx, Var zp, Var zv) {
  Pass acc{zp, zv, Var()};
  for (int l = 0; l < config_.n_coupling; ++l) {
    Pass step = coupling_forward(tape, ctx, l, acc.p, acc.v);
    check_finite(step, l);
    acc.p = step.p;
    acc.v = step.v;
    acc.log_det = acc.log_det.valid() ? ad::add(acc.log_det, step.log_det) : step.log_det;
  }
  return acc;
}

ConditionalFlow::Pass ConditionalFlow::inverse(Tape& tape, const Context& ctx, Var yp, Var yv) {
  Pass acc{yp, yv, Var()};
  for (int l = config_.n_coupling - 1; l >= 0; --l) {
    Pass step = coupling_inverse(tape, ctx, l, acc.p, acc.v);
    check_finite(step, l);
    acc.p = step.p;
    acc.v = step.v;
    acc.log_det = acc.log_det.valid() ? ad::add(acc.log_det, step.log_det) : step.log_det;
  }
  return acc;
}

namespace {

/// Per-segment log N(zp; 0, I) + log N(zv; 0, I).
Var base_log_prob(Tape& tape, const ad::Segments& segs, int d, Var zp, Var zv) {
  Matrix norm(segs.count(), 1);
  for (int s = 0; s < segs.count(); ++s) norm(s, 0) = base_log_normalizer(segs.size(s), d);
  Var quad = ad::add(ad::segment_sum(ad::square(zp), segs), ad::segment_sum(ad::square(zv), segs));
  return ad::add(ad::scale(quad, -0.5), tape.constant(std::move(norm)));
}

}  // namespace

ConditionalFlow::Sample ConditionalFlow::sample(Tape& tape, const Context& ctx, Var raw_cond, Var zp, Var zv) {
  Pass f = forward(tape, ctx, zp, zv);
  Var logp = ad::sub(base_log_prob(tape, ctx.input->segs, config_.dimension, zp, zv), f.log_det);
  return {ad::add(raw_cond, f.p), f.v, logp};
}

Var ConditionalFlow::log_density(Tape& tape, const Context& ctx, Var raw_cond, Var target_p, Var target_v) {
  Pass g = inverse(tape, ctx, ad::sub(target_p, raw_cond), target_v);
  return ad::add(base_log_prob(tape, ctx.input->segs, config_.dimension, g.p, g.v), g.log_det);
}

ConditionalFlow::Proposals ConditionalFlow::sample(const FlowInput& input, RngStream& rng) {
  Matrix zp = rng.normal_matrix(input.cond.rows(), input.cond.cols());
  Matrix zv = rng.normal_matrix(input.cond.rows(), input.cond.cols());
  return sample_from_latents(input, zp, zv);
}

ConditionalFlow::Proposals ConditionalFlow::sample_from_latents(const FlowInput& input, const Matrix& zp,
                                                                const Matrix& zv) {
  Tape tape(false);
  Var cond = tape.constant(input.cond);
  Context ctx = context(tape, input, cond);
  Sample s = sample(tape, ctx, cond, tape.constant(zp), tape.constant(zv));
  return {s.positions.value(), s.auxiliaries.value(), s.log_prob.value().col(0)};
}

Vector ConditionalFlow::log_density(const FlowInput& input, const Matrix& target_p, const Matrix& target_v) {
  if (target_p.rows() != input.cond.rows() || target_p.cols() != input.cond.cols() ||
      target_v.rows() != target_p.rows() || target_v.cols() != target_p.cols()) {
    throw std::invalid_argument("flow log_density: target shape does not match conditioning");
  }
  Tape tape(false);
  Var cond = tape.constant(input.cond);
  Context ctx = context(tape, input, cond);
  return log_density(tape, ctx, cond, tape.constant(target_p), tape.constant(target_v)).value().col(0);
}

void ConditionalFlow::zero_output_layers() {
  for (auto& layer : nets_) {
    for (auto& net : layer) {
      params_.value(net.out2.w).setZero();
      params_.value(net.out2.b).setZero();
    }
  }
}

void ConditionalFlow::set_position_scale_bias(int layer, double c) {
  params_.value(nets_.at(static_cast<std::size_t>(layer))[0].out2.b).setConstant(c);
}

}  // namespace tw
