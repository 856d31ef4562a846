#pragma once

// Conditional normalizing flow over (positions, auxiliaries) given the
// conditioning positions. Batches stack molecules row-wise; every molecule
// is one segment.

#include "timewarp/ad.hpp"

#include <array>
#include <atomic>

namespace tw {

struct FlowConfig {
  int dimension = 3;
  int n_coupling = 4;
  int n_transformer = 2;
  int feature_dim = 32;    ///< D
  int embedding_dim = 8;   ///< H
  int mlp_hidden = 32;
  std::vector<double> lengthscales{0.1, 0.3, 0.7, 1.2};
  int vocab_size = SystemSpec::kMaxAtomTypes;
  double scale_clamp = 5.0;
  bool layer_norm = false;

  void validate() const;
};

enum class FlowInit {
  Identity,  ///< output layers zeroed: the flow starts as x + z
  Random,    ///< output layers drawn small but non-zero
};

/// Conditioning positions plus the atom types of each stacked molecule.
struct FlowInput {
  ad::Segments segs;
  std::vector<int> types;
  Matrix cond;

  void append(const Matrix& positions, std::span<const int> atom_types);
  /// `copies` stacked copies of one molecule.
  static FlowInput repeat(const Matrix& positions, std::span<const int> atom_types, int copies);
};

class FlowError : public std::runtime_error {
 public:
  FlowError(const std::string& what, int layer) : std::runtime_error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

/// Row-stochastic kernel attention matrix of one molecule.
Matrix attention_weights(const Matrix& positions, double lengthscale);

class ConditionalFlow {
 public:
  ConditionalFlow(FlowConfig config, std::uint64_t seed, FlowInit init = FlowInit::Identity);

  const FlowConfig& config() const { return config_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  /// Per-pass context: canonicalized conditioning and shared attention weights.
  struct Context {
    const FlowInput* input = nullptr;
    ad::Var cond;  ///< canonicalized conditioning, rows x d
    std::vector<ad::Var> weights;
  };
  /// `cond` is the raw (uncanonicalized) conditioning; gradients flow into it
  /// when it is a tape variable that needs them.
  Context context(ad::Tape& tape, const FlowInput& input, ad::Var cond);
  Context context(ad::Tape& tape, const FlowInput& input);

  struct Pass {
    ad::Var p;
    ad::Var v;
    ad::Var log_det;  ///< segments x 1
  };
  Pass coupling_forward(ad::Tape& tape, const Context& ctx, int layer, ad::Var zp, ad::Var zv);
  Pass coupling_inverse(ad::Tape& tape, const Context& ctx, int layer, ad::Var yp, ad::Var yv);

  /// Latents to displacement-space outputs through every layer (no skip).
  Pass forward(ad::Tape& tape, const Context& ctx, ad::Var zp, ad::Var zv);
  Pass inverse(ad::Tape& tape, const Context& ctx, ad::Var yp, ad::Var yv);

  /// Generative pass with skip connection: returns target positions
  /// (in the input frame), auxiliaries and log p per segment.
  struct Sample {
    ad::Var positions;
    ad::Var auxiliaries;
    ad::Var log_prob;
  };
  Sample sample(ad::Tape& tape, const Context& ctx, ad::Var raw_cond, ad::Var zp, ad::Var zv);
  /// log p(target | conditioning) per segment; target positions in the input frame.
  ad::Var log_density(ad::Tape& tape, const Context& ctx, ad::Var raw_cond, ad::Var target_p, ad::Var target_v);

  // Value-level entry points (no gradient recording).
  struct Proposals {
    Matrix positions;
    Matrix auxiliaries;
    Vector log_prob;
  };
  Proposals sample(const FlowInput& input, RngStream& rng);
  Proposals sample_from_latents(const FlowInput& input, const Matrix& zp, const Matrix& zv);
  Vector log_density(const FlowInput& input, const Matrix& target_p, const Matrix& target_v);

  /// Entries clamped by the scale bound since construction.
  long long clamp_count() const { return clamped_.load(); }

  // Test hooks.
  void zero_output_layers();
  /// Sets the position-scale output bias of coupling `layer` to c; with all
  /// other outputs zero this scales position latents by exp(c).
  void set_position_scale_bias(int layer, double c);

  static constexpr const char* kNets[4] = {"sp", "tp", "sv", "tv"};

 private:
  struct Linear {
    int w = -1;
    int b = -1;
  };
  struct Block {
    std::vector<int> values;  ///< one D x D value matrix per head
    int mix = -1;             ///< (heads D) x D output mixing
    Linear mlp1, mlp2;
  };
  struct Net {
    int embed = -1;
    Linear in1, in2;
    std::vector<Block> blocks;
    Linear out1, out2;
  };

  ad::Var transformer(ad::Tape& tape, const Context& ctx, const Net& net, ad::Var z);
  ad::Var linear(ad::Tape& tape, const Linear& l, ad::Var x);
  Linear add_linear(const std::string& name, int in, int out, RngStream& rng, double gain);
  void check_finite(const Pass& pass, int layer) const;

  FlowConfig config_;
  ad::ParamStore params_;
  std::vector<std::array<Net, 4>> nets_;
  std::atomic<long long> clamped_{0};
};

/// Base log-density of one molecule at z = 0: -n d log(2 pi) over both channels.
double base_log_normalizer(int n_atoms, int dimension);

}  // namespace tw
