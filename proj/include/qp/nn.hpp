#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qp/autodiff.hpp"

namespace qp {

// Runtime switches threaded through every forward pass. Default is eval
// mode: no dropout, fully deterministic given the inputs.
struct ForwardOpts {
  bool training = false;
  double dropout = 0.0;
  Rng* rng = nullptr;

  Var maybe_dropout(Tape& t, Var x) const {
    if (!training || dropout <= 0.0 || rng == nullptr) return x;
    return qp::dropout(t, x, dropout, *rng, true);
  }
};

// Affine map applied row-wise: x (T x in) -> x @ w + b (T x out).
struct Linear {
  Parameter w, b;

  void init(const std::string& name, int in, int out, Rng& rng);
  Var apply(Tape& t, Var x);
  void collect(std::vector<NamedParam>& out, const std::string& prefix);
};

struct LayerNorm {
  Parameter gain, bias;
  double eps = 1e-5;

  void init(const std::string& name, int dim);
  Var apply(Tape& t, Var x);
  void collect(std::vector<NamedParam>& out, const std::string& prefix);
};

// Multi-head attention with projections. For self-attention pass the same
// Var as queries and kv; for cross-attention kv may have a different width
// (projected internally to the model dim).
struct MultiHeadAttention {
  Linear q_proj, k_proj, v_proj, out_proj;
  int heads = 1;
  int model_dim = 0;

  void init(const std::string& name, int d, int d_kv, int n_heads, Rng& rng);

  // kv_valid: per-key validity (nullptr = all valid). causal applies only
  // when queries and keys have equal length.
  Var attend(Tape& t, Var queries, Var kv, const std::vector<uint8_t>* kv_valid, bool causal,
             const ForwardOpts& opts);
  // Fully explicit visibility mask (used by the query/text shared layers).
  Var attend_masked(Tape& t, Var queries, Var kv, const RowMask& mask, const ForwardOpts& opts);

  void collect(std::vector<NamedParam>& out, const std::string& prefix);
};

// Pre-norm transformer block: x += attn(LN(x)); optional cross sub-layer;
// x += FFN(LN(x)) with GELU.
struct TransformerBlock {
  MultiHeadAttention self_attn;
  LayerNorm ln_attn;
  bool has_cross = false;
  MultiHeadAttention cross_attn;
  LayerNorm ln_cross;
  Linear ff1, ff2;
  LayerNorm ln_ff;

  void init(const std::string& name, int d, int ffn_dim, int heads, bool with_cross, int d_kv, Rng& rng);
  Var apply(Tape& t, Var x, const std::vector<uint8_t>* self_valid, bool causal,
            std::optional<Var> kv, const std::vector<uint8_t>* kv_valid, const ForwardOpts& opts);
  void collect(std::vector<NamedParam>& out, const std::string& prefix);
};

// Deterministic sin/cos position table, rows = positions.
Tensor sinusoidal_positions(int length, int dim);

// Visibility helpers mirroring the mask contract of attention_core.
RowMask causal_mask(int n);

// Adam with bias correction. State is keyed by parameter identity; step
// order follows the caller's list so updates are deterministic.
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t t = 0;

  struct Slot {
    Tensor m, v;
  };
  std::unordered_map<Parameter*, Slot> state;

  void step(const std::vector<Parameter*>& params);
  void zero_grads(const std::vector<Parameter*>& params);

  // Checkpoint plumbing: expose m/v by the parameter paths used in the
  // model's named-parameter listing.
  void export_state(const std::vector<NamedParam>& params, std::vector<std::pair<std::string, Tensor>>& out) const;
  void import_state(const std::vector<NamedParam>& params,
                    const std::unordered_map<std::string, Tensor>& entries);
};

}  // namespace qp
