#include "qp/nn.hpp"

#include <array>
#include <cmath>

#include "qp/error.hpp"

namespace qp {

void Linear::init(const std::string& name, int in, int out, Rng& rng) {
  w = Parameter(name + ".w", Tensor::xavier_uniform(in, out, rng));
  b = Parameter(name + ".b", Tensor({1, out}));
}

Var Linear::apply(Tape& t, Var x) {
  return add_rowvec(t, matmul(t, x, t.param(w)), t.param(b));
}

void Linear::collect(std::vector<NamedParam>& out, const std::string& prefix) {
  out.push_back({prefix + "/w", &w});
  out.push_back({prefix + "/b", &b});
}

void LayerNorm::init(const std::string& name, int dim) {
  gain = Parameter(name + ".gain", Tensor::full({1, dim}, 1.0));
  bias = Parameter(name + ".bias", Tensor({1, dim}));
}

Var LayerNorm::apply(Tape& t, Var x) {
  return layer_norm(t, x, t.param(gain), t.param(bias), eps);
}

void LayerNorm::collect(std::vector<NamedParam>& out, const std::string& prefix) {
  out.push_back({prefix + "/gain", &gain});
  out.push_back({prefix + "/bias", &bias});
}

void MultiHeadAttention::init(const std::string& name, int d, int d_kv, int n_heads, Rng& rng) {
  if (n_heads <= 0 || d % n_heads != 0)
    throw ConfigError("attention '" + name + "': model dim " + std::to_string(d) +
                      " not divisible by heads " + std::to_string(n_heads));
  heads = n_heads;
  model_dim = d;
  q_proj.init(name + ".q", d, d, rng);
  k_proj.init(name + ".k", d_kv, d, rng);
  v_proj.init(name + ".v", d_kv, d, rng);
  out_proj.init(name + ".o", d, d, rng);
}

Var MultiHeadAttention::attend(Tape& t, Var queries, Var kv, const std::vector<uint8_t>* kv_valid,
                               bool causal, const ForwardOpts& opts) {
  int tq = t.value(queries).rows();
  int tk = t.value(kv).rows();
  if (tk == 0) throw ContractError("attention: empty key/value sequence");
  if (kv_valid && static_cast<int>(kv_valid->size()) != tk)
    throw ShapeError("attention: key mask length " + std::to_string(kv_valid->size()) +
                     " vs keys " + std::to_string(tk));
  RowMask mask = kv_valid ? RowMask::keys(tq, *kv_valid) : RowMask::full(tq, tk);
  if (causal) {
    if (tq != tk) throw ContractError("attention: causal mask needs equal query/key length");
    mask = mask.combined(RowMask::causal(tq));
  }
  return attend_masked(t, queries, kv, mask, opts);
}

Var MultiHeadAttention::attend_masked(Tape& t, Var queries, Var kv, const RowMask& mask,
                                      const ForwardOpts& opts) {
  Var q = q_proj.apply(t, queries);
  Var k = k_proj.apply(t, kv);
  Var v = v_proj.apply(t, kv);
  Var mixed = attention_core(t, q, k, v, heads, &mask);
  Var out = out_proj.apply(t, mixed);
  return opts.maybe_dropout(t, out);
}

void MultiHeadAttention::collect(std::vector<NamedParam>& out, const std::string& prefix) {
  q_proj.collect(out, prefix + "/q");
  k_proj.collect(out, prefix + "/k");
  v_proj.collect(out, prefix + "/v");
  out_proj.collect(out, prefix + "/o");
}

void TransformerBlock::init(const std::string& name, int d, int ffn_dim, int heads, bool with_cross,
                            int d_kv, Rng& rng) {
  self_attn.init(name + ".self", d, d, heads, rng);
  ln_attn.init(name + ".ln_attn", d);
  has_cross = with_cross;
  if (with_cross) {
    cross_attn.init(name + ".cross", d, d_kv, heads, rng);
    ln_cross.init(name + ".ln_cross", d);
  }
  ff1.init(name + ".ff1", d, ffn_dim, rng);
  ff2.init(name + ".ff2", ffn_dim, d, rng);
  ln_ff.init(name + ".ln_ff", d);
}

Var TransformerBlock::apply(Tape& t, Var x, const std::vector<uint8_t>* self_valid, bool causal,
                            std::optional<Var> kv, const std::vector<uint8_t>* kv_valid,
                            const ForwardOpts& opts) {
  Var h = ln_attn.apply(t, x);
  x = add(t, x, self_attn.attend(t, h, h, self_valid, causal, opts));
  if (kv.has_value()) {
    if (!has_cross) throw ContractError("transformer block has no cross-attention sub-layer");
    Var c = ln_cross.apply(t, x);
    x = add(t, x, cross_attn.attend(t, c, *kv, kv_valid, false, opts));
  }
  Var f = ln_ff.apply(t, x);
  f = ff2.apply(t, gelu(t, ff1.apply(t, f)));
  return add(t, x, opts.maybe_dropout(t, f));
}

void TransformerBlock::collect(std::vector<NamedParam>& out, const std::string& prefix) {
  self_attn.collect(out, prefix + "/self");
  ln_attn.collect(out, prefix + "/ln_attn");
  if (has_cross) {
    cross_attn.collect(out, prefix + "/cross");
    ln_cross.collect(out, prefix + "/ln_cross");
  }
  ff1.collect(out, prefix + "/ff1");
  ff2.collect(out, prefix + "/ff2");
  ln_ff.collect(out, prefix + "/ln_ff");
}

Tensor sinusoidal_positions(int length, int dim) {
  Tensor out({length, dim});
  for (int pos = 0; pos < length; ++pos) {
    for (int i = 0; i < dim / 2; ++i) {
      double rate = std::pow(10000.0, -2.0 * i / dim);
      out.at(pos, 2 * i) = std::sin(pos * rate);
      out.at(pos, 2 * i + 1) = std::cos(pos * rate);
    }
    if (dim % 2 == 1) out.at(pos, dim - 1) = std::sin(pos * std::pow(10000.0, -1.0));
  }
  return out;
}

RowMask causal_mask(int n) { return RowMask::causal(n); }

void Adam::step(const std::vector<Parameter*>& params) {
  ++t;
  double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (Parameter* p : params) {
    if (!p->trainable) continue;
    Slot& s = state[p];
    if (s.m.data.empty()) {
      s.m = Tensor::zeros(p->value.shape);
      s.v = Tensor::zeros(p->value.shape);
    }
    for (size_t i = 0; i < p->value.size(); ++i) {
      double g = p->grad[i];
      s.m[i] = beta1 * s.m[i] + (1.0 - beta1) * g;
      s.v[i] = beta2 * s.v[i] + (1.0 - beta2) * g * g;
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      p->value[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
  }
}

void Adam::zero_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) p->zero_grad();
}

void Adam::export_state(const std::vector<NamedParam>& params,
                        std::vector<std::pair<std::string, Tensor>>& out) const {
  for (const NamedParam& np : params) {
    auto it = state.find(np.param);
    if (it == state.end() || it->second.m.data.empty()) continue;
    out.emplace_back("adam_m/" + np.path, it->second.m);
    out.emplace_back("adam_v/" + np.path, it->second.v);
  }
}

void Adam::import_state(const std::vector<NamedParam>& params,
                        const std::unordered_map<std::string, Tensor>& entries) {
  for (const NamedParam& np : params) {
    auto m = entries.find("adam_m/" + np.path);
    auto v = entries.find("adam_v/" + np.path);
    if (m == entries.end() || v == entries.end()) continue;
    Slot& s = state[np.param];
    s.m = m->second;
    s.v = v->second;
  }
}

}  // namespace qp
