#include "qp/qformer.hpp"

#include <array>
#include <cmath>

#include "qp/error.hpp"
#include "qp/vocab.hpp"

namespace qp {

RawStreams lift_clip(Tape& t, const FeatureClip& clip, const FeatureMask& mask) {
  RawStreams raw;
  if (mask.video && clip.video.rows() > 0) {
    raw.video = t.leaf(clip.video);
    raw.video_valid = clip.video_mask;
  }
  if (mask.audio && clip.audio.rows() > 0) {
    raw.audio = t.leaf(clip.audio);
    raw.audio_valid = clip.audio_mask;
  }
  if (mask.text && clip.text.rows() > 0) {
    raw.text = t.leaf(clip.text);
    raw.text_valid = clip.text_mask;
  }
  return raw;
}

void QFormer::init(const std::string& name, const QFormerConfig& config, Rng& rng) {
  cfg = config;
  if (cfg.vocab <= 0) throw ConfigError("qformer '" + name + "': vocabulary size must be set");
  if (cfg.queries < 1) throw ConfigError("qformer '" + name + "': need at least one query token");
  if (cfg.cross_attn_every < 1) throw ConfigError("qformer '" + name + "': cross_attn_every must be >= 1");
  query_emb = Parameter(name + ".queries", Tensor::xavier_uniform(cfg.queries, cfg.d, rng));
  text_emb = Parameter(name + ".text_emb", Tensor::xavier_uniform(cfg.vocab, cfg.d, rng));
  log_temp = Parameter(name + ".log_temp", Tensor::scalar(std::log(0.07)));
  proj_video.init(name + ".proj_video", cfg.video_dim, cfg.d, rng);
  proj_audio.init(name + ".proj_audio", cfg.audio_dim, cfg.d, rng);
  proj_text.init(name + ".proj_text", cfg.text_dim, cfg.d, rng);
  blocks.resize(static_cast<size_t>(cfg.blocks));
  for (int b = 0; b < cfg.blocks; ++b) {
    Block& blk = blocks[static_cast<size_t>(b)];
    std::string bn = name + ".block" + std::to_string(b);
    blk.shared_attn.init(bn + ".shared", cfg.d, cfg.d, cfg.heads, rng);
    blk.ln_attn.init(bn + ".ln_attn", cfg.d);
    blk.has_cross = (b % cfg.cross_attn_every) == 0;
    if (blk.has_cross) {
      blk.cross_attn.init(bn + ".cross", cfg.d, cfg.d, cfg.heads, rng);
      blk.ln_cross.init(bn + ".ln_cross", cfg.d);
    }
    blk.mm_ff1.init(bn + ".mm_ff1", cfg.d, cfg.ffn, rng);
    blk.mm_ff2.init(bn + ".mm_ff2", cfg.ffn, cfg.d, rng);
    blk.ln_mm_ff.init(bn + ".ln_mm_ff", cfg.d);
    blk.text_ff1.init(bn + ".text_ff1", cfg.d, cfg.ffn, rng);
    blk.text_ff2.init(bn + ".text_ff2", cfg.ffn, cfg.d, rng);
    blk.ln_text_ff.init(bn + ".ln_text_ff", cfg.d);
  }
  final_ln_mm.init(name + ".final_ln_mm", cfg.d);
  final_ln_text.init(name + ".final_ln_text", cfg.d);
  contrast_head.init(name + ".contrast_head", cfg.d, cfg.contrast_dim, rng);
}

StreamBundle QFormer::project_streams(Tape& t, const RawStreams& raw) {
  std::vector<Var> parts;
  std::vector<uint8_t> valid;
  auto push = [&](const std::optional<Var>& stream, Linear& proj, const std::vector<uint8_t>& mask) {
    if (!stream) return;
    Var projected = proj.apply(t, *stream);
    int rows = t.value(projected).rows();
    Var pos = t.leaf(sinusoidal_positions(rows, cfg.d));
    parts.push_back(add(t, projected, pos));
    if (static_cast<int>(mask.size()) != rows)
      throw ShapeError("stream mask length " + std::to_string(mask.size()) + " vs rows " +
                       std::to_string(rows));
    valid.insert(valid.end(), mask.begin(), mask.end());
  };
  push(raw.video, proj_video, raw.video_valid);
  push(raw.audio, proj_audio, raw.audio_valid);
  push(raw.text, proj_text, raw.text_valid);
  if (parts.empty()) throw ContractError("qformer: every feature stream is empty or masked off");
  StreamBundle bundle;
  bundle.kv = concat_rows(t, parts);
  bundle.valid = std::move(valid);
  bool any = false;
  for (uint8_t v : bundle.valid) any |= v != 0;
  if (!any) throw ContractError("qformer: no valid key/value rows remain");
  return bundle;
}

Var QFormer::run_blocks_mm(Tape& t, Var x, const StreamBundle& kv, const ForwardOpts& opts) {
  for (Block& blk : blocks) {
    Var h = blk.ln_attn.apply(t, x);
    x = add(t, x, blk.shared_attn.attend(t, h, h, nullptr, false, opts));
    if (blk.has_cross) {
      Var c = blk.ln_cross.apply(t, x);
      x = add(t, x, blk.cross_attn.attend(t, c, kv.kv, &kv.valid, false, opts));
    }
    Var f = blk.ln_mm_ff.apply(t, x);
    f = blk.mm_ff2.apply(t, gelu(t, blk.mm_ff1.apply(t, f)));
    x = add(t, x, opts.maybe_dropout(t, f));
  }
  return final_ln_mm.apply(t, x);
}

Var QFormer::encode(Tape& t, const FeatureClip& clip, const FeatureMask& mask, const ForwardOpts& opts) {
  return encode_streams(t, project_streams(t, lift_clip(t, clip, mask)), opts);
}

Var QFormer::encode_streams(Tape& t, const StreamBundle& kv, const ForwardOpts& opts) {
  return run_blocks_mm(t, t.param(query_emb), kv, opts);
}

Var QFormer::encode_text_pooled(Tape& t, const std::vector<int>& tokens, const ForwardOpts& opts) {
  if (tokens.empty()) throw ContractError("qformer: empty text");
  Var x = embedding_rows(t, t.param(text_emb), tokens);
  x = add(t, x, t.leaf(sinusoidal_positions(static_cast<int>(tokens.size()), cfg.d)));
  for (Block& blk : blocks) {
    Var h = blk.ln_attn.apply(t, x);
    x = add(t, x, blk.shared_attn.attend(t, h, h, nullptr, false, opts));
    Var f = blk.ln_text_ff.apply(t, x);
    f = blk.text_ff2.apply(t, gelu(t, blk.text_ff1.apply(t, f)));
    x = add(t, x, opts.maybe_dropout(t, f));
  }
  return mean_rows(t, final_ln_text.apply(t, x));
}

namespace {

// Joint visibility: query rows see only queries; text row i sees all
// queries plus text rows <= i.
RowMask multimodal_causal_mask(int q, int n_text) {
  int n = q + n_text;
  RowMask m{n, n, std::vector<uint8_t>(static_cast<size_t>(n) * n, 0)};
  for (int r = 0; r < q; ++r)
    for (int c = 0; c < q; ++c) m.set(r, c, 1);
  for (int r = q; r < n; ++r) {
    for (int c = 0; c < q; ++c) m.set(r, c, 1);
    for (int c = q; c <= r; ++c) m.set(r, c, 1);
  }
  return m;
}

}  // namespace

Var QFormer::generation_logits(Tape& t, const StreamBundle& kv, const std::vector<int>& input_tokens,
                               const ForwardOpts& opts) {
  if (input_tokens.empty()) throw ContractError("qformer: empty generation input");
  int q = cfg.queries;
  int n_text = static_cast<int>(input_tokens.size());
  Var qx = t.param(query_emb);
  Var tx = embedding_rows(t, t.param(text_emb), input_tokens);
  tx = add(t, tx, t.leaf(sinusoidal_positions(n_text, cfg.d)));
  RowMask joint_mask = multimodal_causal_mask(q, n_text);

  for (Block& blk : blocks) {
    std::array<Var, 2> parts{qx, tx};
    Var joint = concat_rows(t, parts);
    Var h = blk.ln_attn.apply(t, joint);
    Var attn = blk.shared_attn.attend_masked(t, h, h, joint_mask, opts);
    joint = add(t, joint, attn);
    qx = slice_rows(t, joint, 0, q);
    tx = slice_rows(t, joint, q, q + n_text);
    if (blk.has_cross) {
      Var c = blk.ln_cross.apply(t, qx);
      qx = add(t, qx, blk.cross_attn.attend(t, c, kv.kv, &kv.valid, false, opts));
    }
    Var fm = blk.ln_mm_ff.apply(t, qx);
    fm = blk.mm_ff2.apply(t, gelu(t, blk.mm_ff1.apply(t, fm)));
    qx = add(t, qx, opts.maybe_dropout(t, fm));
    Var ft = blk.ln_text_ff.apply(t, tx);
    ft = blk.text_ff2.apply(t, gelu(t, blk.text_ff1.apply(t, ft)));
    tx = add(t, tx, opts.maybe_dropout(t, ft));
  }
  Var text_final = final_ln_text.apply(t, tx);
  return matmul(t, text_final, transpose(t, t.param(text_emb)));  // tied logits head
}

Var QFormer::generation_loss(Tape& t, const FeatureClip& clip, const FeatureMask& mask,
                             const std::vector<int>& target, const ForwardOpts& opts) {
  if (target.empty()) throw ContractError("qformer: empty generation target");
  StreamBundle kv = project_streams(t, lift_clip(t, clip, mask));
  // input = [BOS, t0..t_{n-1}], gold = [t0..t_{n-1}, EOS]
  std::vector<int> input;
  input.push_back(Vocabulary::kBos);
  input.insert(input.end(), target.begin(), target.end());
  std::vector<int> gold = target;
  gold.push_back(Vocabulary::kEos);
  Var logits = generation_logits(t, kv, input, opts);
  return cross_entropy(t, logits, gold);
}

void QFormer::collect(std::vector<NamedParam>& out, const std::string& prefix) {
  out.push_back({prefix + "/queries", &query_emb});
  out.push_back({prefix + "/text_emb", &text_emb});
  out.push_back({prefix + "/log_temp", &log_temp});
  proj_video.collect(out, prefix + "/proj_video");
  proj_audio.collect(out, prefix + "/proj_audio");
  proj_text.collect(out, prefix + "/proj_text");
  for (size_t b = 0; b < blocks.size(); ++b) {
    std::string bp = prefix + "/block" + std::to_string(b);
    Block& blk = blocks[b];
    blk.shared_attn.collect(out, bp + "/shared");
    blk.ln_attn.collect(out, bp + "/ln_attn");
    if (blk.has_cross) {
      blk.cross_attn.collect(out, bp + "/cross");
      blk.ln_cross.collect(out, bp + "/ln_cross");
    }
    blk.mm_ff1.collect(out, bp + "/mm_ff1");
    blk.mm_ff2.collect(out, bp + "/mm_ff2");
    blk.ln_mm_ff.collect(out, bp + "/ln_mm_ff");
    blk.text_ff1.collect(out, bp + "/text_ff1");
    blk.text_ff2.collect(out, bp + "/text_ff2");
    blk.ln_text_ff.collect(out, bp + "/ln_text_ff");
  }
  final_ln_mm.collect(out, prefix + "/final_ln_mm");
  final_ln_text.collect(out, prefix + "/final_ln_text");
  contrast_head.collect(out, prefix + "/contrast_head");
}

ContrastiveResult contrastive_from_tokens(Tape& t, const std::vector<Var>& clip_tokens,
                                          const std::vector<Var>& text_pooled, Linear& head,
                                          Parameter& log_temp) {
  size_t batch = clip_tokens.size();
  if (batch < 2) throw ContractError("contrastive loss needs a batch of at least 2");
  if (text_pooled.size() != batch) throw ContractError("contrastive: clip/text count mismatch");

  // normalized text matrix (B x dc)
  std::vector<Var> text_rows;
  text_rows.reserve(batch);
  for (Var tp : text_pooled) text_rows.push_back(normalize_rows(t, head.apply(t, tp)));
  Var text_mat = concat_rows(t, text_rows);

  // similarity rows: query-max cosine per clip against every text
  std::vector<Var> sim_rows;
  sim_rows.reserve(batch);
  Var text_mat_T = transpose(t, text_mat);
  for (Var ct : clip_tokens) {
    Var qn = normalize_rows(t, head.apply(t, ct));   // Q x dc
    Var sims = matmul(t, qn, text_mat_T);            // Q x B cosines
    sim_rows.push_back(colmax(t, sims));             // 1 x B query-max
  }
  Var sim = concat_rows(t, sim_rows);  // B x B, rows = clips, cols = texts

  Var inv_temp = exp_elem(t, neg(t, t.param(log_temp)));
  Var logits = mul_scalarvar(t, sim, inv_temp);
  std::vector<int> diag(batch);
  for (size_t i = 0; i < batch; ++i) diag[i] = static_cast<int>(i);
  Var c2t = cross_entropy(t, logits, diag);
  Var t2c = cross_entropy(t, transpose(t, logits), diag);
  ContrastiveResult out;
  out.loss = scale(t, add(t, c2t, t2c), 0.5);

  // per-sample decomposition for the permutation-invariance audit
  const Tensor& L = t.value(logits);
  std::vector<double> rows_c2t = cross_entropy_per_row(L, diag);
  std::vector<double> rows_t2c = cross_entropy_per_row(vtranspose(L), diag);
  out.per_sample.resize(batch);
  for (size_t i = 0; i < batch; ++i) out.per_sample[i] = 0.5 * (rows_c2t[i] + rows_t2c[i]);
  return out;
}

ContrastiveResult contrastive_loss(Tape& t, QFormer& qf, const std::vector<const FeatureClip*>& clips,
                                   const std::vector<std::vector<int>>& texts, const FeatureMask& mask,
                                   const ForwardOpts& opts) {
  if (clips.size() != texts.size()) throw ContractError("contrastive: clip/text count mismatch");
  std::vector<Var> clip_tokens, text_pooled;
  clip_tokens.reserve(clips.size());
  text_pooled.reserve(texts.size());
  for (const FeatureClip* clip : clips) clip_tokens.push_back(qf.encode(t, *clip, mask, opts));
  for (const auto& tokens : texts) text_pooled.push_back(qf.encode_text_pooled(t, tokens, opts));
  return contrastive_from_tokens(t, clip_tokens, text_pooled, qf.contrast_head, qf.log_temp);
}

}  // namespace qp
