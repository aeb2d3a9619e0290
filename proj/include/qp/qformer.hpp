#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qp/features.hpp"
#include "qp/nn.hpp"

namespace qp {

struct QFormerConfig {
  int d = 32;
  int heads = 4;
  int ffn = 128;
  int blocks = 2;
  int queries = 8;
  int contrast_dim = 16;
  int vocab = 0;  // set from the corpus vocabulary
  int video_dim = 16;
  int audio_dim = 12;
  int text_dim = 8;
  // cross-attention appears in block b when b % cross_attn_every == 0
  // (1 = every block, 2 = alternating)
  int cross_attn_every = 1;
};

// Per-stream feature sequences lifted onto a tape, before projection to the
// model dim. The long-context path concatenates several clips (plus learned
// separators) into the same structure.
struct RawStreams {
  std::optional<Var> video, audio, text;
  std::vector<uint8_t> video_valid, audio_valid, text_valid;
};

RawStreams lift_clip(Tape& t, const FeatureClip& clip, const FeatureMask& mask);

// Projected and position-encoded key/value set for cross-attention.
struct StreamBundle {
  Var kv;
  std::vector<uint8_t> valid;
};

// Querying transformer with a multimodal path and a text path sharing the
// self-attention layers. The multimodal path cross-attends into the frozen
// features and always emits exactly `queries` tokens.
class QFormer {
 public:
  struct Block {
    MultiHeadAttention shared_attn;  // shared between both paths
    LayerNorm ln_attn;
    bool has_cross = false;
    MultiHeadAttention cross_attn;
    LayerNorm ln_cross;
    Linear mm_ff1, mm_ff2;
    LayerNorm ln_mm_ff;
    Linear text_ff1, text_ff2;
    LayerNorm ln_text_ff;
  };

  QFormerConfig cfg;
  Parameter query_emb;  // queries x d
  Parameter text_emb;   // vocab x d, tied with the text-path logits head
  Parameter log_temp;   // contrastive temperature, stored as log(tau)
  Linear proj_video, proj_audio, proj_text;
  std::vector<Block> blocks;
  LayerNorm final_ln_mm, final_ln_text;
  Linear contrast_head;  // d -> contrast_dim, shared by both sides

  void init(const std::string& name, const QFormerConfig& config, Rng& rng);

  StreamBundle project_streams(Tape& t, const RawStreams& raw);

  // Multimodal path alone: fixed `queries` output rows for any kv length.
  Var encode(Tape& t, const FeatureClip& clip, const FeatureMask& mask, const ForwardOpts& opts);
  Var encode_streams(Tape& t, const StreamBundle& kv, const ForwardOpts& opts);

  // Text path alone (bidirectional), mean-pooled to 1 x d.
  Var encode_text_pooled(Tape& t, const std::vector<int>& tokens, const ForwardOpts& opts);

  // Joint pass: text decodes causally while attending to the query tokens
  // through the shared self-attention. Returns text-position logits (T x V).
  Var generation_logits(Tape& t, const StreamBundle& kv, const std::vector<int>& input_tokens,
                        const ForwardOpts& opts);

  // Teacher-forced cross-entropy of `target` (+ EOS) given the clip.
  Var generation_loss(Tape& t, const FeatureClip& clip, const FeatureMask& mask,
                      const std::vector<int>& target, const ForwardOpts& opts);

  void collect(std::vector<NamedParam>& out, const std::string& prefix);

 private:
  Var run_blocks_mm(Tape& t, Var queries, const StreamBundle& kv, const ForwardOpts& opts);
};

struct ContrastiveResult {
  Var loss;
  std::vector<double> per_sample;
};

// Symmetric InfoNCE over in-batch pairs. Similarity of a clip to a text is
// the max over query tokens of the cosine between contrastive-head
// projections (query-max). Requires batch size >= 2.
ContrastiveResult contrastive_from_tokens(Tape& t, const std::vector<Var>& clip_tokens,
                                          const std::vector<Var>& text_pooled, Linear& head,
                                          Parameter& log_temp);

ContrastiveResult contrastive_loss(Tape& t, QFormer& qf, const std::vector<const FeatureClip*>& clips,
                                   const std::vector<std::vector<int>>& texts, const FeatureMask& mask,
                                   const ForwardOpts& opts);

}  // namespace qp
