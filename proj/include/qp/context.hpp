#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "qp/qformer.hpp"

namespace qp {

// Context-window description: explicit clip offsets around the current clip
// (0 = current) with optional leading/trailing '*' meaning all previous /
// all following clips. "-1,0,+1", "*,0" and "*,0,*" are typical forms.
struct ContextSpec {
  bool all_left = false;
  bool all_right = false;
  std::vector<int> offsets;  // sorted, deduplicated, star-covered ones removed

  static ContextSpec parse(const std::string& text);
  std::string to_string() const;

  // Absolute clip indices selected for the given position; offsets falling
  // outside the video are skipped. May be empty.
  std::vector<int> select(int idx, int n_clips) const;
};

// Action planner model. With a context window configured it is the dual
// Q-former architecture: an independent context Q-former reads the
// surrounding clips (concatenated per stream with learned boundary
// separators) and a small transformer encoder fuses both query sets. With
// no context it degenerates to the single-clip baseline.
class PlannerModel {
 public:
  struct ContextArm {
    QFormer qformer;  // no parameters shared with the current-clip Q-former
    Parameter sep_video, sep_audio, sep_text;     // learned clip-boundary rows
    Parameter null_video, null_audio, null_text;  // learned empty-window rows
    Parameter tag_current, tag_context;           // source embeddings added per token
    std::vector<TransformerBlock> fusion;
    LayerNorm fusion_ln;
    ContextSpec spec;
  };

  QFormerConfig cfg;
  FeatureMask features;
  int decoder_dim = 32;
  int fusion_blocks = 2;

  QFormer current;
  std::unique_ptr<ContextArm> arm;  // null for the baseline
  Linear projection;                // model dim -> decoder dim, trained in stage 2

  void init(const QFormerConfig& config, const std::optional<std::string>& context_spec,
            const FeatureMask& feature_mask, int dec_dim, int n_fusion_blocks, Rng& rng);

  bool has_context() const { return arm != nullptr; }
  int token_count() const { return has_context() ? 2 * cfg.queries : cfg.queries; }

  // Per-stream context features for clip `idx`: selected clips concatenated
  // in temporal order with separators, or the learned null row when the
  // window is empty.
  RawStreams gather_context(Tape& t, const std::vector<FeatureClip>& video_feats, int idx);
  // Value-level variant (current parameter values baked in), for tests.
  FeatureClip gather_context_values(const std::vector<FeatureClip>& video_feats, int idx);

  // Q (baseline) or 2Q (fused) tokens in model dim.
  Var clip_tokens(Tape& t, const std::vector<FeatureClip>& video_feats, int idx, const ForwardOpts& opts);
  // Same, mapped to the decoder embedding space.
  Var projected_tokens(Tape& t, const std::vector<FeatureClip>& video_feats, int idx,
                       const ForwardOpts& opts);

  std::vector<NamedParam> named_params();

  std::string config_desc() const;
};

}  // namespace qp
