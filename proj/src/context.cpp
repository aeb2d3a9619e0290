#include "qp/context.hpp"

#include <algorithm>
#include <set>

#include "qp/error.hpp"

namespace qp {

// ---------------------------------------------------------------------------
// ContextSpec
// ---------------------------------------------------------------------------

ContextSpec ContextSpec::parse(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  for (char c : text) {
    if (c == ',') {
      tokens.push_back(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  tokens.push_back(cur);
  if (tokens.size() == 1 && tokens[0].empty()) throw ParseError("context spec: empty spec");

  ContextSpec spec;
  std::set<int> offsets;
  for (size_t i = 0; i < tokens.size(); ++i) {
    const std::string& tok = tokens[i];
    if (tok.empty()) throw ParseError("context spec: empty token at position " + std::to_string(i));
    if (tok == "*") {
      if (i == 0)
        spec.all_left = true;
      else if (i + 1 == tokens.size())
        spec.all_right = true;
      else
        throw ParseError("context spec: '*' is only allowed at the ends");
      continue;
    }
    size_t pos = 0;
    int value = 0;
    try {
      value = std::stoi(tok, &pos);
    } catch (const std::exception&) {
      throw ParseError("context spec: malformed token '" + tok + "'");
    }
    if (pos != tok.size()) throw ParseError("context spec: malformed token '" + tok + "'");
    offsets.insert(value);
  }
  for (int o : offsets) {
    if (spec.all_left && o < 0) continue;   // covered by the star
    if (spec.all_right && o > 0) continue;
    spec.offsets.push_back(o);
  }
  return spec;
}

std::string ContextSpec::to_string() const {
  std::string out;
  if (all_left) out += "*,";
  for (int o : offsets) {
    if (o > 0) out += "+";
    out += std::to_string(o) + ",";
  }
  if (all_right) out += "*,";
  if (!out.empty()) out.pop_back();
  return out;
}

std::vector<int> ContextSpec::select(int idx, int n_clips) const {
  std::set<int> picked;
  if (all_left)
    for (int i = 0; i < idx; ++i) picked.insert(i);
  if (all_right)
    for (int i = idx + 1; i < n_clips; ++i) picked.insert(i);
  for (int o : offsets) {
    int i = idx + o;
    if (i >= 0 && i < n_clips) picked.insert(i);
  }
  return {picked.begin(), picked.end()};
}

// ---------------------------------------------------------------------------
// PlannerModel
// ---------------------------------------------------------------------------

void PlannerModel::init(const QFormerConfig& config, const std::optional<std::string>& context_spec,
                        const FeatureMask& feature_mask, int dec_dim, int n_fusion_blocks, Rng& rng) {
  cfg = config;
  features = feature_mask;
  decoder_dim = dec_dim;
  fusion_blocks = n_fusion_blocks;
  if (!features.any()) throw ConfigError("planner: feature mask disables every stream");
  current.init("current", cfg, rng);
  if (context_spec) {
    arm = std::make_unique<ContextArm>();
    arm->spec = ContextSpec::parse(*context_spec);
    arm->qformer.init("context", cfg, rng);
    arm->sep_video = Parameter("sep_video", Tensor::xavier_uniform(1, cfg.video_dim, rng));
    arm->sep_audio = Parameter("sep_audio", Tensor::xavier_uniform(1, cfg.audio_dim, rng));
    arm->sep_text = Parameter("sep_text", Tensor::xavier_uniform(1, cfg.text_dim, rng));
    arm->null_video = Parameter("null_video", Tensor::xavier_uniform(1, cfg.video_dim, rng));
    arm->null_audio = Parameter("null_audio", Tensor::xavier_uniform(1, cfg.audio_dim, rng));
    arm->null_text = Parameter("null_text", Tensor::xavier_uniform(1, cfg.text_dim, rng));
    arm->tag_current = Parameter("tag_current", Tensor::xavier_uniform(1, cfg.d, rng));
    arm->tag_context = Parameter("tag_context", Tensor::xavier_uniform(1, cfg.d, rng));
    arm->fusion.resize(static_cast<size_t>(fusion_blocks));
    for (int b = 0; b < fusion_blocks; ++b)
      arm->fusion[static_cast<size_t>(b)].init("fusion.block" + std::to_string(b), cfg.d, cfg.ffn,
                                               cfg.heads, false, 0, rng);
    arm->fusion_ln.init("fusion.final_ln", cfg.d);
  }
  projection.init("projection", cfg.d, decoder_dim, rng);
}

RawStreams PlannerModel::gather_context(Tape& t, const std::vector<FeatureClip>& video_feats, int idx) {
  if (!arm) throw ContractError("gather_context: baseline model has no context arm");
  if (idx < 0 || idx >= static_cast<int>(video_feats.size()))
    throw ContractError("gather_context: clip index out of range");
  std::vector<int> picked = arm->spec.select(idx, static_cast<int>(video_feats.size()));

  RawStreams raw;
  auto build = [&](auto stream_of, auto mask_of, Parameter& sep, Parameter& null_row,
                   std::optional<Var>& out, std::vector<uint8_t>& out_valid) {
    if (picked.empty()) {
      out = t.param(null_row);
      out_valid = {1};
      return;
    }
    std::vector<Var> parts;
    for (size_t k = 0; k < picked.size(); ++k) {
      const FeatureClip& fc = video_feats[static_cast<size_t>(picked[k])];
      if (k > 0) {
        parts.push_back(t.param(sep));
        out_valid.push_back(1);
      }
      parts.push_back(t.leaf(stream_of(fc)));
      const std::vector<uint8_t>& m = mask_of(fc);
      out_valid.insert(out_valid.end(), m.begin(), m.end());
    }
    out = concat_rows(t, parts);
  };
  if (features.video)
    build([](const FeatureClip& f) { return f.video; }, [](const FeatureClip& f) { return f.video_mask; },
          arm->sep_video, arm->null_video, raw.video, raw.video_valid);
  if (features.audio)
    build([](const FeatureClip& f) { return f.audio; }, [](const FeatureClip& f) { return f.audio_mask; },
          arm->sep_audio, arm->null_audio, raw.audio, raw.audio_valid);
  if (features.text)
    build([](const FeatureClip& f) { return f.text; }, [](const FeatureClip& f) { return f.text_mask; },
          arm->sep_text, arm->null_text, raw.text, raw.text_valid);
  return raw;
}

FeatureClip PlannerModel::gather_context_values(const std::vector<FeatureClip>& video_feats, int idx) {
  Tape t;
  FeatureMask keep = features;
  features = FeatureMask{};  // all streams on for the value view
  RawStreams raw = gather_context(t, video_feats, idx);
  features = keep;
  FeatureClip out;
  auto materialize = [&](const std::optional<Var>& v, const std::vector<uint8_t>& valid, Tensor& dst,
                         std::vector<uint8_t>& mask) {
    if (!v) return;
    dst = t.value(*v);
    mask = valid;
  };
  materialize(raw.video, raw.video_valid, out.video, out.video_mask);
  materialize(raw.audio, raw.audio_valid, out.audio, out.audio_mask);
  materialize(raw.text, raw.text_valid, out.text, out.text_mask);
  return out;
}

Var PlannerModel::clip_tokens(Tape& t, const std::vector<FeatureClip>& video_feats, int idx,
                              const ForwardOpts& opts) {
  if (idx < 0 || idx >= static_cast<int>(video_feats.size()))
    throw ContractError("clip_tokens: clip index out of range");
  Var cur = current.encode(t, video_feats[static_cast<size_t>(idx)], features, opts);
  if (!arm) return cur;

  RawStreams gathered = gather_context(t, video_feats, idx);
  Var ctx = arm->qformer.encode_streams(t, arm->qformer.project_streams(t, gathered), opts);
  Var tagged_cur = add_rowvec(t, cur, t.param(arm->tag_current));
  Var tagged_ctx = add_rowvec(t, ctx, t.param(arm->tag_context));
  std::array<Var, 2> parts{tagged_cur, tagged_ctx};
  Var fused = concat_rows(t, parts);
  for (TransformerBlock& blk : arm->fusion)
    fused = blk.apply(t, fused, nullptr, false, std::nullopt, nullptr, opts);
  return arm->fusion_ln.apply(t, fused);
}

Var PlannerModel::projected_tokens(Tape& t, const std::vector<FeatureClip>& video_feats, int idx,
                                   const ForwardOpts& opts) {
  return projection.apply(t, clip_tokens(t, video_feats, idx, opts));
}

std::vector<NamedParam> PlannerModel::named_params() {
  std::vector<NamedParam> out;
  current.collect(out, "qformer_current");
  if (arm) {
    arm->qformer.collect(out, "qformer_context");
    out.push_back({"context/sep_video", &arm->sep_video});
    out.push_back({"context/sep_audio", &arm->sep_audio});
    out.push_back({"context/sep_text", &arm->sep_text});
    out.push_back({"context/null_video", &arm->null_video});
    out.push_back({"context/null_audio", &arm->null_audio});
    out.push_back({"context/null_text", &arm->null_text});
    out.push_back({"context/tag_current", &arm->tag_current});
    out.push_back({"context/tag_context", &arm->tag_context});
    for (size_t b = 0; b < arm->fusion.size(); ++b)
      arm->fusion[b].collect(out, "fusion/block" + std::to_string(b));
    arm->fusion_ln.collect(out, "fusion/final_ln");
  }
  projection.collect(out, "projection");
  return out;
}

std::string PlannerModel::config_desc() const {
  std::string out = "context=" + (arm ? arm->spec.to_string() : std::string("-"));
  out += " features=" + features.to_string();
  return out;
}

}  // namespace qp
