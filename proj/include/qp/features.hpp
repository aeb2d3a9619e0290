#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qp/corpus.hpp"
#include "qp/tensor.hpp"
#include "qp/worldgen.hpp"

namespace qp {

// Stand-in for frozen multimodal encoder output: one variable-length
// feature sequence per stream plus validity masks.
struct FeatureClip {
  Tensor video;  // T_v x D_v, object/place identity lives here
  Tensor audio;  // T_a x D_a, verb identity lives here
  Tensor text;   // T_t x D_t, subtitle words (or a single unk row)
  std::vector<uint8_t> video_mask, audio_mask, text_mask;
};

// Stream toggles for the feature-side ablations.
struct FeatureMask {
  bool video = true;
  bool audio = true;
  bool text = true;

  bool any() const { return video || audio || text; }
  std::string to_string() const;
  static FeatureMask parse(const std::string& s);
};

// Fixed random codebooks keyed by the world seed. Word vectors for subtitle
// tokens are derived per word from the same seed rather than stored.
struct Codebooks {
  int video_dim = 0, audio_dim = 0, text_dim = 0;
  uint64_t seed = 0;
  Tensor objects;   // num_objects x D_v
  Tensor places;    // num_places x D_v
  Tensor verbs;     // num_verbs x D_a
  Tensor generic;   // 1 x D_v, shown when a clip hides its object
  Tensor unk_text;  // 1 x D_t, shown when no subtitle exists

  Tensor word_vector(const std::string& word) const;
};

Codebooks build_codebooks(const Inventories& inv, const WorldConfig& cfg);

// Deterministic given (clip identity, latent, world seed); bit-identical
// across calls and encode orders.
FeatureClip frozen_encode(const ClipRecord& clip, const Codebooks& cb, const WorldConfig& cfg);

// Per-video feature cache for a whole corpus.
std::vector<std::vector<FeatureClip>> encode_corpus(const Corpus& corpus, const Codebooks& cb,
                                                    const WorldConfig& cfg);

// Writes the fixed codebooks through the common checkpoint container.
void export_codebooks(const Codebooks& cb, const std::string& path);

}  // namespace qp
