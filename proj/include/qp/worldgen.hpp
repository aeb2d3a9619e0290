#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"
#include "qp/corpus.hpp"

namespace qp {

// Knobs for the synthetic micro-kitchen corpus. Each video is a short task
// around one main object; coreferent clips hide that object from their own
// feature streams so only surrounding clips (or conditioning text) can
// recover it.
struct WorldConfig {
  int num_objects = 12;
  int num_places = 10;
  int num_verbs = 12;
  int train_videos = 150;
  int val_videos = 40;
  int clips_per_video_min = 5;
  int clips_per_video_max = 5;
  int max_steps_per_clip = 2;
  double coreference_rate = 0.5;
  double subtitle_rate = 0.85;
  double invalid_subtitle_rate = 0.1;
  double feature_noise = 0.05;
  double external_fidelity = 0.85;

  // frozen-encoder output dims and stream length bounds
  int video_dim = 16;
  int audio_dim = 12;
  int text_dim = 8;
  int video_len_max = 16;
  int audio_len_max = 10;

  uint64_t seed = 1;

  nlohmann::json to_json() const;
  static WorldConfig from_json(const nlohmann::json& j);
  // Collected violations, empty when the config is usable.
  std::vector<std::string> validate() const;
};

struct GeneratedCorpora {
  Corpus train;
  Corpus val;
};

// Deterministic: the same config yields byte-identical corpus files.
GeneratedCorpora generate_corpus(const WorldConfig& cfg);

}  // namespace qp
