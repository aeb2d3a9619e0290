#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace qp {

// Generator-only ground truth attached to synthetic clips. Real-world
// corpora load without it; metrics that need it check first.
struct LatentStep {
  std::string verb;
  std::string object;
  std::optional<std::string> prep;
  std::optional<std::string> place;
  int verb_id = -1;
  int object_id = -1;
  int place_id = -1;
};

struct ClipLatent {
  bool coreferent = false;
  std::string main_object;
  std::vector<LatentStep> steps;
};

struct ClipRecord {
  std::string video_id;
  int clip_index = 0;
  double start_s = 0.0;
  double end_s = 0.0;
  std::string description;
  std::string action_sequence;
  std::optional<std::string> subtitle;
  std::optional<std::string> external_description;
  std::optional<ClipLatent> latent;
};

struct VideoDocument {
  std::string video_id;
  std::vector<ClipRecord> clips;
};

// Name inventories the synthetic world draws from; mirrored into corpus
// files so feature codebooks can be rebuilt from the file alone.
struct Inventories {
  std::vector<std::string> objects;
  std::vector<std::string> places;
  std::vector<std::string> verbs;
  std::vector<std::string> prepositions;
};

struct Corpus {
  nlohmann::json world;  // generation config echo; empty for external corpora
  Inventories inventories;
  std::vector<VideoDocument> videos;

  int total_clips() const;
  const ClipRecord& clip(int video_idx, int clip_idx) const;
};

// Strict schema load: every invariant violation is reported with video and
// clip coordinates. An empty video list is a valid, empty corpus.
Corpus load_corpus(const std::string& path);
Corpus corpus_from_json(const nlohmann::json& j, const std::string& origin);
void save_corpus(const Corpus& corpus, const std::string& path);
nlohmann::json corpus_to_json(const Corpus& corpus);

// All description/action/subtitle/external text, used for vocabulary and
// language-model pretraining.
std::vector<std::string> corpus_texts(const Corpus& corpus);

}  // namespace qp
