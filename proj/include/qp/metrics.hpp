#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

namespace qp {

// Corpus-level BLEU-2: clipped unigram/bigram precisions pooled over the
// corpus, uniform 0.5/0.5 weights, exponential brevity penalty. Pooled
// precisions of zero are floored at 1e-9.
struct Bleu2Detail {
  double precision1 = 0.0;
  double precision2 = 0.0;
  double brevity_penalty = 0.0;
  double score = 0.0;
};

Bleu2Detail bleu2_detail(const std::vector<std::vector<std::string>>& candidates,
                         const std::vector<std::vector<std::string>>& references);
double bleu2(const std::vector<std::string>& candidate_texts,
             const std::vector<std::string>& reference_texts);

// Exact-match METEOR for one sentence pair: unigram alignment maximizing
// matches then minimizing chunks, F_mean = P*R / (0.9*P + 0.1*R), chunk
// penalty 0.5 * (chunks/matches)^3.
double meteor(const std::vector<std::string>& candidate, const std::vector<std::string>& reference);
double meteor(const std::string& candidate_text, const std::string& reference_text);
double meteor_corpus(const std::vector<std::string>& candidate_texts,
                     const std::vector<std::string>& reference_texts);

// Alignment internals exposed for the exhaustive oracle comparison.
struct MeteorAlignment {
  int matches = 0;
  int chunks = 0;
};
MeteorAlignment meteor_align(const std::vector<std::string>& candidate,
                             const std::vector<std::string>& reference);

// Fraction of steps whose predicted object equals the latent object, paired
// by step index; unparseable predictions contribute zero correct steps.
double object_accuracy(const std::vector<std::string>& predicted_action_texts,
                       const std::vector<std::vector<std::string>>& latent_objects);

// ---------------------------------------------------------------------------
// Reports and cross-validation
// ---------------------------------------------------------------------------

struct MetricReport {
  std::string task;  // "action_sequence" | "description"
  double bleu2 = 0.0;
  double meteor = 0.0;
  std::optional<double> object_accuracy;
  int n_items = 0;
  std::string config_desc;

  nlohmann::json to_json() const;
};

struct EvalItem {
  std::string video_id;
  int clip_index = 0;
  std::string prediction;
  std::string reference;
  std::vector<std::string> latent_objects;  // empty when the corpus has no latent
};

// Scores a flat list of items (tokenizing with the shared tokenizer).
MetricReport score_items(const std::vector<EvalItem>& items, const std::string& task);

// Deterministic half split of the validation set by video-id hash parity.
int crossval_half(const std::string& video_id);

struct CrossValReport {
  MetricReport averaged;
  int best_epoch_fold0 = -1;  // selected on half 0, measured on half 1
  int best_epoch_fold1 = -1;  // selected on half 1, measured on half 0
};

// per_epoch[e] holds the full validation predictions after epoch e. For
// each fold the best epoch is chosen by BLEU-2 on the selection half and
// measured on the other; the report averages the two measurements.
CrossValReport cross_validate(const std::vector<std::vector<EvalItem>>& per_epoch,
                              const std::string& task);

}  // namespace qp
