#include "qp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <unordered_map>

#include "qp/error.hpp"
#include "qp/grammar.hpp"
#include "qp/rng.hpp"
#include "qp/vocab.hpp"

namespace qp {

// ---------------------------------------------------------------------------
// BLEU-2
// ---------------------------------------------------------------------------

namespace {

using NgramCounts = std::map<std::vector<std::string>, int>;

NgramCounts count_ngrams(const std::vector<std::string>& tokens, int n) {
  NgramCounts counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::vector<std::string> gram(tokens.begin() + static_cast<long>(i), tokens.begin() + static_cast<long>(i + n));
    counts[gram]++;
  }
  return counts;
}

}  // namespace

Bleu2Detail bleu2_detail(const std::vector<std::vector<std::string>>& candidates,
                         const std::vector<std::vector<std::string>>& references) {
  if (candidates.empty()) throw ContractError("bleu2: empty corpus");
  if (candidates.size() != references.size())
    throw ContractError("bleu2: candidate/reference count mismatch");

  long clipped[2] = {0, 0};
  long total[2] = {0, 0};
  long cand_len = 0, ref_len = 0;
  for (size_t i = 0; i < candidates.size(); ++i) {
    cand_len += static_cast<long>(candidates[i].size());
    ref_len += static_cast<long>(references[i].size());
    for (int n = 1; n <= 2; ++n) {
      NgramCounts c = count_ngrams(candidates[i], n);
      NgramCounts r = count_ngrams(references[i], n);
      for (const auto& [gram, count] : c) {
        auto it = r.find(gram);
        clipped[n - 1] += std::min(count, it == r.end() ? 0 : it->second);
        total[n - 1] += count;
      }
    }
  }

  Bleu2Detail d;
  d.precision1 = total[0] > 0 ? static_cast<double>(clipped[0]) / total[0] : 0.0;
  d.precision2 = total[1] > 0 ? static_cast<double>(clipped[1]) / total[1] : 0.0;
  if (cand_len == 0) {
    d.brevity_penalty = 0.0;
    d.score = 0.0;
    return d;
  }
  d.brevity_penalty =
      cand_len > ref_len ? 1.0 : std::exp(1.0 - static_cast<double>(ref_len) / cand_len);
  double p1 = std::max(d.precision1, 1e-9);
  double p2 = std::max(d.precision2, 1e-9);
  d.score = d.brevity_penalty * std::exp(0.5 * std::log(p1) + 0.5 * std::log(p2));
  return d;
}

double bleu2(const std::vector<std::string>& candidate_texts,
             const std::vector<std::string>& reference_texts) {
  std::vector<std::vector<std::string>> c, r;
  c.reserve(candidate_texts.size());
  r.reserve(reference_texts.size());
  for (const auto& t : candidate_texts) c.push_back(tokenize(t));
  for (const auto& t : reference_texts) r.push_back(tokenize(t));
  return bleu2_detail(c, r).score;
}

// ---------------------------------------------------------------------------
// METEOR (exact-match variant)
// ---------------------------------------------------------------------------

namespace {

// Branch-and-bound search for the alignment with the maximum number of
// matches and, among those, the fewest chunks. Candidate positions are
// visited left to right; the budget per token type is fixed by the counts,
// so only the choice of occurrences is explored.
struct AlignSearch {
  const std::vector<std::string>& cand;
  const std::vector<std::string>& ref;
  std::unordered_map<std::string, int> budget;          // matches left per type
  std::unordered_map<std::string, int> cand_remaining;  // candidate occurrences left
  std::vector<uint8_t> ref_used;
  int best_chunks = 1 << 20;
  long nodes = 0;
  static constexpr long kNodeCap = 4000000;

  AlignSearch(const std::vector<std::string>& c, const std::vector<std::string>& r) : cand(c), ref(r) {
    std::unordered_map<std::string, int> cc, rc;
    for (const auto& w : c) cc[w]++;
    for (const auto& w : r) rc[w]++;
    for (const auto& [w, n] : cc) {
      auto it = rc.find(w);
      if (it != rc.end()) budget[w] = std::min(n, it->second);
    }
    cand_remaining = cc;
    ref_used.assign(r.size(), 0);
  }

  int total_budget() const {
    int s = 0;
    for (const auto& [w, n] : budget) s += n;
    return s;
  }

  // pos: next candidate index; prev_ref: ref index matched at pos-1 (or -2
  // when pos-1 was unmatched); chunks so far.
  void dfs(size_t pos, long prev_ref, int chunks, int remaining) {
    if (++nodes > kNodeCap) return;  // bounded; corpus sentences stay tiny
    if (chunks >= best_chunks) return;
    if (remaining == 0) {
      best_chunks = chunks;
      return;
    }
    if (pos >= cand.size()) return;

    const std::string& w = cand[pos];
    auto b = budget.find(w);
    int left_of_type = b == budget.end() ? 0 : b->second;

    // Option 1: match this occurrence to some free ref slot of the type.
    if (left_of_type > 0) {
      for (size_t j = 0; j < ref.size(); ++j) {
        if (ref_used[j] || ref[j] != w) continue;
        bool continues = prev_ref >= 0 && static_cast<long>(j) == prev_ref + 1;
        ref_used[j] = 1;
        b->second--;
        cand_remaining[w]--;
        dfs(pos + 1, static_cast<long>(j), chunks + (continues ? 0 : 1), remaining - 1);
        cand_remaining[w]++;
        b->second++;
        ref_used[j] = 0;
      }
    }

    // Option 2: leave it unmatched, if the budget can still be met by the
    // remaining occurrences of this type.
    int occ_left = cand_remaining[w];
    if (occ_left - 1 >= left_of_type) {
      cand_remaining[w]--;
      dfs(pos + 1, -2, chunks, remaining);
      cand_remaining[w]++;
    }
  }
};

// Chunk count of an explicit alignment given as (cand_pos -> ref_pos) pairs
// sorted by candidate position.
int count_chunks(const std::vector<std::pair<int, int>>& pairs) {
  int chunks = 0;
  for (size_t i = 0; i < pairs.size(); ++i) {
    bool continues = i > 0 && pairs[i].first == pairs[i - 1].first + 1 &&
                     pairs[i].second == pairs[i - 1].second + 1;
    if (!continues) ++chunks;
  }
  return chunks;
}

// Valid (full-budget) alignment used to seed the branch-and-bound: per
// token type, the first k occurrences on each side paired in order.
std::vector<std::pair<int, int>> greedy_alignment(const std::vector<std::string>& cand,
                                                  const std::vector<std::string>& ref) {
  std::unordered_map<std::string, int> cc, rc, budget;
  for (const auto& w : cand) cc[w]++;
  for (const auto& w : ref) rc[w]++;
  for (const auto& [w, n] : cc) {
    auto it = rc.find(w);
    if (it != rc.end()) budget[w] = std::min(n, it->second);
  }
  std::unordered_map<std::string, std::vector<int>> ref_slots;
  for (int j = 0; j < static_cast<int>(ref.size()); ++j) ref_slots[ref[j]].push_back(j);
  std::unordered_map<std::string, int> next_slot, taken;
  std::vector<std::pair<int, int>> pairs;
  for (int i = 0; i < static_cast<int>(cand.size()); ++i) {
    const std::string& w = cand[i];
    auto b = budget.find(w);
    if (b == budget.end() || taken[w] >= b->second) continue;
    pairs.emplace_back(i, ref_slots[w][static_cast<size_t>(next_slot[w]++)]);
    taken[w]++;
  }
  return pairs;
}

}  // namespace

MeteorAlignment meteor_align(const std::vector<std::string>& candidate,
                             const std::vector<std::string>& reference) {
  AlignSearch search(candidate, reference);
  int m = search.total_budget();
  MeteorAlignment out;
  out.matches = m;
  if (m == 0) return out;
  search.best_chunks = count_chunks(greedy_alignment(candidate, reference));
  search.dfs(0, -2, 0, m);
  out.chunks = search.best_chunks;
  return out;
}

double meteor(const std::vector<std::string>& candidate, const std::vector<std::string>& reference) {
  if (candidate.empty() || reference.empty()) return 0.0;
  MeteorAlignment a = meteor_align(candidate, reference);
  if (a.matches == 0) return 0.0;
  double p = static_cast<double>(a.matches) / candidate.size();
  double r = static_cast<double>(a.matches) / reference.size();
  double f = (p * r) / (0.9 * p + 0.1 * r);
  double penalty = 0.5 * std::pow(static_cast<double>(a.chunks) / a.matches, 3.0);
  return f * (1.0 - penalty);
}

double meteor(const std::string& candidate_text, const std::string& reference_text) {
  return meteor(tokenize(candidate_text), tokenize(reference_text));
}

double meteor_corpus(const std::vector<std::string>& candidate_texts,
                     const std::vector<std::string>& reference_texts) {
  if (candidate_texts.empty()) throw ContractError("meteor: empty corpus");
  if (candidate_texts.size() != reference_texts.size())
    throw ContractError("meteor: candidate/reference count mismatch");
  double sum = 0.0;
  for (size_t i = 0; i < candidate_texts.size(); ++i)
    sum += meteor(candidate_texts[i], reference_texts[i]);
  return sum / static_cast<double>(candidate_texts.size());
}

// ---------------------------------------------------------------------------
// Object accuracy
// ---------------------------------------------------------------------------

double object_accuracy(const std::vector<std::string>& predicted_action_texts,
                       const std::vector<std::vector<std::string>>& latent_objects) {
  if (predicted_action_texts.size() != latent_objects.size())
    throw ContractError("object_accuracy: prediction/latent count mismatch");
  long total = 0, correct = 0;
  for (size_t i = 0; i < latent_objects.size(); ++i) {
    const auto& truth = latent_objects[i];
    total += static_cast<long>(truth.size());
    ActionSequence parsed;
    try {
      parsed = parse_action_sequence(predicted_action_texts[i]);
    } catch (const ParseError&) {
      continue;  // malformed prediction: all its steps count as wrong
    }
    size_t n = std::min(parsed.steps.size(), truth.size());
    for (size_t s = 0; s < n; ++s)
      if (parsed.steps[s].object == truth[s]) ++correct;
  }
  if (total == 0) throw ContractError("object_accuracy: no latent steps");
  return static_cast<double>(correct) / static_cast<double>(total);
}

// ---------------------------------------------------------------------------
// Reports and cross-validation
// ---------------------------------------------------------------------------

nlohmann::json MetricReport::to_json() const {
  nlohmann::json j;
  j["task"] = task;
  j["bleu2"] = bleu2;
  j["meteor"] = meteor;
  if (object_accuracy) j["object_accuracy"] = *object_accuracy;
  j["n_items"] = n_items;
  j["config"] = config_desc;
  return j;
}

MetricReport score_items(const std::vector<EvalItem>& items, const std::string& task) {
  if (items.empty()) throw ContractError("score_items: empty item list");
  std::vector<std::string> cands, refs;
  cands.reserve(items.size());
  refs.reserve(items.size());
  bool has_latent = true;
  std::vector<std::string> preds;
  std::vector<std::vector<std::string>> latents;
  for (const EvalItem& it : items) {
    cands.push_back(it.prediction);
    refs.push_back(it.reference);
    preds.push_back(it.prediction);
    latents.push_back(it.latent_objects);
    if (it.latent_objects.empty()) has_latent = false;
  }
  MetricReport r;
  r.task = task;
  r.bleu2 = bleu2(cands, refs);
  r.meteor = meteor_corpus(cands, refs);
  r.n_items = static_cast<int>(items.size());
  if (task == "action_sequence" && has_latent) r.object_accuracy = object_accuracy(preds, latents);
  return r;
}

int crossval_half(const std::string& video_id) { return static_cast<int>(fnv1a64(video_id) & 1); }

CrossValReport cross_validate(const std::vector<std::vector<EvalItem>>& per_epoch,
                              const std::string& task) {
  if (per_epoch.size() < 2) throw ContractError("cross_validate: need at least 2 epochs");

  auto half_items = [](const std::vector<EvalItem>& items, int half) {
    std::vector<EvalItem> out;
    for (const EvalItem& it : items)
      if (crossval_half(it.video_id) == half) out.push_back(it);
    return out;
  };

  CrossValReport report;
  MetricReport measured[2];
  for (int fold = 0; fold < 2; ++fold) {
    int select_half = fold;
    int measure_half = 1 - fold;
    int best_epoch = -1;
    double best_bleu = -1.0;
    for (size_t e = 0; e < per_epoch.size(); ++e) {
      auto sel = half_items(per_epoch[e], select_half);
      if (sel.empty()) throw ContractError("cross_validate: selection half is empty");
      double b = score_items(sel, task).bleu2;
      if (b > best_bleu) {
        best_bleu = b;
        best_epoch = static_cast<int>(e);
      }
    }
    auto meas = half_items(per_epoch[static_cast<size_t>(best_epoch)], measure_half);
    if (meas.empty()) throw ContractError("cross_validate: measurement half is empty");
    measured[fold] = score_items(meas, task);
    if (fold == 0)
      report.best_epoch_fold0 = best_epoch;
    else
      report.best_epoch_fold1 = best_epoch;
  }

  MetricReport avg;
  avg.task = task;
  avg.bleu2 = 0.5 * (measured[0].bleu2 + measured[1].bleu2);
  avg.meteor = 0.5 * (measured[0].meteor + measured[1].meteor);
  if (measured[0].object_accuracy && measured[1].object_accuracy)
    avg.object_accuracy = 0.5 * (*measured[0].object_accuracy + *measured[1].object_accuracy);
  avg.n_items = measured[0].n_items + measured[1].n_items;
  report.averaged = avg;
  return report;
}

}  // namespace qp
