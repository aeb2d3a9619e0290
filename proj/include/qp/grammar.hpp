#pragma once

#include <optional>
#include <set>
#include <string>
#include <vector>

namespace qp {

// One micro step for a single-arm robot: verb + target object, with an
// optional preposition/place pair (both present or both absent).
struct ActionStep {
  std::string verb;
  std::string object;
  std::optional<std::string> prep;
  std::optional<std::string> place;

  bool operator==(const ActionStep&) const = default;
};

struct ActionSequence {
  std::vector<ActionStep> steps;

  bool operator==(const ActionSequence&) const = default;
};

// The canonical single-arm action set. Steps may carry other verbs, but
// validation flags them.
const std::set<std::string>& canonical_verbs();

// Preposition inventory used as split points when parsing. Defaults cover
// the generator's surface forms; corpora may extend the set.
struct GrammarContext {
  std::set<std::string> prepositions;

  static GrammarContext standard();
};

// Parses "verb object [prep place], verb object, ..." text. Object and
// place may span several words; the split point is the rightmost known
// preposition that leaves at least one object word before it and one place
// word after it.
ActionSequence parse_action_sequence(const std::string& text);
ActionSequence parse_action_sequence(const std::string& text, const GrammarContext& ctx);

// Exact inverse of parse on canonical text.
std::string render_action_sequence(const ActionSequence& seq);

// Returns human-readable violations; an empty list means the step is clean.
std::vector<std::string> validate_step(const ActionStep& step);

}  // namespace qp
