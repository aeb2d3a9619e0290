#include "qp/grammar.hpp"

#include <sstream>

#include "qp/error.hpp"
#include "qp/vocab.hpp"

namespace qp {

const std::set<std::string>& canonical_verbs() {
  static const std::set<std::string> verbs{"open", "close",  "pick",    "place", "pour", "stir",
                                           "turnon", "turnoff", "wipe", "cut",  "scoop", "squeeze"};
  return verbs;
}

GrammarContext GrammarContext::standard() {
  return GrammarContext{{"on", "in", "into", "from", "with", "to", "onto", "under"}};
}

namespace {

ActionStep parse_step(const std::vector<std::string>& words, size_t step_index,
                      const GrammarContext& ctx) {
  if (words.size() < 2)
    throw ParseError("action step " + std::to_string(step_index) + ": expected at least 'verb object', got " +
                     std::to_string(words.size()) + " token(s)");
  ActionStep step;
  step.verb = words[0];
  // rightmost preposition that leaves >=1 object word and >=1 place word
  size_t split = 0;
  for (size_t i = words.size() - 2; i >= 2; --i) {
    if (ctx.prepositions.count(words[i])) {
      split = i;
      break;
    }
  }
  auto join = [&](size_t from, size_t to) {
    std::string out;
    for (size_t i = from; i < to; ++i) {
      if (!out.empty()) out += ' ';
      out += words[i];
    }
    return out;
  };
  if (split > 0) {
    step.object = join(1, split);
    step.prep = words[split];
    step.place = join(split + 1, words.size());
  } else {
    step.object = join(1, words.size());
  }
  return step;
}

}  // namespace

ActionSequence parse_action_sequence(const std::string& text) {
  return parse_action_sequence(text, GrammarContext::standard());
}

ActionSequence parse_action_sequence(const std::string& text, const GrammarContext& ctx) {
  ActionSequence seq;
  std::vector<std::string> current;
  size_t step_index = 0;
  auto flush = [&]() {
    if (current.empty())
      throw ParseError("action step " + std::to_string(step_index) + ": empty step between commas");
    seq.steps.push_back(parse_step(current, step_index, ctx));
    current.clear();
    ++step_index;
  };
  for (const std::string& tok : tokenize(text)) {
    if (tok == ",")
      flush();
    else
      current.push_back(tok);
  }
  flush();
  return seq;
}

std::string render_action_sequence(const ActionSequence& seq) {
  std::ostringstream os;
  for (size_t i = 0; i < seq.steps.size(); ++i) {
    const ActionStep& s = seq.steps[i];
    if (i) os << ", ";
    os << s.verb << ' ' << s.object;
    if (s.prep) os << ' ' << *s.prep << ' ' << s.place.value_or("");
  }
  return os.str();
}

std::vector<std::string> validate_step(const ActionStep& step) {
  std::vector<std::string> violations;
  if (step.verb.empty()) violations.push_back("empty verb");
  if (step.object.empty()) violations.push_back("empty object");
  if (!step.verb.empty() && !canonical_verbs().count(step.verb))
    violations.push_back("verb '" + step.verb + "' outside the canonical 12-action set");
  if (step.prep.has_value() != step.place.has_value())
    violations.push_back("preposition and place must co-occur");
  if (step.prep && step.prep->empty()) violations.push_back("empty preposition");
  if (step.place && step.place->empty()) violations.push_back("empty place");
  return violations;
}

}  // namespace qp
