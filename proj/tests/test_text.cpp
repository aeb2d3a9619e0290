#include <fstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "qp/error.hpp"
#include "qp/grammar.hpp"
#include "qp/rng.hpp"
#include "qp/vocab.hpp"
#include "testutil.hpp"

using namespace qp;

TEST_CASE("parses the two-step pick/place example") {
  ActionSequence seq = parse_action_sequence("pick fish, place fish on towel");
  REQUIRE(seq.steps.size() == 2);
  CHECK(seq.steps[0] == ActionStep{"pick", "fish", {}, {}});
  CHECK(seq.steps[1] == ActionStep{"place", "fish", "on", "towel"});
}

TEST_CASE("parses a minimal step and a three-step sequence") {
  ActionSequence one = parse_action_sequence("stir soup");
  REQUIRE(one.steps.size() == 1);
  CHECK(one.steps[0] == ActionStep{"stir", "soup", {}, {}});

  ActionSequence three =
      parse_action_sequence("pick knife from counter, cut cabbage with knife, place knife on counter");
  REQUIRE(three.steps.size() == 3);
  CHECK(*three.steps[0].prep == "from");
  CHECK(*three.steps[1].prep == "with");
  CHECK(*three.steps[2].prep == "on");
  CHECK(three.steps[1].object == "cabbage");
  CHECK(*three.steps[1].place == "knife");
}

TEST_CASE("multi-word objects and places resolve around the rightmost preposition") {
  ActionSequence seq = parse_action_sequence("pick spring roll from frying pan");
  REQUIRE(seq.steps.size() == 1);
  CHECK(seq.steps[0].object == "spring roll");
  CHECK(*seq.steps[0].place == "frying pan");

  // a preposition inside the object stays there; the rightmost one splits
  ActionSequence nested = parse_action_sequence("place fish on paper towel on counter");
  CHECK(nested.steps[0].object == "fish on paper towel");
  CHECK(*nested.steps[0].place == "counter");
}

TEST_CASE("parse errors carry the step index") {
  CHECK_THROWS_WITH_AS(parse_action_sequence("pick fish, , stir soup"), doctest::Contains("step 1"),
                       ParseError);
  CHECK_THROWS_WITH_AS(parse_action_sequence("pick"), doctest::Contains("step 0"), ParseError);
  CHECK_THROWS_AS(parse_action_sequence("pick fish,"), ParseError);
}

TEST_CASE("render is the inverse of parse on canonical text") {
  ActionStep bare{"pick", "fish", {}, {}};
  CHECK(render_action_sequence({{bare}}) == "pick fish");

  for (const char* text : {
           "pick fish, place fish on towel",
           "stir soup",
           "pick knife from counter, cut cabbage with knife, place knife on counter",
           "pour olive oil into large pan",
       }) {
    CHECK(render_action_sequence(parse_action_sequence(text)) == normalize(text));
  }
}

TEST_CASE("property: parse after render is identity over random canonical sequences") {
  Rng rng(77);
  std::vector<std::string> verbs(canonical_verbs().begin(), canonical_verbs().end());
  std::vector<std::string> nouns{"fish",  "cabbage", "tomato", "spring roll", "olive oil",
                                 "board", "counter", "pan",    "paper towel", "bowl"};
  std::vector<std::string> preps{"on", "in", "from", "with", "into"};
  for (int rep = 0; rep < 200; ++rep) {
    ActionSequence seq;
    int n = rng.uniform_int(1, 4);
    for (int s = 0; s < n; ++s) {
      ActionStep step;
      step.verb = verbs[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(verbs.size()) - 1))];
      step.object = nouns[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(nouns.size()) - 1))];
      if (rng.bernoulli(0.6)) {
        step.prep = preps[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(preps.size()) - 1))];
        step.place = nouns[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(nouns.size()) - 1))];
      }
      seq.steps.push_back(step);
    }
    ActionSequence back = parse_action_sequence(render_action_sequence(seq));
    CHECK(back == seq);
  }
}

TEST_CASE("validation flags out-of-set verbs and orphan prepositions") {
  CHECK(validate_step({"pick", "fish", {}, {}}).empty());
  auto grill = validate_step({"grill", "tomato", {}, {}});
  REQUIRE(grill.size() == 1);
  CHECK(grill[0].find("grill") != std::string::npos);

  ActionStep orphan{"pick", "fish", "on", {}};
  auto v = validate_step(orphan);
  REQUIRE(v.size() == 1);
  CHECK(v[0].find("co-occur") != std::string::npos);
}

TEST_CASE("tokenizer folds case, splits punctuation and round-trips") {
  CHECK(tokenize("").empty());
  CHECK(normalize("") == "");
  CHECK(tokenize("Pick FISH") == std::vector<std::string>{"pick", "fish"});
  CHECK(tokenize("pick fish, place fish") ==
        std::vector<std::string>{"pick", "fish", ",", "place", "fish"});
  CHECK(normalize("  Pick   fish,place FISH  ") == "pick fish, place fish");
}

TEST_CASE("vocabulary maps reserved ids, unknown words and round-trips") {
  Vocabulary v = Vocabulary::build({"pick fish", "place fish on towel"});
  CHECK(v.id("<pad>") == Vocabulary::kPad);
  CHECK(v.id("<bos>") == Vocabulary::kBos);
  CHECK(v.id("<eos>") == Vocabulary::kEos);
  CHECK(v.id("<unk>") == Vocabulary::kUnk);
  CHECK(v.id("<sep>") == Vocabulary::kSep);
  CHECK(v.id("<action>") == Vocabulary::kActionTag);
  CHECK(v.id("<desc>") == Vocabulary::kDescTag);

  CHECK(v.encode("").empty());
  CHECK(v.decode({}) == "");
  CHECK(v.encode("Pick FISH") == v.encode("pick fish"));

  // OOV maps to <unk> and survives the round trip as the literal token
  std::vector<int> ids = v.encode("pick zebra");
  CHECK(ids[1] == Vocabulary::kUnk);
  CHECK(v.decode(ids) == "pick <unk>");

  CHECK(v.decode(v.encode("place fish on towel")) == "place fish on towel");
}

TEST_CASE("vocabulary save/load/save is byte-identical") {
  qptest::TempDir dir("vocab");
  Vocabulary v = Vocabulary::build({"pick fish from pan", "stir soup , wipe counter"});
  std::string p1 = dir.str() + "/vocab1.txt";
  std::string p2 = dir.str() + "/vocab2.txt";
  v.save(p1);
  Vocabulary loaded = Vocabulary::load(p1);
  CHECK(loaded.size() == v.size());
  for (int i = 0; i < v.size(); ++i) CHECK(loaded.token(i) == v.token(i));
  loaded.save(p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);
  CHECK(!c1.empty());
}

TEST_CASE("vocabulary build order does not depend on input order") {
  Vocabulary a = Vocabulary::build({"pick fish", "stir soup"});
  Vocabulary b = Vocabulary::build({"stir soup", "pick fish"});
  REQUIRE(a.size() == b.size());
  for (int i = 0; i < a.size(); ++i) CHECK(a.token(i) == b.token(i));
}
