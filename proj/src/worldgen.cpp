#include "qp/worldgen.hpp"

#include <algorithm>
#include <array>

#include "qp/error.hpp"
#include "qp/grammar.hpp"
#include "qp/rng.hpp"

namespace qp {

using nlohmann::json;

namespace {

const std::vector<std::string> kObjectPool{
    "cabbage", "fish",     "tomato", "onion",  "carrot", "potato", "garlic", "pepper",
    "mushroom", "chicken", "cheese", "butter", "rice",   "noodles", "egg",   "bread"};

const std::vector<std::string> kPlacePool{"counter", "board", "bowl", "pan",  "plate", "pot",
                                          "sink",    "towel", "spoon", "knife", "oven", "jar"};

// canonical order matters: ids index into the feature codebooks
const std::vector<std::string> kVerbPool{"pick", "place", "pour", "stir",   "cut",    "wipe",
                                         "scoop", "squeeze", "open", "close", "turnon", "turnoff"};

// preposition attached to each verb ("" = bare verb-object step)
const std::vector<std::string> kVerbPrep{"from", "on", "into", "in", "with", "with",
                                         "from", "into", "", "", "", ""};

const std::vector<std::string> kOpeners{"please", "now", "next", "then", "carefully"};

// filler vocabulary for valid subtitles (chatty narration around the facts)
struct SubtitleShape {
  const char* before;  // before the object mention
  const char* mid;     // between object and place
  const char* after;
};
const std::array<SubtitleShape, 4> kSubtitleShapes{{
    {"ok so now i grab", "and set it by the", "alright"},
    {"here we have", "right next to the", "looking good"},
    {"lets work with", "over at the", "friends"},
    {"so i am taking", "straight to the", "as you can see"},
}};

// word salad for invalid subtitles; shares no token with any description,
// action text or valid subtitle template
const std::vector<std::string> kSaladPool{"weather",  "mountain", "taxes",   "forever", "blue",
                                          "sky",      "ninety",   "channel", "subscribe", "music",
                                          "playing",  "guitar",   "random",  "chatter", "static",
                                          "buzzing",  "tune",     "melody"};

const std::vector<std::string> kExternalPrefixes{"the video shows someone", "in this clip someone",
                                                 "we can see a person"};

std::string pick(const std::vector<std::string>& pool, Rng& rng) {
  return pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
}

struct VerbDraw {
  int verb_id;
  std::string verb;
  std::string prep;  // empty = none
};

VerbDraw draw_verb(const WorldConfig& cfg, Rng& rng) {
  int id = rng.uniform_int(0, cfg.num_verbs - 1);
  return {id, kVerbPool[static_cast<size_t>(id)], kVerbPrep[static_cast<size_t>(id)]};
}

std::string describe(const std::vector<LatentStep>& steps, Rng& rng) {
  std::string text = pick(kOpeners, rng);
  for (size_t i = 0; i < steps.size(); ++i) {
    const LatentStep& s = steps[i];
    if (i > 0) text += " and then";
    text += " " + s.verb + " the " + s.object;
    if (s.prep) text += " " + *s.prep + " the " + *s.place;
  }
  return text;
}

std::string make_subtitle(const WorldConfig& cfg, const ClipLatent& latent, Rng& rng, bool* valid_out) {
  if (rng.bernoulli(cfg.invalid_subtitle_rate)) {
    *valid_out = false;
    int n = rng.uniform_int(6, 10);
    std::string salad;
    for (int i = 0; i < n; ++i) {
      if (i) salad += ' ';
      salad += pick(kSaladPool, rng);
    }
    return salad;
  }
  *valid_out = true;
  const SubtitleShape& shape = kSubtitleShapes[static_cast<size_t>(rng.uniform_int(0, 3))];
  // coreferent clips pronominalize the object; the name only appears in
  // neighbouring clips
  std::string mention = latent.coreferent ? "it" : ("the " + latent.main_object);
  std::string place = latent.steps[0].place ? *latent.steps[0].place
                                            : kPlacePool[static_cast<size_t>(rng.uniform_int(0, cfg.num_places - 1))];
  return std::string(shape.before) + " " + mention + " " + shape.mid + " " + place + " " + shape.after;
}

std::string make_external_description(const WorldConfig& cfg, const ClipLatent& latent, Rng& rng) {
  // noisy paraphrase from an always-seeing observer: names the object even
  // on coreferent clips, but only at the configured fidelity
  std::string object = latent.main_object;
  if (!rng.bernoulli(cfg.external_fidelity)) {
    std::string wrong = object;
    while (wrong == object) wrong = kObjectPool[static_cast<size_t>(rng.uniform_int(0, cfg.num_objects - 1))];
    object = wrong;
  }
  const LatentStep& s = latent.steps[0];
  std::string text = pick(kExternalPrefixes, rng) + " " + s.verb + " the " + object;
  if (s.prep) text += " " + *s.prep + " the " + *s.place;
  if (rng.bernoulli(0.5)) text += " in a small kitchen";
  return text;
}

}  // namespace

json WorldConfig::to_json() const {
  json j;
  j["num_objects"] = num_objects;
  j["num_places"] = num_places;
  j["num_verbs"] = num_verbs;
  j["train_videos"] = train_videos;
  j["val_videos"] = val_videos;
  j["clips_per_video_min"] = clips_per_video_min;
  j["clips_per_video_max"] = clips_per_video_max;
  j["max_steps_per_clip"] = max_steps_per_clip;
  j["coreference_rate"] = coreference_rate;
  j["subtitle_rate"] = subtitle_rate;
  j["invalid_subtitle_rate"] = invalid_subtitle_rate;
  j["feature_noise"] = feature_noise;
  j["external_fidelity"] = external_fidelity;
  j["video_dim"] = video_dim;
  j["audio_dim"] = audio_dim;
  j["text_dim"] = text_dim;
  j["video_len_max"] = video_len_max;
  j["audio_len_max"] = audio_len_max;
  j["seed"] = seed;
  return j;
}

WorldConfig WorldConfig::from_json(const json& j) {
  WorldConfig c;
  c.num_objects = j.value("num_objects", c.num_objects);
  c.num_places = j.value("num_places", c.num_places);
  c.num_verbs = j.value("num_verbs", c.num_verbs);
  c.train_videos = j.value("train_videos", c.train_videos);
  c.val_videos = j.value("val_videos", c.val_videos);
  c.clips_per_video_min = j.value("clips_per_video_min", c.clips_per_video_min);
  c.clips_per_video_max = j.value("clips_per_video_max", c.clips_per_video_max);
  c.max_steps_per_clip = j.value("max_steps_per_clip", c.max_steps_per_clip);
  c.coreference_rate = j.value("coreference_rate", c.coreference_rate);
  c.subtitle_rate = j.value("subtitle_rate", c.subtitle_rate);
  c.invalid_subtitle_rate = j.value("invalid_subtitle_rate", c.invalid_subtitle_rate);
  c.feature_noise = j.value("feature_noise", c.feature_noise);
  c.external_fidelity = j.value("external_fidelity", c.external_fidelity);
  c.video_dim = j.value("video_dim", c.video_dim);
  c.audio_dim = j.value("audio_dim", c.audio_dim);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.video_len_max = j.value("video_len_max", c.video_len_max);
  c.audio_len_max = j.value("audio_len_max", c.audio_len_max);
  c.seed = j.value("seed", c.seed);
  return c;
}

std::vector<std::string> WorldConfig::validate() const {
  std::vector<std::string> errs;
  auto need = [&](bool ok, const std::string& msg) {
    if (!ok) errs.push_back(msg);
  };
  need(num_objects >= 1 && num_objects <= static_cast<int>(kObjectPool.size()),
       "num_objects must be in [1, " + std::to_string(kObjectPool.size()) + "]");
  need(num_places >= 1 && num_places <= static_cast<int>(kPlacePool.size()),
       "num_places must be in [1, " + std::to_string(kPlacePool.size()) + "]");
  need(num_verbs >= 1 && num_verbs <= static_cast<int>(kVerbPool.size()),
       "num_verbs must be in [1, " + std::to_string(kVerbPool.size()) + "]");
  need(train_videos >= 1, "train_videos must be >= 1");
  need(val_videos >= 1, "val_videos must be >= 1");
  need(clips_per_video_min >= 1, "clips_per_video_min must be >= 1");
  need(clips_per_video_max >= clips_per_video_min, "clips_per_video_max must be >= min");
  need(max_steps_per_clip >= 1, "max_steps_per_clip must be >= 1");
  for (auto [rate, name] : {std::pair{coreference_rate, "coreference_rate"},
                            std::pair{subtitle_rate, "subtitle_rate"},
                            std::pair{invalid_subtitle_rate, "invalid_subtitle_rate"},
                            std::pair{external_fidelity, "external_fidelity"}})
    need(rate >= 0.0 && rate <= 1.0, std::string(name) + " must be in [0, 1]");
  need(feature_noise >= 0.0, "feature_noise must be >= 0");
  need(video_dim >= 2 && audio_dim >= 2 && text_dim >= 2, "feature dims must be >= 2");
  need(video_len_max >= 4, "video_len_max must be >= 4");
  need(audio_len_max >= 3, "audio_len_max must be >= 3");
  if (clips_per_video_max == 1 && coreference_rate > 0.0)
    errs.push_back("coreference_rate > 0 is infeasible with single-clip videos");
  return errs;
}

namespace {

Corpus generate_split(const WorldConfig& cfg, const std::string& split, int n_videos, uint64_t seed) {
  Corpus corpus;
  corpus.world = cfg.to_json();
  corpus.inventories.objects.assign(kObjectPool.begin(), kObjectPool.begin() + cfg.num_objects);
  corpus.inventories.places.assign(kPlacePool.begin(), kPlacePool.begin() + cfg.num_places);
  corpus.inventories.verbs.assign(kVerbPool.begin(), kVerbPool.begin() + cfg.num_verbs);
  corpus.inventories.prepositions = {"on", "in", "into", "from", "with", "to"};

  Rng rng(derive_seed(seed, "split:" + split, 0));
  for (int v = 0; v < n_videos; ++v) {
    VideoDocument doc;
    char buf[16];
    std::snprintf(buf, sizeof(buf), "%s%04d", split.c_str(), v);
    doc.video_id = buf;

    int n_clips = rng.uniform_int(cfg.clips_per_video_min, cfg.clips_per_video_max);
    int main_object_id = rng.uniform_int(0, cfg.num_objects - 1);
    const std::string& main_object = corpus.inventories.objects[static_cast<size_t>(main_object_id)];

    // coreference flags; redraw if every clip hides the object so that it
    // stays observable somewhere in the video
    std::vector<bool> coref(static_cast<size_t>(n_clips));
    if (n_clips == 1) {
      coref[0] = false;
    } else {
      bool all;
      do {
        all = true;
        for (int c = 0; c < n_clips; ++c) {
          coref[static_cast<size_t>(c)] = rng.bernoulli(cfg.coreference_rate);
          all = all && coref[static_cast<size_t>(c)];
        }
      } while (all);
    }

    double clock_s = 0.0;
    for (int c = 0; c < n_clips; ++c) {
      ClipRecord clip;
      clip.video_id = doc.video_id;
      clip.clip_index = c;
      clip.start_s = clock_s;
      clock_s += rng.uniform(8.0, 25.0);
      clip.end_s = clock_s;
      clock_s += rng.uniform(0.0, 3.0);

      ClipLatent latent;
      latent.coreferent = coref[static_cast<size_t>(c)];
      latent.main_object = main_object;
      int n_steps = rng.uniform_int(1, cfg.max_steps_per_clip);
      ActionSequence seq;
      for (int s = 0; s < n_steps; ++s) {
        VerbDraw vd = draw_verb(cfg, rng);
        LatentStep step;
        step.verb = vd.verb;
        step.verb_id = vd.verb_id;
        step.object = main_object;
        step.object_id = main_object_id;
        if (!vd.prep.empty()) {
          int place_id = rng.uniform_int(0, cfg.num_places - 1);
          step.prep = vd.prep;
          step.place = corpus.inventories.places[static_cast<size_t>(place_id)];
          step.place_id = place_id;
        }
        latent.steps.push_back(step);
        seq.steps.push_back(ActionStep{step.verb, step.object, step.prep, step.place});
      }
      clip.action_sequence = render_action_sequence(seq);
      clip.description = describe(latent.steps, rng);
      if (rng.bernoulli(cfg.subtitle_rate)) {
        bool valid = false;
        clip.subtitle = make_subtitle(cfg, latent, rng, &valid);
      }
      clip.external_description = make_external_description(cfg, latent, rng);
      clip.latent = std::move(latent);
      doc.clips.push_back(std::move(clip));
    }
    corpus.videos.push_back(std::move(doc));
  }
  return corpus;
}

}  // namespace

GeneratedCorpora generate_corpus(const WorldConfig& cfg) {
  std::vector<std::string> errs = cfg.validate();
  if (!errs.empty()) {
    std::string msg = "world config invalid:";
    for (const auto& e : errs) msg += "\n  - " + e;
    throw ConfigError(msg);
  }
  GeneratedCorpora out;
  out.train = generate_split(cfg, "train", cfg.train_videos, cfg.seed);
  out.val = generate_split(cfg, "val", cfg.val_videos, cfg.seed);
  return out;
}

}  // namespace qp
