#include "qp/corpus.hpp"

#include <fstream>

#include "qp/error.hpp"

namespace qp {

using nlohmann::json;

int Corpus::total_clips() const {
  int n = 0;
  for (const auto& v : videos) n += static_cast<int>(v.clips.size());
  return n;
}

const ClipRecord& Corpus::clip(int video_idx, int clip_idx) const {
  return videos.at(static_cast<size_t>(video_idx)).clips.at(static_cast<size_t>(clip_idx));
}

namespace {

std::string where(const std::string& vid, int clip) {
  return " (video '" + vid + "', clip " + std::to_string(clip) + ")";
}

LatentStep latent_step_from_json(const json& j, const std::string& vid, int clip) {
  LatentStep s;
  if (!j.contains("verb") || !j.contains("object"))
    throw DataError("latent step missing verb/object" + where(vid, clip));
  s.verb = j.at("verb").get<std::string>();
  s.object = j.at("object").get<std::string>();
  if (j.contains("prep") && !j.at("prep").is_null()) s.prep = j.at("prep").get<std::string>();
  if (j.contains("place") && !j.at("place").is_null()) s.place = j.at("place").get<std::string>();
  s.verb_id = j.value("verb_id", -1);
  s.object_id = j.value("object_id", -1);
  s.place_id = j.value("place_id", -1);
  if (s.prep.has_value() != s.place.has_value())
    throw DataError("latent step preposition/place must co-occur" + where(vid, clip));
  return s;
}

json latent_step_to_json(const LatentStep& s) {
  json j;
  j["verb"] = s.verb;
  j["object"] = s.object;
  j["prep"] = s.prep ? json(*s.prep) : json(nullptr);
  j["place"] = s.place ? json(*s.place) : json(nullptr);
  j["verb_id"] = s.verb_id;
  j["object_id"] = s.object_id;
  j["place_id"] = s.place_id;
  return j;
}

}  // namespace

Corpus corpus_from_json(const json& j, const std::string& origin) {
  if (!j.is_object()) throw DataError("corpus " + origin + ": root must be an object");
  int version = j.value("format_version", -1);
  if (version != 1) throw DataError("corpus " + origin + ": unsupported format_version");

  Corpus corpus;
  if (j.contains("world")) corpus.world = j.at("world");
  if (j.contains("inventories")) {
    const json& inv = j.at("inventories");
    corpus.inventories.objects = inv.value("objects", std::vector<std::string>{});
    corpus.inventories.places = inv.value("places", std::vector<std::string>{});
    corpus.inventories.verbs = inv.value("verbs", std::vector<std::string>{});
    corpus.inventories.prepositions = inv.value("prepositions", std::vector<std::string>{});
  }
  if (!j.contains("videos")) throw DataError("corpus " + origin + ": missing 'videos'");

  for (const json& vj : j.at("videos")) {
    VideoDocument doc;
    if (!vj.contains("video_id")) throw DataError("corpus " + origin + ": video without video_id");
    doc.video_id = vj.at("video_id").get<std::string>();
    if (!vj.contains("clips") || vj.at("clips").empty())
      throw DataError("video must contain at least one clip (video '" + doc.video_id + "')");
    int expected_index = 0;
    for (const json& cj : vj.at("clips")) {
      ClipRecord clip;
      clip.video_id = doc.video_id;
      clip.clip_index = cj.value("clip_index", -1);
      if (clip.clip_index != expected_index)
        throw DataError("clip indices must be contiguous from 0" + where(doc.video_id, expected_index));
      ++expected_index;
      if (!cj.contains("start_s") || !cj.contains("end_s"))
        throw DataError("clip missing timestamps" + where(doc.video_id, clip.clip_index));
      clip.start_s = cj.at("start_s").get<double>();
      clip.end_s = cj.at("end_s").get<double>();
      if (!(clip.start_s < clip.end_s))
        throw DataError("clip end_s must exceed start_s" + where(doc.video_id, clip.clip_index));
      clip.description = cj.value("description", std::string{});
      clip.action_sequence = cj.value("action_sequence", std::string{});
      if (clip.description.empty())
        throw DataError("clip description must be non-empty" + where(doc.video_id, clip.clip_index));
      if (clip.action_sequence.empty())
        throw DataError("clip action_sequence must be non-empty" + where(doc.video_id, clip.clip_index));
      if (cj.contains("subtitle") && !cj.at("subtitle").is_null())
        clip.subtitle = cj.at("subtitle").get<std::string>();
      if (cj.contains("external_description") && !cj.at("external_description").is_null())
        clip.external_description = cj.at("external_description").get<std::string>();
      if (cj.contains("latent") && !cj.at("latent").is_null()) {
        const json& lj = cj.at("latent");
        ClipLatent latent;
        latent.coreferent = lj.value("coreferent", false);
        latent.main_object = lj.value("main_object", std::string{});
        if (!lj.contains("steps") || lj.at("steps").empty())
          throw DataError("latent must contain steps" + where(doc.video_id, clip.clip_index));
        for (const json& sj : lj.at("steps"))
          latent.steps.push_back(latent_step_from_json(sj, doc.video_id, clip.clip_index));
        clip.latent = std::move(latent);
      }
      doc.clips.push_back(std::move(clip));
    }
    corpus.videos.push_back(std::move(doc));
  }
  return corpus;
}

Corpus load_corpus(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("corpus: cannot open " + path);
  json j;
  try {
    f >> j;
  } catch (const json::exception& e) {
    throw DataError("corpus " + path + ": malformed JSON: " + e.what());
  }
  return corpus_from_json(j, path);
}

json corpus_to_json(const Corpus& corpus) {
  json j;
  j["format_version"] = 1;
  if (!corpus.world.is_null() && !corpus.world.empty()) j["world"] = corpus.world;
  j["inventories"] = {{"objects", corpus.inventories.objects},
                      {"places", corpus.inventories.places},
                      {"verbs", corpus.inventories.verbs},
                      {"prepositions", corpus.inventories.prepositions}};
  j["videos"] = json::array();
  for (const VideoDocument& doc : corpus.videos) {
    json vj;
    vj["video_id"] = doc.video_id;
    vj["clips"] = json::array();
    for (const ClipRecord& clip : doc.clips) {
      json cj;
      cj["clip_index"] = clip.clip_index;
      cj["start_s"] = clip.start_s;
      cj["end_s"] = clip.end_s;
      cj["description"] = clip.description;
      cj["action_sequence"] = clip.action_sequence;
      cj["subtitle"] = clip.subtitle ? json(*clip.subtitle) : json(nullptr);
      cj["external_description"] =
          clip.external_description ? json(*clip.external_description) : json(nullptr);
      if (clip.latent) {
        json lj;
        lj["coreferent"] = clip.latent->coreferent;
        lj["main_object"] = clip.latent->main_object;
        lj["steps"] = json::array();
        for (const LatentStep& s : clip.latent->steps) lj["steps"].push_back(latent_step_to_json(s));
        cj["latent"] = std::move(lj);
      }
      vj["clips"].push_back(std::move(cj));
    }
    j["videos"].push_back(std::move(vj));
  }
  return j;
}

void save_corpus(const Corpus& corpus, const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("corpus: cannot write " + path);
  f << corpus_to_json(corpus).dump(1) << "\n";
}

std::vector<std::string> corpus_texts(const Corpus& corpus) {
  std::vector<std::string> texts;
  for (const VideoDocument& doc : corpus.videos) {
    for (const ClipRecord& clip : doc.clips) {
      texts.push_back(clip.description);
      texts.push_back(clip.action_sequence);
      if (clip.subtitle) texts.push_back(*clip.subtitle);
      if (clip.external_description) texts.push_back(*clip.external_description);
    }
  }
  return texts;
}

}  // namespace qp
