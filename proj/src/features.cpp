#include "qp/features.hpp"

#include "qp/checkpoint.hpp"
#include "qp/error.hpp"
#include "qp/rng.hpp"
#include "qp/vocab.hpp"

namespace qp {

std::string FeatureMask::to_string() const {
  std::string out;
  if (video) out += "video,";
  if (audio) out += "audio,";
  if (text) out += "text,";
  if (!out.empty()) out.pop_back();
  return out;
}

FeatureMask FeatureMask::parse(const std::string& s) {
  FeatureMask m{false, false, false};
  std::string cur;
  auto apply = [&](const std::string& name) {
    if (name.empty()) return;
    if (name == "video")
      m.video = true;
    else if (name == "audio")
      m.audio = true;
    else if (name == "text" || name == "subtitle")
      m.text = true;
    else
      throw ConfigError("unknown feature stream '" + name + "' (expected video|audio|text)");
  };
  for (char c : s) {
    if (c == ',') {
      apply(cur);
      cur.clear();
    } else if (!std::isspace(static_cast<unsigned char>(c))) {
      cur.push_back(c);
    }
  }
  apply(cur);
  if (!m.any()) throw ConfigError("feature mask disables every stream");
  return m;
}

namespace {

Tensor random_rows(int rows, int cols, Rng& rng) {
  Tensor t({rows, cols});
  for (double& v : t.data) v = rng.normal();
  return t;
}

}  // namespace

Codebooks build_codebooks(const Inventories& inv, const WorldConfig& cfg) {
  Codebooks cb;
  cb.video_dim = cfg.video_dim;
  cb.audio_dim = cfg.audio_dim;
  cb.text_dim = cfg.text_dim;
  cb.seed = cfg.seed;
  Rng rng(derive_seed(cfg.seed, "codebooks", 0));
  cb.objects = random_rows(static_cast<int>(inv.objects.size()), cfg.video_dim, rng);
  cb.places = random_rows(static_cast<int>(inv.places.size()), cfg.video_dim, rng);
  cb.verbs = random_rows(static_cast<int>(inv.verbs.size()), cfg.audio_dim, rng);
  cb.generic = random_rows(1, cfg.video_dim, rng);
  cb.unk_text = random_rows(1, cfg.text_dim, rng);
  return cb;
}

Tensor Codebooks::word_vector(const std::string& word) const {
  Rng rng(derive_seed(seed, "word:" + word, 0));
  return random_rows(1, text_dim, rng);
}

FeatureClip frozen_encode(const ClipRecord& clip, const Codebooks& cb, const WorldConfig& cfg) {
  if (!clip.latent)
    throw DataError("frozen_encode: clip without latent ground truth (video '" + clip.video_id +
                    "', clip " + std::to_string(clip.clip_index) + ")");
  const ClipLatent& latent = *clip.latent;
  Rng rng(derive_seed(cfg.seed, "clip:" + clip.video_id, static_cast<uint64_t>(clip.clip_index)));

  FeatureClip out;

  // video stream: object/place codebook rows per step, then background
  std::vector<Tensor> vrows;
  for (const LatentStep& s : latent.steps) {
    if (latent.coreferent) {
      vrows.push_back(cb.generic);
    } else {
      Tensor row({1, cb.video_dim});
      for (int c = 0; c < cb.video_dim; ++c) row.at(0, c) = cb.objects.at(s.object_id, c);
      vrows.push_back(row);
    }
    if (s.place_id >= 0) {
      Tensor row({1, cb.video_dim});
      for (int c = 0; c < cb.video_dim; ++c) row.at(0, c) = cb.places.at(s.place_id, c);
      vrows.push_back(row);
    }
  }
  int step_rows = static_cast<int>(vrows.size());
  int extra_v = rng.uniform_int(3, std::max(3, cfg.video_len_max - step_rows));
  for (int i = 0; i < extra_v; ++i) vrows.push_back(random_rows(1, cb.video_dim, rng));
  out.video = Tensor({step_rows + extra_v, cb.video_dim});
  for (int r = 0; r < out.video.rows(); ++r)
    for (int c = 0; c < cb.video_dim; ++c)
      out.video.at(r, c) = vrows[static_cast<size_t>(r)].at(0, c) + cfg.feature_noise * rng.normal();

  // audio stream: verb codebook rows per step, then background
  int n_steps = static_cast<int>(latent.steps.size());
  int extra_a = rng.uniform_int(2, std::max(2, cfg.audio_len_max - n_steps));
  out.audio = Tensor({n_steps + extra_a, cb.audio_dim});
  for (int s = 0; s < n_steps; ++s)
    for (int c = 0; c < cb.audio_dim; ++c)
      out.audio.at(s, c) = cb.verbs.at(latent.steps[static_cast<size_t>(s)].verb_id, c) +
                           cfg.feature_noise * rng.normal();
  for (int r = n_steps; r < out.audio.rows(); ++r)
    for (int c = 0; c < cb.audio_dim; ++c)
      out.audio.at(r, c) = rng.normal() + cfg.feature_noise * rng.normal();

  // text stream: one word vector per subtitle token, or a single unk row
  if (clip.subtitle) {
    std::vector<std::string> words = tokenize(*clip.subtitle);
    out.text = Tensor({static_cast<int>(words.size()), cb.text_dim});
    for (int r = 0; r < out.text.rows(); ++r) {
      Tensor wv = cb.word_vector(words[static_cast<size_t>(r)]);
      for (int c = 0; c < cb.text_dim; ++c)
        out.text.at(r, c) = wv.at(0, c) + cfg.feature_noise * rng.normal();
    }
  } else {
    out.text = cb.unk_text;
  }

  out.video_mask.assign(static_cast<size_t>(out.video.rows()), 1);
  out.audio_mask.assign(static_cast<size_t>(out.audio.rows()), 1);
  out.text_mask.assign(static_cast<size_t>(out.text.rows()), 1);
  return out;
}

std::vector<std::vector<FeatureClip>> encode_corpus(const Corpus& corpus, const Codebooks& cb,
                                                    const WorldConfig& cfg) {
  std::vector<std::vector<FeatureClip>> out;
  out.reserve(corpus.videos.size());
  for (const VideoDocument& doc : corpus.videos) {
    std::vector<FeatureClip> feats;
    feats.reserve(doc.clips.size());
    for (const ClipRecord& clip : doc.clips) feats.push_back(frozen_encode(clip, cb, cfg));
    out.push_back(std::move(feats));
  }
  return out;
}

void export_codebooks(const Codebooks& cb, const std::string& path) {
  Checkpoint ckpt;
  ckpt.meta["format"] = "qplan-codebook-v1";
  ckpt.meta["seed"] = cb.seed;
  ckpt.meta["video_dim"] = cb.video_dim;
  ckpt.meta["audio_dim"] = cb.audio_dim;
  ckpt.meta["text_dim"] = cb.text_dim;
  ckpt.entries["codebook/objects"] = cb.objects;
  ckpt.entries["codebook/places"] = cb.places;
  ckpt.entries["codebook/verbs"] = cb.verbs;
  ckpt.entries["codebook/generic"] = cb.generic;
  ckpt.entries["codebook/unk_text"] = cb.unk_text;
  save_checkpoint(path, ckpt);
}

}  // namespace qp
