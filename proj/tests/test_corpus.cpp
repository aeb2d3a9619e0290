#include <chrono>
#include <cmath>
#include <fstream>
#include <set>
#include <string>

#include "doctest.h"
#include "qp/checkpoint.hpp"
#include "qp/corpus.hpp"
#include "qp/error.hpp"
#include "qp/features.hpp"
#include "qp/grammar.hpp"
#include "qp/vocab.hpp"
#include "qp/worldgen.hpp"
#include "testutil.hpp"

using namespace qp;

namespace {

WorldConfig small_world() {
  WorldConfig w;
  w.train_videos = 12;
  w.val_videos = 4;
  w.seed = 42;
  return w;
}

std::string dump_corpus(const Corpus& c) { return corpus_to_json(c).dump(); }

double row_distance(const Tensor& m, int row, const Tensor& ref_row) {
  double d = 0.0;
  for (int c = 0; c < m.cols(); ++c) {
    double diff = m.at(row, c) - ref_row.at(0, c);
    d += diff * diff;
  }
  return std::sqrt(d);
}

}  // namespace

TEST_CASE("generator is deterministic: same config, byte-identical corpora") {
  GeneratedCorpora a = generate_corpus(small_world());
  GeneratedCorpora b = generate_corpus(small_world());
  CHECK(dump_corpus(a.train) == dump_corpus(b.train));
  CHECK(dump_corpus(a.val) == dump_corpus(b.val));

  WorldConfig other = small_world();
  other.seed = 43;
  GeneratedCorpora c = generate_corpus(other);
  CHECK(dump_corpus(a.train) != dump_corpus(c.train));
}

TEST_CASE("every generated action sequence parses and validates cleanly") {
  GeneratedCorpora g = generate_corpus(small_world());
  for (const Corpus* corpus : {&g.train, &g.val}) {
    for (const auto& video : corpus->videos) {
      for (const auto& clip : video.clips) {
        ActionSequence seq = parse_action_sequence(clip.action_sequence);
        CHECK(render_action_sequence(seq) == normalize(clip.action_sequence));
        for (const ActionStep& step : seq.steps) CHECK(validate_step(step).empty());
        REQUIRE(clip.latent.has_value());
        REQUIRE(seq.steps.size() == clip.latent->steps.size());
        for (size_t s = 0; s < seq.steps.size(); ++s)
          CHECK(seq.steps[s].object == clip.latent->steps[s].object);
      }
    }
  }
}

TEST_CASE("coreference flags land near the configured rate") {
  WorldConfig w;
  w.train_videos = 200;
  w.val_videos = 1;
  w.coreference_rate = 0.5;
  w.seed = 7;
  Corpus train = generate_corpus(w).train;
  int flagged = 0, total = 0;
  for (const auto& video : train.videos)
    for (const auto& clip : video.clips) {
      ++total;
      if (clip.latent->coreferent) ++flagged;
    }
  CHECK(total == 1000);
  // all-coreferent videos are redrawn, so the expectation is E[X | X<5]/5
  double expected = (2.5 - 5.0 / 32) / (31.0 / 32) / 5.0;
  double frac = static_cast<double>(flagged) / total;
  CHECK(std::fabs(frac - expected) < 0.065);  // ~4 sigma
  CHECK(std::fabs(frac - 0.5) < 0.08);

  WorldConfig zero = small_world();
  zero.coreference_rate = 0.0;
  Corpus none = generate_corpus(zero).train;
  for (const auto& video : none.videos)
    for (const auto& clip : video.clips) CHECK_FALSE(clip.latent->coreferent);
}

TEST_CASE("fully invalid subtitles share no words with their descriptions") {
  WorldConfig w = small_world();
  w.subtitle_rate = 1.0;
  w.invalid_subtitle_rate = 1.0;
  Corpus train = generate_corpus(w).train;
  int checked = 0;
  for (const auto& video : train.videos) {
    for (const auto& clip : video.clips) {
      REQUIRE(clip.subtitle.has_value());
      std::set<std::string> desc_tokens;
      for (const auto& t : tokenize(clip.description)) desc_tokens.insert(t);
      for (const auto& t : tokenize(*clip.subtitle)) CHECK(desc_tokens.count(t) == 0);
      ++checked;
    }
  }
  CHECK(checked > 0);
}

TEST_CASE("world config validation collects violations") {
  WorldConfig w = small_world();
  w.coreference_rate = 1.4;
  w.num_objects = 0;
  auto errs = w.validate();
  CHECK(errs.size() == 2);

  WorldConfig single = small_world();
  single.clips_per_video_min = single.clips_per_video_max = 1;
  single.coreference_rate = 0.5;
  CHECK_THROWS_AS(generate_corpus(single), ConfigError);
}

TEST_CASE("corpus save/load/save round-trips byte-identically") {
  qptest::TempDir dir("corpus_roundtrip");
  Corpus train = generate_corpus(small_world()).train;
  std::string p1 = dir.str() + "/a.json", p2 = dir.str() + "/b.json";
  save_corpus(train, p1);
  Corpus loaded = load_corpus(p1);
  save_corpus(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);
  CHECK(loaded.total_clips() == train.total_clips());
}

TEST_CASE("corpus schema violations are reported with coordinates") {
  nlohmann::json j;
  j["format_version"] = 1;
  j["videos"] = nlohmann::json::array();
  CHECK(corpus_from_json(j, "mem").videos.empty());  // empty corpus, no error

  nlohmann::json clip = {{"clip_index", 0}, {"start_s", 5.0},      {"end_s", 3.0},
                         {"description", "x"}, {"action_sequence", "pick fish"}};
  j["videos"] = {{{"video_id", "vbad"}, {"clips", {clip}}}};
  CHECK_THROWS_WITH_AS(corpus_from_json(j, "mem"), doctest::Contains("vbad"), DataError);

  clip["end_s"] = 9.0;
  clip["description"] = "";
  j["videos"] = {{{"video_id", "vempty"}, {"clips", {clip}}}};
  CHECK_THROWS_WITH_AS(corpus_from_json(j, "mem"), doctest::Contains("description"), DataError);

  clip["description"] = "fine";
  clip["clip_index"] = 1;  // not contiguous from 0
  j["videos"] = {{{"video_id", "vidx"}, {"clips", {clip}}}};
  CHECK_THROWS_WITH_AS(corpus_from_json(j, "mem"), doctest::Contains("contiguous"), DataError);

  qptest::TempDir dir("corpus_badjson");
  std::string bad = dir.str() + "/bad.json";
  std::ofstream(bad) << "{ not json";
  CHECK_THROWS_AS(load_corpus(bad), DataError);
}

TEST_CASE("training-scale schema stress: 1173 videos / 8743 clips load under 10s") {
  nlohmann::json j;
  j["format_version"] = 1;
  j["videos"] = nlohmann::json::array();
  int clips_left = 8743;
  for (int v = 0; v < 1173; ++v) {
    int videos_left = 1173 - v;
    int take = clips_left / videos_left + ((clips_left % videos_left) > 0 ? 1 : 0);
    nlohmann::json vj;
    vj["video_id"] = "yv" + std::to_string(v);
    vj["clips"] = nlohmann::json::array();
    for (int c = 0; c < take; ++c) {
      vj["clips"].push_back({{"clip_index", c},
                             {"start_s", 10.0 * c},
                             {"end_s", 10.0 * c + 8.0},
                             {"description", "grill the tomatoes in a pan"},
                             {"action_sequence", "pick tomato from counter, place tomato in pan"}});
    }
    clips_left -= take;
    j["videos"].push_back(std::move(vj));
  }
  REQUIRE(clips_left == 0);

  qptest::TempDir dir("corpus_stress");
  std::string path = dir.str() + "/big.json";
  std::ofstream(path) << j.dump();

  auto t0 = std::chrono::steady_clock::now();
  Corpus big = load_corpus(path);
  auto dt = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(big.total_clips() == 8743);
  CHECK(big.videos.size() == 1173);
  CHECK(dt < 10.0);
}

TEST_CASE("frozen encoding is deterministic and independent of call order") {
  WorldConfig w = small_world();
  Corpus train = generate_corpus(w).train;
  Codebooks cb = build_codebooks(train.inventories, w);

  FeatureClip a = frozen_encode(train.clip(3, 2), cb, w);
  FeatureClip later = frozen_encode(train.clip(0, 0), cb, w);
  FeatureClip b = frozen_encode(train.clip(3, 2), cb, w);
  CHECK(a.video.data == b.video.data);
  CHECK(a.audio.data == b.audio.data);
  CHECK(a.text.data == b.text.data);
  CHECK(a.video.rows() >= 4);
  CHECK(a.audio.rows() >= 3);
  (void)later;
}

TEST_CASE("clips without subtitles encode a single unk text row") {
  WorldConfig w = small_world();
  w.subtitle_rate = 0.0;
  Corpus train = generate_corpus(w).train;
  Codebooks cb = build_codebooks(train.inventories, w);
  FeatureClip f = frozen_encode(train.clip(0, 0), cb, w);
  CHECK(f.text.rows() == 1);
  CHECK(f.text.cols() == w.text_dim);
  CHECK(f.text.data == cb.unk_text.data);
}

TEST_CASE("noise-free encoding shares exact object codebook rows across clips") {
  WorldConfig w = small_world();
  w.feature_noise = 0.0;
  w.coreference_rate = 0.0;
  Corpus train = generate_corpus(w).train;
  Codebooks cb = build_codebooks(train.inventories, w);

  const VideoDocument& video = train.videos[0];
  int obj_id = video.clips[0].latent->steps[0].object_id;
  Tensor obj_row({1, w.video_dim});
  for (int c = 0; c < w.video_dim; ++c) obj_row.at(0, c) = cb.objects.at(obj_id, c);

  for (int clip_idx : {0, 1}) {
    FeatureClip f = frozen_encode(video.clips[static_cast<size_t>(clip_idx)], cb, w);
    bool found = false;
    for (int r = 0; r < f.video.rows(); ++r) found |= row_distance(f.video, r, obj_row) == 0.0;
    CHECK(found);
  }
}

TEST_CASE("coreferent clips hide the object from every current-clip stream") {
  WorldConfig w = small_world();
  w.train_videos = 30;
  w.coreference_rate = 0.5;
  w.subtitle_rate = 1.0;
  w.invalid_subtitle_rate = 0.0;
  Corpus train = generate_corpus(w).train;
  Codebooks cb = build_codebooks(train.inventories, w);

  int coref_checked = 0, normal_checked = 0;
  for (const auto& video : train.videos) {
    for (const auto& clip : video.clips) {
      int obj_id = clip.latent->steps[0].object_id;
      Tensor obj_row({1, w.video_dim});
      for (int c = 0; c < w.video_dim; ++c) obj_row.at(0, c) = cb.objects.at(obj_id, c);
      FeatureClip f = frozen_encode(clip, cb, w);
      double best = 1e9;
      for (int r = 0; r < f.video.rows(); ++r) best = std::min(best, row_distance(f.video, r, obj_row));
      if (clip.latent->coreferent) {
        CHECK(best > 1.0);  // codebook scan: true object row absent
        // valid subtitles on coreferent clips pronominalize the object
        for (const auto& tok : tokenize(*clip.subtitle)) CHECK(tok != clip.latent->main_object);
        ++coref_checked;
      } else {
        CHECK(best < 1.0);
        ++normal_checked;
      }
    }
  }
  CHECK(coref_checked > 20);
  CHECK(normal_checked > 20);
}

TEST_CASE("checkpoint container round-trips bit-exactly with sorted entries") {
  qptest::TempDir dir("ckpt");
  Rng rng(5);
  Checkpoint ck;
  ck.meta = {{"format_version", 1}, {"note", "test"}};
  ck.entries["zeta/w"] = qptest::random_tensor(3, 4, rng);
  ck.entries["alpha/b"] = qptest::random_tensor(1, 7, rng);
  ck.entries["alpha/w"] = Tensor::scalar(-0.0);  // sign bit must survive

  std::string p1 = dir.str() + "/a.ckpt", p2 = dir.str() + "/b.ckpt";
  save_checkpoint(p1, ck);
  Checkpoint back = load_checkpoint(p1);
  CHECK(back.meta == ck.meta);
  REQUIRE(back.entries.size() == 3);
  CHECK(back.entries["zeta/w"].data == ck.entries["zeta/w"].data);
  CHECK(std::signbit(back.entries["alpha/w"].data[0]));
  save_checkpoint(p2, back);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string c1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string c2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(c1 == c2);

  CHECK_THROWS_AS(load_checkpoint(dir.str() + "/nope.ckpt"), DataError);
}

TEST_CASE("parameter restore is strict about names and shapes") {
  Rng rng(6);
  Parameter p("layer.w", qptest::random_tensor(2, 3, rng));
  std::vector<NamedParam> params{{"layer/w", &p}};
  Checkpoint ck;
  put_params(ck, params);
  CHECK(ck.entries.count("param/layer/w") == 1);

  Parameter q("layer.w", Tensor({2, 3}));
  std::vector<NamedParam> into{{"layer/w", &q}};
  restore_params(ck, into);
  CHECK(q.value.data == p.value.data);

  Parameter wrong("layer.w", Tensor({3, 2}));
  std::vector<NamedParam> bad{{"layer/w", &wrong}};
  CHECK_THROWS_AS(restore_params(ck, bad), DataError);
  std::vector<NamedParam> missing{{"other/w", &q}};
  CHECK_THROWS_AS(restore_params(ck, missing), DataError);
}

TEST_CASE("codebook export writes the common container") {
  qptest::TempDir dir("codebook");
  WorldConfig w = small_world();
  Corpus train = generate_corpus(w).train;
  Codebooks cb = build_codebooks(train.inventories, w);
  std::string path = dir.str() + "/codebook.ckpt";
  export_codebooks(cb, path);
  Checkpoint ck = load_checkpoint(path);
  CHECK(ck.meta["format"] == "qplan-codebook-v1");
  CHECK(ck.entries["codebook/objects"].data == cb.objects.data);
  CHECK(ck.entries["codebook/verbs"].rows() == w.num_verbs);
}
