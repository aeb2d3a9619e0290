#pragma once

// Small end-to-end setups shared by the model and training tests.

#include <memory>
#include <vector>

#include "qp/decoder.hpp"
#include "qp/features.hpp"
#include "qp/train.hpp"
#include "qp/worldgen.hpp"

namespace qptest {

struct TinySetup {
  qp::WorldConfig world;
  qp::Corpus train, val;
  qp::Vocabulary vocab;
  qp::Codebooks codebooks;
  std::vector<std::vector<qp::FeatureClip>> train_feats, val_feats;

  qp::TrainContext train_ctx() const {
    return qp::TrainContext{&train, &train_feats, &vocab};
  }
  qp::TrainContext val_ctx() const { return qp::TrainContext{&val, &val_feats, &vocab}; }
};

inline TinySetup make_tiny_setup(int train_videos = 10, int val_videos = 3, uint64_t seed = 11,
                                 double coref = 0.5) {
  TinySetup s;
  s.world.train_videos = train_videos;
  s.world.val_videos = val_videos;
  s.world.seed = seed;
  s.world.coreference_rate = coref;
  qp::GeneratedCorpora g = qp::generate_corpus(s.world);
  s.train = std::move(g.train);
  s.val = std::move(g.val);
  s.vocab = qp::Vocabulary::build(qp::corpus_texts(s.train));
  s.codebooks = qp::build_codebooks(s.train.inventories, s.world);
  s.train_feats = qp::encode_corpus(s.train, s.codebooks, s.world);
  s.val_feats = qp::encode_corpus(s.val, s.codebooks, s.world);
  return s;
}

inline qp::QFormerConfig tiny_qf_config(const TinySetup& s, int queries = 4, int d = 16) {
  qp::QFormerConfig cfg;
  cfg.d = d;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.blocks = 2;
  cfg.queries = queries;
  cfg.contrast_dim = 8;
  cfg.vocab = s.vocab.size();
  cfg.video_dim = s.world.video_dim;
  cfg.audio_dim = s.world.audio_dim;
  cfg.text_dim = s.world.text_dim;
  return cfg;
}

inline qp::DecoderConfig tiny_dec_config(const TinySetup& s, int d = 16) {
  qp::DecoderConfig cfg;
  cfg.d = d;
  cfg.heads = 2;
  cfg.ffn = 32;
  cfg.blocks = 2;
  cfg.vocab = s.vocab.size();
  return cfg;
}

inline std::unique_ptr<qp::ToyCausalDecoder> pretrained_decoder(const TinySetup& s, int epochs = 8,
                                                                uint64_t seed = 5) {
  auto dec = std::make_unique<qp::ToyCausalDecoder>();
  qp::Rng rng(seed);
  dec->init(tiny_dec_config(s), rng);
  qp::DecoderPretrainHyper hyper;
  hyper.epochs = epochs;
  qp::Rng train_rng(seed + 1);
  qp::pretrain_decoder(*dec, s.train, s.val, s.vocab, hyper, train_rng);
  return dec;
}

}  // namespace qptest
