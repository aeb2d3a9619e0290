#include "qp/decoder.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <unordered_map>

#include "qp/error.hpp"

namespace qp {

void ToyCausalDecoder::init(const DecoderConfig& config, Rng& rng) {
  cfg = config;
  if (cfg.vocab <= 0) throw ConfigError("decoder: vocabulary size must be set");
  token_emb = Parameter("decoder.token_emb", Tensor::xavier_uniform(cfg.vocab, cfg.d, rng));
  blocks.resize(static_cast<size_t>(cfg.blocks));
  for (int b = 0; b < cfg.blocks; ++b)
    blocks[static_cast<size_t>(b)].init("decoder.block" + std::to_string(b), cfg.d, cfg.ffn, cfg.heads,
                                        false, 0, rng);
  final_ln.init("decoder.final_ln", cfg.d);
}

void ToyCausalDecoder::freeze() {
  frozen = true;
  for (NamedParam& np : named_params()) np.param->trainable = false;
}

Var ToyCausalDecoder::forward_embeddings(Tape& t, Var emb_rows, const ForwardOpts& opts) {
  int rows = t.value(emb_rows).rows();
  Var x = add(t, emb_rows, t.leaf(sinusoidal_positions(rows, cfg.d)));
  for (TransformerBlock& blk : blocks)
    x = blk.apply(t, x, nullptr, /*causal=*/true, std::nullopt, nullptr, opts);
  x = final_ln.apply(t, x);
  return matmul(t, x, transpose(t, t.param(token_emb)));
}

Var ToyCausalDecoder::embed_tokens(Tape& t, const std::vector<int>& ids) {
  return embedding_rows(t, t.param(token_emb), ids);
}

Var ToyCausalDecoder::lm_loss(Tape& t, const std::vector<int>& doc, const ForwardOpts& opts) {
  if (doc.size() < 2) throw ContractError("lm_loss: document needs at least two tokens");
  std::vector<int> input(doc.begin(), doc.end() - 1);
  std::vector<int> gold(doc.begin() + 1, doc.end());
  Var logits = forward_embeddings(t, embed_tokens(t, input), opts);
  return cross_entropy(t, logits, gold);
}

std::vector<NamedParam> ToyCausalDecoder::named_params() {
  std::vector<NamedParam> out;
  out.push_back({"decoder/token_emb", &token_emb});
  for (size_t b = 0; b < blocks.size(); ++b)
    blocks[b].collect(out, "decoder/block" + std::to_string(b));
  final_ln.collect(out, "decoder/final_ln");
  return out;
}

// ---------------------------------------------------------------------------
// Incremental decode path
// ---------------------------------------------------------------------------

namespace {

Tensor value_layer_norm(const Tensor& x, const Parameter& gain, const Parameter& bias, double eps) {
  int rows = x.rows(), cols = x.cols();
  Tensor out({rows, cols});
  for (int r = 0; r < rows; ++r) {
    double mu = 0.0;
    for (int c = 0; c < cols; ++c) mu += x.at(r, c);
    mu /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      double d = x.at(r, c) - mu;
      var += d * d;
    }
    var /= cols;
    double inv = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c)
      out.at(r, c) = (x.at(r, c) - mu) * inv * gain.value[static_cast<size_t>(c)] +
                     bias.value[static_cast<size_t>(c)];
  }
  return out;
}

Tensor value_linear(const Tensor& x, const Linear& lin) {
  Tensor out = vmatmul(x, lin.w.value);
  for (int r = 0; r < out.rows(); ++r)
    for (int c = 0; c < out.cols(); ++c) out.at(r, c) += lin.b.value[static_cast<size_t>(c)];
  return out;
}

Tensor value_gelu(const Tensor& x) {
  Tensor out = x;
  double inv_sqrt2 = 1.0 / std::sqrt(2.0);
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * inv_sqrt2));
  return out;
}

Tensor sinusoidal_row(int pos, int dim) {
  Tensor full = sinusoidal_positions(pos + 1, dim);
  Tensor row({1, dim});
  for (int c = 0; c < dim; ++c) row.at(0, c) = full.at(pos, c);
  return row;
}

}  // namespace

ToyCausalDecoder::DecodeState ToyCausalDecoder::begin_decode() const {
  DecodeState s;
  s.keys.assign(blocks.size(), Tensor({0, cfg.d}));
  s.values.assign(blocks.size(), Tensor({0, cfg.d}));
  return s;
}

Tensor ToyCausalDecoder::step(DecodeState& state, const Tensor& emb_row) const {
  if (emb_row.rows() != 1 || emb_row.cols() != cfg.d)
    throw ShapeError("decoder step: expected 1x" + std::to_string(cfg.d) + " row, got " + emb_row.shape_str());
  int dh = cfg.d / cfg.heads;
  double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Tensor x = emb_row;
  {
    Tensor pos = sinusoidal_row(state.length, cfg.d);
    for (int c = 0; c < cfg.d; ++c) x.at(0, c) += pos.at(0, c);
  }
  for (size_t b = 0; b < blocks.size(); ++b) {
    const TransformerBlock& blk = blocks[b];
    Tensor h = value_layer_norm(x, blk.ln_attn.gain, blk.ln_attn.bias, blk.ln_attn.eps);
    Tensor q = value_linear(h, blk.self_attn.q_proj);
    Tensor k = value_linear(h, blk.self_attn.k_proj);
    Tensor v = value_linear(h, blk.self_attn.v_proj);

    // grow the cache by one row
    Tensor& K = state.keys[b];
    Tensor& V = state.values[b];
    Tensor newK({K.rows() + 1, cfg.d});
    std::copy(K.data.begin(), K.data.end(), newK.data.begin());
    for (int c = 0; c < cfg.d; ++c) newK.at(K.rows(), c) = k.at(0, c);
    K = std::move(newK);
    Tensor newV({V.rows() + 1, cfg.d});
    std::copy(V.data.begin(), V.data.end(), newV.data.begin());
    for (int c = 0; c < cfg.d; ++c) newV.at(V.rows(), c) = v.at(0, c);
    V = std::move(newV);

    int t_len = K.rows();
    Tensor mixed({1, cfg.d});
    for (int head = 0; head < cfg.heads; ++head) {
      int off = head * dh;
      std::vector<double> scores(static_cast<size_t>(t_len));
      double mx = -1e300;
      for (int j = 0; j < t_len; ++j) {
        double s = 0.0;
        for (int c = 0; c < dh; ++c) s += q.at(0, off + c) * K.at(j, off + c);
        s *= scale;
        scores[static_cast<size_t>(j)] = s;
        mx = std::max(mx, s);
      }
      double denom = 0.0;
      for (int j = 0; j < t_len; ++j) {
        scores[static_cast<size_t>(j)] = std::exp(scores[static_cast<size_t>(j)] - mx);
        denom += scores[static_cast<size_t>(j)];
      }
      for (int c = 0; c < dh; ++c) {
        double acc = 0.0;
        for (int j = 0; j < t_len; ++j) acc += scores[static_cast<size_t>(j)] * V.at(j, off + c);
        mixed.at(0, off + c) = acc / denom;
      }
    }
    Tensor attn_out = value_linear(mixed, blk.self_attn.out_proj);
    for (int c = 0; c < cfg.d; ++c) x.at(0, c) += attn_out.at(0, c);

    Tensor f = value_layer_norm(x, blk.ln_ff.gain, blk.ln_ff.bias, blk.ln_ff.eps);
    f = value_linear(value_gelu(value_linear(f, blk.ff1)), blk.ff2);
    for (int c = 0; c < cfg.d; ++c) x.at(0, c) += f.at(0, c);
  }
  state.length += 1;
  Tensor normed = value_layer_norm(x, final_ln.gain, final_ln.bias, final_ln.eps);
  return vmatmul_nt(normed, token_emb.value);  // 1 x vocab
}

// ---------------------------------------------------------------------------
// LM pretraining
// ---------------------------------------------------------------------------

std::vector<std::vector<int>> build_lm_documents(const Corpus& corpus, const Vocabulary& vocab) {
  std::vector<std::vector<int>> docs;
  for (const VideoDocument& video : corpus.videos) {
    for (const ClipRecord& clip : video.clips) {
      std::vector<int> doc;
      doc.push_back(Vocabulary::kBos);
      if (clip.subtitle) {
        for (int id : vocab.encode(*clip.subtitle)) doc.push_back(id);
        doc.push_back(Vocabulary::kSep);
      }
      doc.push_back(Vocabulary::kDescTag);
      for (int id : vocab.encode(clip.description)) doc.push_back(id);
      doc.push_back(Vocabulary::kSep);
      doc.push_back(Vocabulary::kActionTag);
      for (int id : vocab.encode(clip.action_sequence)) doc.push_back(id);
      doc.push_back(Vocabulary::kEos);
      docs.push_back(std::move(doc));
    }
  }
  return docs;
}

double decoder_perplexity(ToyCausalDecoder& decoder, const std::vector<std::vector<int>>& docs) {
  if (docs.empty()) throw ContractError("decoder_perplexity: no documents");
  ForwardOpts opts;  // eval mode
  double total = 0.0;
  long count = 0;
  for (const auto& doc : docs) {
    if (doc.size() < 2) continue;
    Tape t;
    Var loss = decoder.lm_loss(t, doc, opts);
    total += t.value(loss).item() * static_cast<double>(doc.size() - 1);
    count += static_cast<long>(doc.size()) - 1;
  }
  return std::exp(total / static_cast<double>(count));
}

double unigram_perplexity(const std::vector<std::vector<int>>& train_docs,
                          const std::vector<std::vector<int>>& heldout_docs, int vocab_size) {
  std::vector<double> counts(static_cast<size_t>(vocab_size), 1.0);  // add-1
  double total = static_cast<double>(vocab_size);
  for (const auto& doc : train_docs)
    for (size_t i = 1; i < doc.size(); ++i) {
      counts[static_cast<size_t>(doc[i])] += 1.0;
      total += 1.0;
    }
  double ll = 0.0;
  long n = 0;
  for (const auto& doc : heldout_docs)
    for (size_t i = 1; i < doc.size(); ++i) {
      ll += std::log(counts[static_cast<size_t>(doc[i])] / total);
      ++n;
    }
  return std::exp(-ll / static_cast<double>(n));
}

DecoderPretrainStats pretrain_decoder(ToyCausalDecoder& decoder, const Corpus& train,
                                      const Corpus& heldout, const Vocabulary& vocab,
                                      const DecoderPretrainHyper& hyper, Rng& rng) {
  std::vector<std::vector<int>> docs = build_lm_documents(train, vocab);
  std::vector<std::vector<int>> heldout_docs = build_lm_documents(heldout, vocab);
  if (docs.empty()) throw ContractError("pretrain_decoder: empty training corpus");

  std::vector<Parameter*> params;
  for (NamedParam& np : decoder.named_params()) params.push_back(np.param);
  Adam opt;
  opt.lr = hyper.lr;
  ForwardOpts opts;  // the toy decoder trains without dropout

  DecoderPretrainStats stats;
  std::vector<size_t> order(docs.size());
  for (size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (int epoch = 0; epoch < hyper.epochs; ++epoch) {
    rng.shuffle(order);
    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(hyper.batch)) {
      size_t end = std::min(order.size(), start + static_cast<size_t>(hyper.batch));
      Tape t;
      std::vector<Var> losses;
      for (size_t i = start; i < end; ++i) losses.push_back(decoder.lm_loss(t, docs[order[i]], opts));
      Var sum = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) sum = add(t, sum, losses[i]);
      Var batch_loss = scale(t, sum, 1.0 / static_cast<double>(losses.size()));
      double lv = t.value(batch_loss).item();
      if (!std::isfinite(lv))
        throw NumericError("decoder pretraining diverged at step " + std::to_string(opt.t));
      opt.zero_grads(params);
      t.backward(batch_loss);
      opt.step(params);
      stats.loss_curve.push_back(lv);
    }
  }
  stats.final_train_loss = stats.loss_curve.empty() ? 0.0 : stats.loss_curve.back();
  stats.heldout_perplexity = decoder_perplexity(decoder, heldout_docs);
  stats.unigram_perplexity = unigram_perplexity(docs, heldout_docs, decoder.cfg.vocab);
  decoder.freeze();
  return stats;
}

// ---------------------------------------------------------------------------
// Conditioning
// ---------------------------------------------------------------------------

CondSelector parse_selector(const std::string& name) {
  if (name.empty() || name == "none") return CondSelector::None;
  if (name == "subtitle") return CondSelector::Subtitle;
  if (name == "external_description") return CondSelector::ExternalDescription;
  if (name == "external_description+subtitle") return CondSelector::ExternalPlusSubtitle;
  if (name == "generated_description") return CondSelector::GeneratedDescription;
  if (name == "groundtruth_description") return CondSelector::GroundtruthDescription;
  throw ConfigError("unknown conditioning selector '" + name + "'");
}

std::string selector_name(CondSelector sel) {
  switch (sel) {
    case CondSelector::None: return "none";
    case CondSelector::Subtitle: return "subtitle";
    case CondSelector::ExternalDescription: return "external_description";
    case CondSelector::ExternalPlusSubtitle: return "external_description+subtitle";
    case CondSelector::GeneratedDescription: return "generated_description";
    case CondSelector::GroundtruthDescription: return "groundtruth_description";
  }
  return "none";
}

std::vector<int> conditioning_tokens(const ConditioningConfig& cfg, const ClipRecord& clip,
                                     const Vocabulary& vocab, const std::string* generated_description,
                                     int* fallback_count) {
  auto miss = [&] {
    if (fallback_count) ++(*fallback_count);
  };
  std::vector<int> ids;
  switch (cfg.selector) {
    case CondSelector::None:
      break;
    case CondSelector::Subtitle:
      if (clip.subtitle)
        ids = vocab.encode(*clip.subtitle);
      else
        miss();
      break;
    case CondSelector::ExternalDescription:
      if (clip.external_description)
        ids = vocab.encode(*clip.external_description);
      else
        miss();
      break;
    case CondSelector::ExternalPlusSubtitle: {
      // order fixed: external description first, then the subtitle
      if (clip.external_description)
        ids = vocab.encode(*clip.external_description);
      else
        miss();
      if (clip.subtitle) {
        if (!ids.empty()) ids.push_back(Vocabulary::kSep);
        for (int id : vocab.encode(*clip.subtitle)) ids.push_back(id);
      } else {
        miss();
      }
      break;
    }
    case CondSelector::GeneratedDescription:
      if (generated_description)
        ids = vocab.encode(*generated_description);
      else
        miss();
      break;
    case CondSelector::GroundtruthDescription:
      ids = vocab.encode(clip.description);
      break;
  }
  if (static_cast<int>(ids.size()) > cfg.max_tokens)
    ids.erase(ids.begin(), ids.end() - cfg.max_tokens);  // keep the tail
  return ids;
}

// ---------------------------------------------------------------------------
// Assembly, stage-2 loss, generation
// ---------------------------------------------------------------------------

PromptAssembly build_assembly(Tape& t, ToyCausalDecoder& decoder, Var projected_queries,
                              const std::vector<int>& cond_tokens, int task_tag,
                              const std::vector<int>& target) {
  if (target.empty()) throw ContractError("stage-2 assembly: empty target");
  PromptAssembly out;
  int n_queries = t.value(projected_queries).rows();
  int n_cond = static_cast<int>(cond_tokens.size());
  out.n_context = n_cond + n_queries;
  out.n_target = static_cast<int>(target.size());

  std::vector<Var> parts;
  if (n_cond > 0) parts.push_back(decoder.embed_tokens(t, cond_tokens));
  parts.push_back(projected_queries);
  std::vector<int> tail_tokens;
  tail_tokens.push_back(task_tag);
  tail_tokens.insert(tail_tokens.end(), target.begin(), target.end());
  parts.push_back(decoder.embed_tokens(t, tail_tokens));
  out.embeddings = concat_rows(t, parts);

  int rows = out.n_context + 1 + out.n_target;
  out.gold.assign(static_cast<size_t>(rows), Vocabulary::kPad);
  out.score_mask.assign(static_cast<size_t>(rows), 0);
  // the tag row predicts target[0]; each target row predicts its successor;
  // the last target row predicts EOS
  for (int i = 0; i <= out.n_target; ++i) {
    int row = out.n_context + i;
    out.gold[static_cast<size_t>(row)] =
        i < out.n_target ? target[static_cast<size_t>(i)] : Vocabulary::kEos;
    out.score_mask[static_cast<size_t>(row)] = 1;
  }
  return out;
}

Var stage2_loss(Tape& t, ToyCausalDecoder& decoder, const PromptAssembly& assembly,
                const ForwardOpts& opts) {
  Var logits = decoder.forward_embeddings(t, assembly.embeddings, opts);
  return cross_entropy(t, logits, assembly.gold, &assembly.score_mask);
}

std::vector<int> greedy_generate_ids(const ToyCausalDecoder& decoder, const Tensor& prefix_rows,
                                     int task_tag, int max_len) {
  ToyCausalDecoder::DecodeState state = decoder.begin_decode();
  Tensor logits;
  for (int r = 0; r < prefix_rows.rows(); ++r) {
    Tensor row({1, decoder.cfg.d});
    for (int c = 0; c < decoder.cfg.d; ++c) row.at(0, c) = prefix_rows.at(r, c);
    logits = decoder.step(state, row);
  }
  {
    Tensor tag_row({1, decoder.cfg.d});
    for (int c = 0; c < decoder.cfg.d; ++c) tag_row.at(0, c) = decoder.token_emb.value.at(task_tag, c);
    logits = decoder.step(state, tag_row);
  }
  std::vector<int> out;
  for (int step = 0; step < max_len; ++step) {
    int best = 0;
    for (int v = 1; v < decoder.cfg.vocab; ++v)
      if (logits.at(0, v) > logits.at(0, best)) best = v;
    if (best == Vocabulary::kEos) break;
    out.push_back(best);
    Tensor row({1, decoder.cfg.d});
    for (int c = 0; c < decoder.cfg.d; ++c) row.at(0, c) = decoder.token_emb.value.at(best, c);
    logits = decoder.step(state, row);
  }
  return out;
}

std::string greedy_generate(const ToyCausalDecoder& decoder, const Tensor& prefix_rows, int task_tag,
                            const Vocabulary& vocab, int max_len) {
  std::vector<int> ids = greedy_generate_ids(decoder, prefix_rows, task_tag, max_len);
  return vocab.decode(ids);
}

}  // namespace qp
