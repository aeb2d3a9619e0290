#pragma once

#include <optional>
#include <string>
#include <vector>

#include "qp/corpus.hpp"
#include "qp/nn.hpp"
#include "qp/vocab.hpp"

namespace qp {

struct DecoderConfig {
  int d = 32;
  int heads = 4;
  int ffn = 128;
  int blocks = 2;
  int vocab = 0;
};

// Small causal language model with tied input/output embeddings. Pretrained
// on corpus text, then frozen; afterwards only embeddings prepended to its
// input steer it.
class ToyCausalDecoder {
 public:
  DecoderConfig cfg;
  Parameter token_emb;  // vocab x d, doubles as the logits head
  std::vector<TransformerBlock> blocks;
  LayerNorm final_ln;
  bool frozen = false;

  void init(const DecoderConfig& config, Rng& rng);
  void freeze();

  // Adds sinusoidal positions, runs the causal blocks and returns logits
  // (rows x vocab). Input rows are already in embedding space.
  Var forward_embeddings(Tape& t, Var emb_rows, const ForwardOpts& opts);

  // Next-token cross-entropy over one document.
  Var lm_loss(Tape& t, const std::vector<int>& doc, const ForwardOpts& opts);

  Var embed_tokens(Tape& t, const std::vector<int>& ids);

  std::vector<NamedParam> named_params();

  // --- incremental no-gradient decode path (per-block KV cache) ---
  struct DecodeState {
    std::vector<Tensor> keys, values;  // per block, grown one row per step
    int length = 0;
  };
  DecodeState begin_decode() const;
  // Appends one embedding-space row (position = state.length) and returns
  // its logits as a 1 x vocab tensor.
  Tensor step(DecodeState& state, const Tensor& emb_row) const;
};

// ---------------------------------------------------------------------------
// Language-model pretraining
// ---------------------------------------------------------------------------

// One document per clip: <bos> [subtitle] <sep> <desc> description <sep>
// <action> action-text <eos>. The shared structure is what lets the frozen
// decoder copy earlier mentions into the task sections.
std::vector<std::vector<int>> build_lm_documents(const Corpus& corpus, const Vocabulary& vocab);

struct DecoderPretrainStats {
  double final_train_loss = 0.0;
  double heldout_perplexity = 0.0;
  double unigram_perplexity = 0.0;
  std::vector<double> loss_curve;
};

struct DecoderPretrainHyper {
  int epochs = 12;
  int batch = 16;
  double lr = 1e-3;
};

// Trains on the train corpus, reports held-out perplexity against an add-1
// unigram oracle fitted on the training documents, then freezes the model.
DecoderPretrainStats pretrain_decoder(ToyCausalDecoder& decoder, const Corpus& train,
                                      const Corpus& heldout, const Vocabulary& vocab,
                                      const DecoderPretrainHyper& hyper, Rng& rng);

// Perplexity of the (frozen or not) decoder on a corpus, teacher-forced.
double decoder_perplexity(ToyCausalDecoder& decoder, const std::vector<std::vector<int>>& docs);

// Add-1-smoothed unigram perplexity oracle.
double unigram_perplexity(const std::vector<std::vector<int>>& train_docs,
                          const std::vector<std::vector<int>>& heldout_docs, int vocab_size);

// ---------------------------------------------------------------------------
// Text conditioning
// ---------------------------------------------------------------------------

enum class CondSelector {
  None,
  Subtitle,
  ExternalDescription,
  ExternalPlusSubtitle,
  GeneratedDescription,
  GroundtruthDescription,
};

CondSelector parse_selector(const std::string& name);
std::string selector_name(CondSelector sel);

struct ConditioningConfig {
  CondSelector selector = CondSelector::None;
  // conditioning text is truncated from the left (the end stays)
  int max_tokens = 64;
};

// Token ids for the clip's conditioning segment. Missing fields fall back
// to an empty segment and bump *fallback_count. `generated_description`
// feeds the two-pass selector and may be null otherwise.
std::vector<int> conditioning_tokens(const ConditioningConfig& cfg, const ClipRecord& clip,
                                     const Vocabulary& vocab, const std::string* generated_description,
                                     int* fallback_count);

// ---------------------------------------------------------------------------
// Prompt assembly, stage-2 loss, generation
// ---------------------------------------------------------------------------

// Rows: [conditioning][projected query tokens][task tag][target tokens].
// Loss is computed only at the tag and target rows (predicting the target
// shifted by one, then EOS).
struct PromptAssembly {
  Var embeddings;
  std::vector<int> gold;            // per row; only scored rows matter
  std::vector<uint8_t> score_mask;  // 1 on scored rows
  int n_context = 0;                // conditioning + query rows
  int n_target = 0;
};

PromptAssembly build_assembly(Tape& t, ToyCausalDecoder& decoder, Var projected_queries,
                              const std::vector<int>& cond_tokens, int task_tag,
                              const std::vector<int>& target);

Var stage2_loss(Tape& t, ToyCausalDecoder& decoder, const PromptAssembly& assembly,
                const ForwardOpts& opts);

// Greedy argmax decoding from a prefix of embedding-space rows; stops at
// EOS or max_len generated tokens. Deterministic.
std::vector<int> greedy_generate_ids(const ToyCausalDecoder& decoder, const Tensor& prefix_rows,
                                     int task_tag, int max_len);
std::string greedy_generate(const ToyCausalDecoder& decoder, const Tensor& prefix_rows, int task_tag,
                            const Vocabulary& vocab, int max_len = 48);

}  // namespace qp
