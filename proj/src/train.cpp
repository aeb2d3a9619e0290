#include "qp/train.hpp"

#include <array>
#include <cmath>

#include "qp/error.hpp"

namespace qp {

namespace {

struct ClipRef {
  int video;
  int clip;
};

std::vector<ClipRef> all_clips(const Corpus& corpus) {
  std::vector<ClipRef> refs;
  for (size_t v = 0; v < corpus.videos.size(); ++v)
    for (size_t c = 0; c < corpus.videos[v].clips.size(); ++c)
      refs.push_back({static_cast<int>(v), static_cast<int>(c)});
  return refs;
}

// batches of `batch`, with a lone trailing item folded into the previous
// batch so the contrastive loss always sees at least two pairs
std::vector<std::vector<ClipRef>> make_batches(std::vector<ClipRef> order, int batch, bool min_two) {
  std::vector<std::vector<ClipRef>> batches;
  for (size_t start = 0; start < order.size(); start += static_cast<size_t>(batch)) {
    size_t end = std::min(order.size(), start + static_cast<size_t>(batch));
    batches.emplace_back(order.begin() + static_cast<long>(start), order.begin() + static_cast<long>(end));
  }
  if (min_two && batches.size() > 1 && batches.back().size() < 2) {
    batches[batches.size() - 2].push_back(batches.back()[0]);
    batches.pop_back();
  }
  return batches;
}

}  // namespace

int task_tag(const std::string& task) {
  if (task == "action_sequence") return Vocabulary::kActionTag;
  if (task == "description") return Vocabulary::kDescTag;
  throw ConfigError("unknown task '" + task + "' (expected action_sequence|description)");
}

std::string task_target_text(const ClipRecord& clip, const std::string& task) {
  return task == "description" ? clip.description : clip.action_sequence;
}

std::string generated_desc_key(const std::string& video_id, int clip_index) {
  return video_id + "#" + std::to_string(clip_index);
}

std::vector<Parameter*> model_params(PlannerModel& model) {
  std::vector<Parameter*> out;
  for (NamedParam& np : model.named_params()) out.push_back(np.param);
  return out;
}

void run_stage1(PlannerModel& model, const TrainContext& data, const TrainHyper& hyper,
                TrainerState& state, int n_epochs, std::vector<std::string>* log,
                const std::function<void(int)>& on_epoch_end) {
  if (hyper.batch < 2) throw ConfigError("stage-1 batch size must be >= 2 for the contrastive loss");
  std::vector<Parameter*> params = model_params(model);
  std::vector<ClipRef> refs = all_clips(*data.corpus);
  if (refs.size() < 2) throw ContractError("stage-1 needs at least two clips");

  int step = 0;
  for (int epoch = state.next_epoch; epoch < state.next_epoch + n_epochs; ++epoch) {
    state.rng.shuffle(refs);
    for (const auto& batch : make_batches(refs, hyper.batch, /*min_two=*/true)) {
      Tape tape;
      ForwardOpts opts{/*training=*/true, hyper.dropout, &state.rng};
      std::vector<Var> clip_tokens, text_pooled;
      std::vector<Var> gen_losses;
      for (const ClipRef& ref : batch) {
        const ClipRecord& clip = data.corpus->clip(ref.video, ref.clip);
        const auto& vfeats = (*data.features)[static_cast<size_t>(ref.video)];
        clip_tokens.push_back(model.clip_tokens(tape, vfeats, ref.clip, opts));
        std::vector<int> desc = data.vocab->encode(clip.description);
        text_pooled.push_back(model.current.encode_text_pooled(tape, desc, opts));
        gen_losses.push_back(model.current.generation_loss(
            tape, vfeats[static_cast<size_t>(ref.clip)], model.features, desc, opts));
      }
      ContrastiveResult contr = contrastive_from_tokens(tape, clip_tokens, text_pooled,
                                                        model.current.contrast_head,
                                                        model.current.log_temp);
      Var gen_sum = gen_losses[0];
      for (size_t i = 1; i < gen_losses.size(); ++i) gen_sum = add(tape, gen_sum, gen_losses[i]);
      Var gen_mean = scale(tape, gen_sum, 1.0 / static_cast<double>(gen_losses.size()));
      Var total = add(tape, scale(tape, contr.loss, hyper.w_contrastive),
                      scale(tape, gen_mean, hyper.w_generation));

      double contr_v = tape.value(contr.loss).item();
      double gen_v = tape.value(gen_mean).item();
      if (!std::isfinite(contr_v) || !std::isfinite(gen_v))
        throw NumericError("stage-1 diverged (non-finite loss) at step " + std::to_string(step));

      state.opt.zero_grads(params);
      tape.backward(total);
      state.opt.step(params);
      if (log)
        log->push_back(std::to_string(step) + ",stage1," + std::to_string(contr_v) + "," +
                       std::to_string(gen_v));
      ++step;
    }
    if (on_epoch_end) on_epoch_end(epoch);
  }
  state.next_epoch += n_epochs;
}

void run_stage2(PlannerModel& model, ToyCausalDecoder& decoder, const TrainContext& data,
                Stage2Setup& setup, const TrainHyper& hyper, TrainerState& state, int n_epochs,
                std::vector<std::string>* log, const std::function<void(int)>& on_epoch_end) {
  if (!decoder.frozen) throw ContractError("stage-2 requires a frozen decoder");
  std::vector<Parameter*> params = model_params(model);
  std::vector<ClipRef> refs = all_clips(*data.corpus);
  if (refs.empty()) throw ContractError("stage-2 needs at least one clip");
  int tag = task_tag(setup.task);

  int step = 0;
  for (int epoch = state.next_epoch; epoch < state.next_epoch + n_epochs; ++epoch) {
    state.rng.shuffle(refs);
    for (const auto& batch : make_batches(refs, hyper.batch, /*min_two=*/false)) {
      Tape tape;
      ForwardOpts opts{/*training=*/true, hyper.dropout, &state.rng};
      std::vector<Var> losses;
      for (const ClipRef& ref : batch) {
        const ClipRecord& clip = data.corpus->clip(ref.video, ref.clip);
        const auto& vfeats = (*data.features)[static_cast<size_t>(ref.video)];
        Var queries = model.projected_tokens(tape, vfeats, ref.clip, opts);
        const std::string* gen_desc = nullptr;
        if (setup.generated_desc) {
          auto it = setup.generated_desc->find(generated_desc_key(clip.video_id, clip.clip_index));
          if (it != setup.generated_desc->end()) gen_desc = &it->second;
        }
        std::vector<int> cond =
            conditioning_tokens(setup.cond, clip, *data.vocab, gen_desc, &setup.cond_fallbacks);
        std::vector<int> target = data.vocab->encode(task_target_text(clip, setup.task));
        PromptAssembly assembly = build_assembly(tape, decoder, queries, cond, tag, target);
        losses.push_back(stage2_loss(tape, decoder, assembly, opts));
      }
      Var sum = losses[0];
      for (size_t i = 1; i < losses.size(); ++i) sum = add(tape, sum, losses[i]);
      Var mean = scale(tape, sum, 1.0 / static_cast<double>(losses.size()));
      double loss_v = tape.value(mean).item();
      if (!std::isfinite(loss_v))
        throw NumericError("stage-2 diverged (non-finite loss) at step " + std::to_string(step));
      state.opt.zero_grads(params);
      tape.backward(mean);
      state.opt.step(params);
      if (log) log->push_back(std::to_string(step) + ",stage2," + std::to_string(loss_v));
      ++step;
    }
    if (on_epoch_end) on_epoch_end(epoch);
  }
  state.next_epoch += n_epochs;
}

std::string generate_clip_text(PlannerModel& model, const ToyCausalDecoder& decoder,
                               const std::vector<FeatureClip>& video_feats, int clip_idx,
                               const ClipRecord& clip, const std::string& task,
                               const ConditioningConfig& cond, const Vocabulary& vocab,
                               const std::unordered_map<std::string, std::string>* generated_desc,
                               int* fallback_count, int max_len) {
  Tape tape;
  ForwardOpts opts;  // eval mode
  Var queries = model.projected_tokens(tape, video_feats, clip_idx, opts);
  const Tensor& qv = tape.value(queries);

  const std::string* gen_desc = nullptr;
  if (generated_desc) {
    auto it = generated_desc->find(generated_desc_key(clip.video_id, clip.clip_index));
    if (it != generated_desc->end()) gen_desc = &it->second;
  }
  std::vector<int> cond_ids = conditioning_tokens(cond, clip, vocab, gen_desc, fallback_count);

  Tensor prefix({static_cast<int>(cond_ids.size()) + qv.rows(), decoder.cfg.d});
  for (size_t i = 0; i < cond_ids.size(); ++i)
    for (int c = 0; c < decoder.cfg.d; ++c)
      prefix.at(static_cast<int>(i), c) = decoder.token_emb.value.at(cond_ids[i], c);
  for (int r = 0; r < qv.rows(); ++r)
    for (int c = 0; c < decoder.cfg.d; ++c)
      prefix.at(static_cast<int>(cond_ids.size()) + r, c) = qv.at(r, c);

  return greedy_generate(decoder, prefix, task_tag(task), vocab, max_len);
}

Checkpoint trainer_checkpoint(PlannerModel& model, const TrainerState& state, const std::string& kind,
                              const nlohmann::json& config_echo) {
  Checkpoint ckpt;
  ckpt.meta["format_version"] = 1;
  ckpt.meta["kind"] = kind;
  ckpt.meta["next_epoch"] = state.next_epoch;
  ckpt.meta["rng_state"] = state.rng.state();
  ckpt.meta["adam_t"] = state.opt.t;
  ckpt.meta["config"] = config_echo;
  std::vector<NamedParam> params = model.named_params();
  put_params(ckpt, params);
  std::vector<std::pair<std::string, Tensor>> adam_entries;
  state.opt.export_state(params, adam_entries);
  for (auto& [name, tensor] : adam_entries) ckpt.entries[name] = std::move(tensor);
  return ckpt;
}

void trainer_restore(PlannerModel& model, TrainerState& state, const Checkpoint& ckpt) {
  std::vector<NamedParam> params = model.named_params();
  restore_params(ckpt, params);
  state.next_epoch = ckpt.meta.value("next_epoch", 0);
  state.opt.t = ckpt.meta.value("adam_t", int64_t{0});
  state.rng.set_state(ckpt.meta.value("rng_state", std::string{}));
  std::unordered_map<std::string, Tensor> adam_entries;
  for (const auto& [name, tensor] : ckpt.entries)
    if (name.rfind("adam_", 0) == 0) adam_entries.emplace(name, tensor);
  state.opt.import_state(params, adam_entries);
}

}  // namespace qp
