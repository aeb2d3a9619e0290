#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "qp/checkpoint.hpp"
#include "qp/context.hpp"
#include "qp/decoder.hpp"

namespace qp {

struct TrainHyper {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  int batch = 16;
  int stage1_epochs = 4;
  int stage2_epochs = 6;
  double w_contrastive = 1.0;
  double w_generation = 1.0;
  double dropout = 0.1;
  int max_gen_len = 48;
};

struct TrainContext {
  const Corpus* corpus = nullptr;
  const std::vector<std::vector<FeatureClip>>* features = nullptr;
  const Vocabulary* vocab = nullptr;
};

// Optimizer + RNG + progress; serialized into checkpoints so interrupted
// runs resume bit-identically.
struct TrainerState {
  Adam opt;
  Rng rng;
  int next_epoch = 0;

  TrainerState() = default;
  explicit TrainerState(uint64_t seed, const TrainHyper& hyper) : rng(seed) {
    opt.lr = hyper.lr;
    opt.beta1 = hyper.beta1;
    opt.beta2 = hyper.beta2;
    opt.eps = hyper.adam_eps;
  }
};

// Stage 1: representation learning. Contrastive alignment between fused
// clip tokens and pooled descriptions plus caption generation through the
// current Q-former's text path.
void run_stage1(PlannerModel& model, const TrainContext& data, const TrainHyper& hyper,
                TrainerState& state, int n_epochs, std::vector<std::string>* log,
                const std::function<void(int)>& on_epoch_end = nullptr);

struct Stage2Setup {
  std::string task = "action_sequence";  // or "description"
  ConditioningConfig cond;
  // two-pass conditioning: generated descriptions keyed by "video_id#clip"
  const std::unordered_map<std::string, std::string>* generated_desc = nullptr;
  int cond_fallbacks = 0;  // clips whose selected conditioning field was missing
};

// Stage 2: generative learning against the frozen decoder. Trains the
// Q-former(s), fusion encoder and the decoder-space projection.
void run_stage2(PlannerModel& model, ToyCausalDecoder& decoder, const TrainContext& data,
                Stage2Setup& setup, const TrainHyper& hyper, TrainerState& state, int n_epochs,
                std::vector<std::string>* log, const std::function<void(int)>& on_epoch_end = nullptr);

int task_tag(const std::string& task);
std::string task_target_text(const ClipRecord& clip, const std::string& task);
std::string generated_desc_key(const std::string& video_id, int clip_index);

// Greedy generation for one clip under the model + conditioning config.
std::string generate_clip_text(PlannerModel& model, const ToyCausalDecoder& decoder,
                               const std::vector<FeatureClip>& video_feats, int clip_idx,
                               const ClipRecord& clip, const std::string& task,
                               const ConditioningConfig& cond, const Vocabulary& vocab,
                               const std::unordered_map<std::string, std::string>* generated_desc,
                               int* fallback_count, int max_len);

// Checkpoint plumbing shared by both stages.
Checkpoint trainer_checkpoint(PlannerModel& model, const TrainerState& state, const std::string& kind,
                              const nlohmann::json& config_echo);
void trainer_restore(PlannerModel& model, TrainerState& state, const Checkpoint& ckpt);

std::vector<Parameter*> model_params(PlannerModel& model);

}  // namespace qp
