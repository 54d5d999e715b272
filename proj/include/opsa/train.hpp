#pragma once

#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opsa/losses.hpp"
#include "opsa/model.hpp"
#include "opsa/world.hpp"

namespace opsa::train {

using losses::DivergenceMode;
using model::ExecMode;
using model::Parameters;

struct OptimizerConfig {
  double peak_lr = 3e-3;
  // Learning rate used at billion-parameter scale; kept for provenance only.
  double reference_peak_lr = 1e-5;
  double warmup_fraction = 0.1;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 0.01;
  double clip_norm = 1.0;
  int batch_size = 64;
  int epochs = 3;
  std::uint64_t seed = 0;

  void validate() const;
  std::string to_json() const;
  static OptimizerConfig from_json(std::string_view text);
};

// Linear warmup over the first ceil(warmup_fraction * total) steps, then a
// half cosine from peak to zero at total.
double lr_at(long step, long total, const OptimizerConfig& cfg);

struct StepRecord {
  long step = 0;
  int epoch = 0;
  double lr = 0.0;
  double loss = 0.0;  // per-token
  std::size_t tokens = 0;
};

std::string step_log_line(const StepRecord& r);

// Optimizer state for one parameter set.
struct TrainState {
  long step = 0;
  Parameters params;
  model::TensorSet m;
  model::TensorSet v;
  std::vector<StepRecord> log;

  explicit TrainState(Parameters initial);
};

// Clips the gradient to cfg.clip_norm, then applies one AdamW update with the
// given learning rate. Returns the pre-clip global norm.
double adamw_step(TrainState& state, model::Gradients& grad, double lr, const OptimizerConfig& cfg);

struct TrainOptions {
  ExecMode exec = ExecMode::reference;
  std::string log_path;        // line-delimited JSON, one record per step
  std::string checkpoint_dir;  // epoch checkpoints when non-empty
  std::function<void(int epoch, const Parameters&)> on_epoch;
};

struct TrainResult {
  Parameters params;
  std::vector<StepRecord> log;
  std::vector<std::string> epoch_fingerprints;
};

long steps_per_epoch(std::size_t items, int batch_size);

// NLL on every corpus triple; the context is part of the conditioning prefix.
TrainResult pretrain_base(std::span<const Triple> corpus, const model::ModelConfig& model_cfg,
                          const OptimizerConfig& opt, const TrainOptions& options = {});

// Mean per-token NLL over a dataset, evaluation only.
double mean_nll(const Parameters& params, std::span<const losses::SftExample> data,
                ExecMode exec = ExecMode::reference);

struct SftDataset {
  std::vector<losses::SftExample> examples;
  std::size_t harmful_candidates = 0;
  std::size_t harmful_kept = 0;
  std::size_t benign = 0;
  std::vector<LabeledPrompt> prompts;  // the prompts kept, in example order
  double harmful_pass_rate() const {
    return harmful_candidates ? static_cast<double>(harmful_kept) / static_cast<double>(harmful_candidates) : 0.0;
  }
};

// Self-distilled SFT data: harmful responses are sampled from the base under
// the harmful context and kept only when judged refused and not leaked;
// benign responses are sampled without context and kept as they are.
SftDataset build_sft_dataset(const Parameters& base, std::span<const LabeledPrompt> prompts,
                             std::span<const Token> harmful_context, const model::DecodeConfig& sampling);

TrainResult train_sft(const Parameters& base, const SftDataset& data, const OptimizerConfig& opt,
                      const TrainOptions& options = {});

struct OpsaOptions {
  DivergenceMode mode = DivergenceMode::mix(0.5);
  // Rollout sampling settings; the per-rollout seed is derived from the
  // optimizer seed, step and prompt index.
  model::DecodeConfig rollout = model::DecodeConfig::sampled(0);
  int rollouts_per_prompt = 1;
  // Keep a copy of the student used at every step so rollouts can be audited.
  bool keep_step_snapshots = false;
};

struct StepRollouts {
  long step = 0;
  std::string student_fingerprint;
  std::vector<losses::Rollout> rollouts;
};

struct OpsaResult {
  TrainResult train;
  std::string teacher_fingerprint_before;
  std::string teacher_fingerprint_after;
  std::vector<StepRollouts> rollout_log;
  std::vector<Parameters> step_snapshots;  // student before each step
};

std::uint64_t rollout_seed(std::uint64_t opt_seed, long step, std::size_t index);

OpsaResult train_opsa(const Parameters& base, std::span<const LabeledPrompt> prompts,
                      const losses::ContextPair& contexts, const OptimizerConfig& opt, const OpsaOptions& opsa,
                      const TrainOptions& options = {});

}  // namespace opsa::train
