#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opsa/diagnostics.hpp"
#include "opsa/eval.hpp"
#include "opsa/losses.hpp"
#include "opsa/model.hpp"
#include "opsa/promptsearch.hpp"
#include "opsa/train.hpp"
#include "opsa/world.hpp"

namespace opsa::harness {

struct AttackSpec {
  int behaviors = eval::kAttackBehaviors;
  int prefill_samples = 3;
  int template_samples = 3;
  TokenSequence prefix{tok::COMPLY};
};

struct ExperimentConfig {
  CorpusSpec world;
  model::ModelConfig model;
  train::OptimizerConfig pretrain;
  train::OptimizerConfig align;
  losses::DivergenceMode divergence = losses::DivergenceMode::mix(0.5);
  int pool_size = 32;
  std::uint64_t pool_seed = 0;
  int dev_size = promptsearch::kDevSize;
  PromptSetSpec prompts;
  int suite_size = 200;
  std::uint64_t suite_seed = 0;
  AttackSpec attacks;
  int capability_k = 4;
  int safety_samples = 1;
  int diagnostic_rollouts = diagnostics::kDefaultRollouts;
  std::uint64_t diagnostic_seed = diagnostics::kDefaultRolloutSeed;
  std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};
  bool select_checkpoint = true;
  bool run_attacks = true;
  bool run_diagnostics = true;

  // Not part of the experiment identity.
  std::string output_dir = "runs/default";
  std::string cache_dir;  // defaults to <output_dir>/cache
  model::ExecMode exec = model::ExecMode::parallel;

  ExperimentConfig();
  void validate() const;
  // Identity fields only; output locations and execution mode are omitted.
  std::string identity_json() const;
  std::string to_json() const;
  static ExperimentConfig from_json(std::string_view text);
  static ExperimentConfig load(const std::string& path);
  std::string hash() const;
  std::string base_hash() const;
  std::string resolved_cache_dir() const;
};

enum class Method { base, sft, opsa };
std::string_view to_string(Method m);
Method parse_method(std::string_view name);

struct ArmReport {
  std::string method;
  eval::SafetyReport safety;
  int selected_epoch = -1;  // -1: untrained parameters
  std::vector<double> epoch_composites;
  std::optional<eval::AsrMetrics> prefill;
  std::optional<eval::AsrMetrics> templates;
  std::string fingerprint;
};

struct SeedReport {
  std::uint64_t seed = 0;
  std::string prompt_hash;
  std::size_t prompt_count = 0;
  double sft_harmful_pass_rate = 0.0;
  std::vector<ArmReport> arms;

  const ArmReport& arm(std::string_view method) const;
};

struct CurveSummary {
  std::string student;
  std::string student_fingerprint;
  std::vector<std::optional<double>> curve;
  std::optional<double> early;  // positions 0..9
  std::optional<double> late;   // positions >= 30
  std::vector<diagnostics::TokenDecomposition> top_tokens;
};

struct DiagnosticsSummary {
  std::string rollout_set_id;
  std::vector<CurveSummary> curves;
  const CurveSummary* find(std::string_view student) const;
};

struct RunReport {
  std::string experiment_id;
  std::string config_json;
  std::string base_fingerprint;
  promptsearch::PrivilegedContext harmful_context;
  promptsearch::PrivilegedContext benign_context;
  std::vector<promptsearch::TfrRow> tfr_table;
  std::vector<SeedReport> seeds;
  std::optional<DiagnosticsSummary> diagnostics;
  std::map<std::string, double> timings;  // seconds per stage

  std::string to_json(bool include_timings = true) const;
  std::string content_hash() const;
};

// Hash of a serialized report with the timing block removed.
std::string report_content_hash(std::string_view json);
// Recomputes every stored composite; throws numeric on mismatch.
void verify_report(std::string_view json);

// Loads the pretrained base from the cache or trains and caches it.
model::Parameters obtain_base(const ExperimentConfig& cfg, bool* from_cache = nullptr);

promptsearch::Selection search_context(const ExperimentConfig& cfg, const model::Parameters& base);
losses::ContextPair context_pair(const promptsearch::PrivilegedContext& harmful);

// Shared inputs of every alignment arm.
struct Workbench {
  const ExperimentConfig* config = nullptr;
  model::Parameters base;
  losses::ContextPair contexts;
  EvalSuites suites;
  std::vector<Query> behaviors;
};

Workbench make_workbench(const ExperimentConfig& cfg, model::Parameters base, losses::ContextPair contexts);

std::string prompt_hash(std::span<const LabeledPrompt> prompts);

struct ArmOutput {
  ArmReport report;
  model::Parameters params;
};

// Trains (or, for base, just evaluates) one arm on the given prompts.
// Checkpoint selection keeps the epoch with the highest composite.
ArmOutput run_arm(const Workbench& wb, Method method, std::span<const LabeledPrompt> prompts, std::uint64_t seed,
                  const losses::DivergenceMode& mode, double* sft_pass_rate = nullptr,
                  const std::string& artifact_dir = "");

ArmReport evaluate_params(const Workbench& wb, const model::Parameters& params, std::string method,
                          std::uint64_t seed, bool attacks);

RunReport run_pipeline(const ExperimentConfig& cfg);
// Stage timings on stderr as each stage finishes.
void set_progress_log(bool enabled);

// Keeps the first ceil(fraction * n) prompts of every (label, wrapped) stratum.
std::vector<LabeledPrompt> subsample_prompts(std::span<const LabeledPrompt> prompts, double fraction);

struct SizeRow {
  std::string method;
  double fraction = 1.0;
  std::size_t prompts = 0;
  std::vector<double> composites;  // per seed
  double mean = 0.0;
};
std::vector<SizeRow> sweep_data_size(const ExperimentConfig& cfg, std::span<const double> fractions);
std::string size_table_tsv(std::span<const SizeRow> rows);

struct CompositionCell {
  int harmful = 0;
  int ratio = 1;
  double sft = 0.0;   // seed-mean composite
  double opsa = 0.0;
  std::string annotation;  // "score (+delta)" in percent
};
PromptSetSpec composition_spec(int harmful, int ratio, std::uint64_t seed);
std::string delta_annotation(double score, double baseline);
std::vector<CompositionCell> sweep_composition(const ExperimentConfig& cfg, std::span<const int> harmful_counts,
                                               std::span<const int> ratios);
std::string composition_table_tsv(std::span<const CompositionCell> cells);

struct DivergenceRow {
  std::string mode;
  eval::SafetyRates rates{};  // seed-mean
  double mean_harm = 0.0;
  double mean_over_refusal = 0.0;
  double composite = 0.0;
  std::vector<double> composites;  // per seed
};
std::vector<DivergenceRow> ablate_divergence(const ExperimentConfig& cfg);
std::string divergence_table_tsv(std::span<const DivergenceRow> rows);

struct TfrValidationRow {
  promptsearch::PrivilegedContext context;
  double tfr = 0.0;
  std::vector<double> harm;  // per seed, mean of the three harm rates
  double mean_harm = 0.0;
};
// Low, middle and high TFR candidates from a table.
std::vector<promptsearch::TfrRow> spanning_contexts(std::span<const promptsearch::TfrRow> table);
std::vector<TfrValidationRow> tfr_validation(const ExperimentConfig& cfg, const model::Parameters& base,
                                             std::span<const promptsearch::TfrRow> picks);

}  // namespace opsa::harness
