#pragma once

#include <array>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "opsa/model.hpp"
#include "opsa/world.hpp"

namespace opsa::eval {

// Anything that maps a prompt to a response: a model under a decode config, or
// a scripted policy in tests. forced_prefix must open the returned response.
using Policy = std::function<TokenSequence(std::span<const Token> prompt, const model::DecodeConfig& cfg,
                                           std::span<const Token> forced_prefix)>;
Policy policy_of(const model::Parameters& params);

// harm-plain, harm-wrapped, harm-heldout (leak rates), then benign-wrapped and
// benign-plain (refusal rates).
using SafetyRates = std::array<double, 5>;
inline constexpr std::array<std::string_view, 5> kRateNames{"harm_plain", "harm_wrapped", "harm_heldout",
                                                            "benign_wrapped_refusal", "benign_plain_refusal"};

double mean_harm(const SafetyRates& r);
double mean_over_refusal(const SafetyRates& r);

// With num_samples > 1 the decode seed varies per sample and rates are averaged.
SafetyRates safety_rates(const Policy& policy, const EvalSuites& suites, const model::DecodeConfig& cfg,
                         int num_samples = 1, model::ExecMode exec = model::ExecMode::reference);
SafetyRates safety_rates(const model::Parameters& params, const EvalSuites& suites, const model::DecodeConfig& cfg,
                         int num_samples = 1, model::ExecMode exec = model::ExecMode::reference);

double composite_score(const SafetyRates& rates);

// Fraction of (query, sample) pairs answered correctly; sample j decodes with
// a seed derived from cfg.seed and j.
double capability_score(const Policy& policy, std::span<const Query> benign, const model::DecodeConfig& cfg,
                        int k, model::ExecMode exec = model::ExecMode::reference);
double capability_score(const model::Parameters& params, std::span<const Query> benign, const model::DecodeConfig& cfg,
                        int k, model::ExecMode exec = model::ExecMode::reference);

enum class AttackFamily { prefill, template_wrap, pap, pair };
std::string_view to_string(AttackFamily f);
AttackFamily parse_attack_family(std::string_view name);

struct AttackRecord {
  std::size_t behavior = 0;
  std::size_t attempt = 0;
  AttackFamily family = AttackFamily::prefill;
  bool success = false;
  std::string response_fingerprint;
  bool operator==(const AttackRecord&) const = default;
};

inline constexpr int kAttackBehaviors = 159;
std::vector<Query> attack_behaviors(std::uint64_t seed, int count = kAttackBehaviors);

std::vector<AttackRecord> attack_prefill(const Policy& policy, std::span<const Query> behaviors,
                                         std::span<const Token> prefix, const model::DecodeConfig& cfg,
                                         int samples = 3, model::ExecMode exec = model::ExecMode::reference);
std::vector<AttackRecord> attack_prefill(const model::Parameters& params, std::span<const Query> behaviors,
                                         std::span<const Token> prefix, const model::DecodeConfig& cfg,
                                         int samples = 3, model::ExecMode exec = model::ExecMode::reference);

std::vector<AttackRecord> attack_templates(const Policy& policy, std::span<const Query> behaviors,
                                           std::span<const Template> templates, const model::DecodeConfig& cfg,
                                           int samples = 3, model::ExecMode exec = model::ExecMode::reference);
std::vector<AttackRecord> attack_templates(const model::Parameters& params, std::span<const Query> behaviors,
                                           std::span<const Template> templates, const model::DecodeConfig& cfg,
                                           int samples = 3, model::ExecMode exec = model::ExecMode::reference);

struct AsrMetrics {
  double mean_asr = 0.0;
  double pass_at_n = 0.0;
  std::size_t attempts_per_behavior = 0;
  std::size_t behaviors = 0;
};

AsrMetrics asr_metrics(std::span<const AttackRecord> records);

std::string attack_records_tsv(std::span<const AttackRecord> records, const std::string& model_fingerprint,
                               std::uint64_t seed);

struct SafetyReport {
  SafetyRates rates{};
  double composite = 1.0;
  double capability = 0.0;
  std::uint64_t seed = 0;
  int num_samples = 1;
  int capability_k = 1;
  std::string model_fingerprint;

  static SafetyReport make(const SafetyRates& rates, double capability, std::uint64_t seed, int num_samples,
                           int capability_k, std::string fingerprint);
  std::string to_json() const;
  // Recomputes the composite and throws if it differs from the stored value.
  static SafetyReport from_json(std::string_view text);
  std::string to_tsv() const;
  bool operator==(const SafetyReport&) const = default;
};

}  // namespace opsa::eval
