#pragma once

#include <set>
#include <span>
#include <string>
#include <vector>

#include "opsa/model.hpp"
#include "opsa/world.hpp"

namespace opsa::losses {

using model::ExecMode;
using model::Gradients;
using model::Parameters;

struct DivergenceMode {
  enum class Kind { forward, reverse, mix };
  Kind kind = Kind::mix;
  // Weight on the forward term; read only when kind == mix.
  double alpha = 0.5;

  static DivergenceMode forward() { return {Kind::forward, 1.0}; }
  static DivergenceMode reverse() { return {Kind::reverse, 0.0}; }
  static DivergenceMode mix(double alpha = 0.5) { return {Kind::mix, alpha}; }
  static DivergenceMode parse(std::string_view name);

  double forward_weight() const;
  std::string name() const;
  void validate() const;
};

// Log-probabilities are clamped here before any KL arithmetic.
inline constexpr double kLogProbFloor = -60.0;

// teacher/student are log-distributions over the same vocabulary.
double token_kl(std::span<const double> teacher, std::span<const double> student, DivergenceMode mode);
double token_kl(const model::Distribution& teacher, const model::Distribution& student, DivergenceMode mode);

// Adds weight * d token_kl / d(student logits) into dlogits and returns the KL.
double token_kl_backward(std::span<const double> teacher, std::span<const double> student, DivergenceMode mode,
                         double weight, std::span<double> dlogits);

struct SftExample {
  TokenSequence prompt;  // conditioning prefix, not scored
  TokenSequence response;
};

// Sum over pairs and response tokens of -log p(y_t | prompt, y_<t).
double sft_nll(const Parameters& params, std::span<const SftExample> dataset, Gradients* grads = nullptr,
               ExecMode mode = ExecMode::reference);
std::size_t response_token_count(std::span<const SftExample> dataset);

struct Rollout {
  Query query;
  QueryType label = QueryType::benign;
  TokenSequence response;
  std::uint64_t seed = 0;  // decode seed that produced the response
};

struct ContextPair {
  TokenSequence harmful;  // c_h*
  TokenSequence benign;   // c_b*
};

// Student rows condition on (q, y_<t); teacher rows on (c, q, y_<t). Row t of
// each side predicts response token t.
struct AlignedPair {
  model::LogProbs student;
  model::LogProbs teacher;
};

// Throws contaminated_rollout if the response carries context tokens.
void check_rollout(const Rollout& r);
const TokenSequence& context_for(const Rollout& r, const ContextPair& contexts);

AlignedPair align(const Parameters& student, const Parameters& teacher, std::span<const Token> context,
                  const Query& query, std::span<const Token> response);

struct KLRecord {
  std::size_t rollout = 0;
  std::size_t position = 0;
  Token token = 0;
  double kl = 0.0;
};

struct OpsaValue {
  double value = 0.0;
  std::size_t tokens = 0;
  std::vector<KLRecord> records;
};

// Sum of per-token divergences over all response positions of all rollouts.
// With grads set, accumulates the gradient w.r.t. the student parameters; the
// teacher is read only.
OpsaValue opsa_objective(const Parameters& student, const Parameters& teacher, std::span<const Rollout> batch,
                         const ContextPair& contexts, DivergenceMode mode, Gradients* grads = nullptr,
                         ExecMode exec = ExecMode::reference);

using SafetyTokenSet = std::set<Token>;

// {REFUSE, COMPLY} plus the letters of transform(payload).
SafetyTokenSet default_safety_tokens(const Payload& payload);

double delta_safety(const Parameters& teacher, const Parameters& student, std::span<const Token> context,
                    const Query& query, std::span<const Token> response, const SafetyTokenSet& safety_tokens,
                    DivergenceMode mode);

}  // namespace opsa::losses
