#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opsa/losses.hpp"
#include "opsa/model.hpp"

namespace opsa::diagnostics {

struct RolloutSet {
  std::string id;
  std::vector<losses::Rollout> rollouts;
};

inline constexpr int kDefaultRollouts = 500;
inline constexpr std::uint64_t kDefaultRolloutSeed = 42;

// Sampled query-only rollouts from one policy over harmful probes from the
// diagnostics split. The id hashes every rollout.
RolloutSet make_rollout_set(const model::Parameters& policy, int count = kDefaultRollouts,
                            std::uint64_t seed = kDefaultRolloutSeed,
                            model::ExecMode exec = model::ExecMode::reference);
std::string rollout_set_id(std::span<const losses::Rollout> rollouts);

struct KLEntry {
  std::size_t rollout = 0;
  std::size_t position = 0;
  Token token = 0;
  double kl = 0.0;
  bool operator==(const KLEntry&) const = default;
};

struct KLProfile {
  std::vector<KLEntry> entries;
  std::string teacher_id;
  std::string student_id;
  std::string rollout_set_id;
};

// Symmetric (equal-weight mix) KL at every response position; the teacher
// sees the type-matched context, the student sees the query only.
KLProfile profile(const model::Parameters& teacher, const losses::ContextPair& contexts,
                  const model::Parameters& student, const RolloutSet& rollouts,
                  model::ExecMode exec = model::ExecMode::reference);

// Mean KL at each position < max_pos; positions without entries are empty.
std::vector<std::optional<double>> position_curve(const KLProfile& p, std::size_t max_pos);
std::size_t max_position(const KLProfile& p);

// Mean of the present curve values in [lo, hi); empty when none are present.
std::optional<double> window_mean(std::span<const std::optional<double>> curve, std::size_t lo, std::size_t hi);

// Mean KL over entries with lo <= position < hi.
std::optional<double> entry_mean(const KLProfile& p, std::size_t lo, std::size_t hi);

struct TokenDecomposition {
  Token token = 0;
  std::size_t count = 0;
  double observed = 0.0;
  double baseline = 0.0;
  double residual = 0.0;
};

std::vector<TokenDecomposition> token_decomposition(const KLProfile& p, std::size_t min_count, std::size_t top_k);

// Average ranks on ties.
std::vector<double> ranks(std::span<const double> xs);
double spearman_rho(std::span<const double> xs, std::span<const double> ys);

std::string profile_tsv(const KLProfile& p);
std::string decomposition_tsv(const KLProfile& p, std::span<const TokenDecomposition> rows);
// (position, mean) rows followed by (token, baseline, residual) rows.
std::string plot_data_tsv(std::span<const std::optional<double>> curve, std::span<const TokenDecomposition> rows);

}  // namespace opsa::diagnostics
