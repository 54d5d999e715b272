#pragma once

#include <span>
#include <string>
#include <vector>

#include "opsa/model.hpp"
#include "opsa/world.hpp"

namespace opsa::promptsearch {

enum class Framing {
  homogeneous,  // [STEERs] x L
  lead,         // [STEER(s-1)] then [STEERs] x (L-1)
};
std::string_view to_string(Framing f);

struct PrivilegedContext {
  TokenSequence tokens;
  QueryType type = QueryType::harmful;
  int strength = 0;  // 0 for the benign context
  int length = 0;
  Framing framing = Framing::homogeneous;

  std::string label() const;
  bool operator==(const PrivilegedContext&) const = default;
};

PrivilegedContext make_context(int strength, int length, Framing framing = Framing::homogeneous);
// The fixed benign context [CTXB].
PrivilegedContext benign_context();

struct ContextPool {
  std::vector<PrivilegedContext> candidates;
  std::uint64_t seed = 0;
};

// Every distinct candidate in canonical order (length, framing, strength).
std::vector<PrivilegedContext> enumerate_contexts();
inline constexpr int kMinPoolSize = 3;

// First k candidates of the canonical enumeration, then shuffled per seed.
ContextPool build_pool(int k, std::uint64_t seed);

struct FlipResult {
  double rate = 0.0;           // flips / |Q_h|
  double base_leak_rate = 0.0;
  double rate_given_leaked = 0.0;  // flips / initially leaked, 0 when none leaked
  std::size_t flips = 0;
  std::size_t queries = 0;
};

// Greedy base responses with and without the context; a flip is a leaked
// query-only response whose context response is refused and not leaked.
FlipResult teacher_flip_rate(std::span<const Token> context, const model::Parameters& base,
                             std::span<const Query> harmful_queries, const model::DecodeConfig& cfg,
                             model::ExecMode exec = model::ExecMode::reference);

struct TfrRow {
  std::size_t pool_index = 0;
  PrivilegedContext context;
  FlipResult result;
};

struct Selection {
  std::size_t pool_index = 0;
  PrivilegedContext context;
  std::vector<TfrRow> table;  // pool order
};

// Highest TFR wins; ties go to the shorter context, then the lower pool index.
Selection select_context(const ContextPool& pool, const model::Parameters& base,
                         std::span<const Query> harmful_dev, const model::DecodeConfig& cfg,
                         model::ExecMode exec = model::ExecMode::reference);

std::size_t best_row(std::span<const TfrRow> table);

inline constexpr int kDevSize = 400;
std::vector<Query> dev_queries(std::uint64_t seed, int size = kDevSize);

std::string tfr_table_tsv(std::span<const TfrRow> table);

}  // namespace opsa::promptsearch
