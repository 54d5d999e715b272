#include "opsa/promptsearch.hpp"

#include <algorithm>
#include <set>
#include <sstream>

#include "opsa/error.hpp"
#include "opsa/parallel.hpp"

namespace opsa::promptsearch {

std::string_view to_string(Framing f) { return f == Framing::lead ? "lead" : "homogeneous"; }

std::string PrivilegedContext::label() const { return Vocabulary::render(tokens); }

PrivilegedContext make_context(int strength, int length, Framing framing) {
  if (strength < 1 || strength > tok::kNumSteer) throw Error(ErrorKind::config, "steer strength outside 1..5");
  if (length < 1 || length > 4) throw Error(ErrorKind::config, "context length outside 1..4");
  PrivilegedContext c;
  c.type = QueryType::harmful;
  c.strength = strength;
  c.length = length;
  c.framing = framing;
  if (framing == Framing::lead) {
    if (strength < 2 || length < 2) throw Error(ErrorKind::config, "lead framing needs strength >= 2 and length >= 2");
    c.tokens.push_back(tok::steer(strength - 1));
    c.tokens.insert(c.tokens.end(), static_cast<std::size_t>(length - 1), tok::steer(strength));
  } else {
    c.tokens.assign(static_cast<std::size_t>(length), tok::steer(strength));
  }
  return c;
}

PrivilegedContext benign_context() {
  PrivilegedContext c;
  c.tokens = {tok::CTXB};
  c.type = QueryType::benign;
  c.length = 1;
  return c;
}

std::vector<PrivilegedContext> enumerate_contexts() {
  std::vector<PrivilegedContext> out;
  std::set<TokenSequence> seen;
  for (int length = 1; length <= 4; ++length) {
    for (Framing framing : {Framing::homogeneous, Framing::lead}) {
      for (int strength = 1; strength <= tok::kNumSteer; ++strength) {
        if (framing == Framing::lead && (strength < 2 || length < 2)) continue;
        PrivilegedContext c = make_context(strength, length, framing);
        if (seen.insert(c.tokens).second) out.push_back(std::move(c));
      }
    }
  }
  return out;
}

ContextPool build_pool(int k, std::uint64_t seed) {
  auto all = enumerate_contexts();
  if (k < kMinPoolSize) throw Error(ErrorKind::config, "pool size must be at least 3");
  if (k > static_cast<int>(all.size())) {
    throw Error(ErrorKind::config, "pool size " + std::to_string(k) + " exceeds the maximum of " +
                                       std::to_string(all.size()));
  }
  all.resize(static_cast<std::size_t>(k));
  Rng rng(derive_seed(seed, 301));
  shuffle_in_place(all, rng);
  return {std::move(all), seed};
}

namespace {

void check_flip_inputs(std::span<const Query> queries, const model::DecodeConfig& cfg) {
  if (queries.empty()) throw Error(ErrorKind::empty_input, "empty harmful query set");
  if (cfg.mode != model::DecodeConfig::Mode::greedy) throw Error(ErrorKind::config, "flip rate needs greedy decoding");
  for (const auto& q : queries) {
    if (q.type != QueryType::harmful) throw Error(ErrorKind::type_mismatch, "flip rate query is not harmful");
  }
}

std::vector<char> plain_leaks(const model::Parameters& base, std::span<const Query> queries,
                              const model::DecodeConfig& cfg, model::ExecMode exec) {
  std::vector<char> leaked(queries.size(), 0);
  for_each_index(queries.size(), exec, [&](std::size_t i) {
    leaked[i] = judge(queries[i], model::decode(base, prompt_tokens({}, queries[i]), cfg)).leaked;
  });
  return leaked;
}

FlipResult flips_given(std::span<const Token> context, const model::Parameters& base, std::span<const Query> queries,
                       const model::DecodeConfig& cfg, model::ExecMode exec, const std::vector<char>& leaked) {
  std::vector<char> flipped(queries.size(), 0);
  for_each_index(queries.size(), exec, [&](std::size_t i) {
    if (!leaked[i]) return;
    const Verdict steered = judge(queries[i], model::decode(base, prompt_tokens(context, queries[i]), cfg));
    flipped[i] = steered.refused && !steered.leaked;
  });
  FlipResult r;
  r.queries = queries.size();
  const auto n_leaked = static_cast<std::size_t>(std::count(leaked.begin(), leaked.end(), 1));
  r.flips = static_cast<std::size_t>(std::count(flipped.begin(), flipped.end(), 1));
  r.rate = static_cast<double>(r.flips) / static_cast<double>(r.queries);
  r.base_leak_rate = static_cast<double>(n_leaked) / static_cast<double>(r.queries);
  r.rate_given_leaked = n_leaked ? static_cast<double>(r.flips) / static_cast<double>(n_leaked) : 0.0;
  return r;
}

}  // namespace

FlipResult teacher_flip_rate(std::span<const Token> context, const model::Parameters& base,
                             std::span<const Query> harmful_queries, const model::DecodeConfig& cfg,
                             model::ExecMode exec) {
  check_flip_inputs(harmful_queries, cfg);
  return flips_given(context, base, harmful_queries, cfg, exec, plain_leaks(base, harmful_queries, cfg, exec));
}

std::size_t best_row(std::span<const TfrRow> table) {
  if (table.empty()) throw Error(ErrorKind::empty_input, "empty TFR table");
  std::size_t best = 0;
  for (std::size_t i = 1; i < table.size(); ++i) {
    const auto& a = table[i];
    const auto& b = table[best];
    if (a.result.rate != b.result.rate) {
      if (a.result.rate > b.result.rate) best = i;
    } else if (a.context.tokens.size() != b.context.tokens.size()) {
      if (a.context.tokens.size() < b.context.tokens.size()) best = i;
    } else if (a.pool_index < b.pool_index) {
      best = i;
    }
  }
  return best;
}

Selection select_context(const ContextPool& pool, const model::Parameters& base,
                         std::span<const Query> harmful_dev, const model::DecodeConfig& cfg,
                         model::ExecMode exec) {
  if (pool.candidates.empty()) throw Error(ErrorKind::empty_input, "empty context pool");
  check_flip_inputs(harmful_dev, cfg);
  const auto leaked = plain_leaks(base, harmful_dev, cfg, exec);
  Selection s;
  for (std::size_t i = 0; i < pool.candidates.size(); ++i) {
    const auto& c = pool.candidates[i];
    s.table.push_back({i, c, flips_given(c.tokens, base, harmful_dev, cfg, exec, leaked)});
  }
  const std::size_t b = best_row(s.table);
  s.pool_index = s.table[b].pool_index;
  s.context = s.table[b].context;
  return s;
}

std::vector<Query> dev_queries(std::uint64_t seed, int size) {
  return sample_queries(Split::dev, QueryType::harmful, size, derive_seed(seed, 302));
}

std::string tfr_table_tsv(std::span<const TfrRow> table) {
  std::ostringstream os;
  os << "id\tcontext\tstrength\tlength\tframing\ttfr\tbase_leak\ttfr_given_leaked\n";
  for (const auto& r : table) {
    os << r.pool_index << '\t' << r.context.label() << '\t' << r.context.strength << '\t' << r.context.length << '\t'
       << to_string(r.context.framing) << '\t' << r.result.rate << '\t' << r.result.base_leak_rate << '\t'
       << r.result.rate_given_leaked << '\n';
  }
  return os.str();
}

}  // namespace opsa::promptsearch
