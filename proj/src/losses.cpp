#include "opsa/losses.hpp"

#include <algorithm>
#include <cmath>

#include "opsa/error.hpp"

namespace opsa::losses {

DivergenceMode DivergenceMode::parse(std::string_view name) {
  if (name == "forward") return forward();
  if (name == "reverse") return reverse();
  if (name == "mix") return mix(0.5);
  throw Error(ErrorKind::config, "unknown divergence '" + std::string(name) + "'");
}

double DivergenceMode::forward_weight() const {
  switch (kind) {
    case Kind::forward: return 1.0;
    case Kind::reverse: return 0.0;
    case Kind::mix: return alpha;
  }
  return alpha;
}

std::string DivergenceMode::name() const {
  switch (kind) {
    case Kind::forward: return "forward";
    case Kind::reverse: return "reverse";
    case Kind::mix: return "mix";
  }
  return "mix";
}

void DivergenceMode::validate() const {
  if (kind == Kind::mix && !(alpha >= 0.0 && alpha <= 1.0)) throw Error(ErrorKind::config, "alpha outside [0,1]");
}

namespace {

double floored(double lp) { return std::max(lp, kLogProbFloor); }

struct KLParts {
  double forward = 0.0;  // KL(teacher || student)
  double reverse = 0.0;  // KL(student || teacher)
};

KLParts kl_parts(std::span<const double> teacher, std::span<const double> student) {
  if (teacher.size() != student.size()) throw Error(ErrorKind::shape, "distributions over different vocabularies");
  KLParts k;
  for (std::size_t j = 0; j < teacher.size(); ++j) {
    const double lt = floored(teacher[j]);
    const double ls = floored(student[j]);
    k.forward += std::exp(lt) * (lt - ls);
    k.reverse += std::exp(ls) * (ls - lt);
  }
  // Round-off can leave tiny negatives at equality.
  k.forward = std::max(k.forward, 0.0);
  k.reverse = std::max(k.reverse, 0.0);
  return k;
}

double combine(const KLParts& k, DivergenceMode mode) {
  switch (mode.kind) {
    case DivergenceMode::Kind::forward: return k.forward;
    case DivergenceMode::Kind::reverse: return k.reverse;
    case DivergenceMode::Kind::mix: return mode.alpha * k.forward + (1.0 - mode.alpha) * k.reverse;
  }
  return 0.0;
}

void check_context_types(const ContextPair& contexts) {
  for (Token t : contexts.harmful) {
    if (t == tok::CTXB) throw Error(ErrorKind::type_mismatch, "harmful context contains the benign steer symbol");
  }
  for (Token t : contexts.benign) {
    if (tok::is_steer(t)) throw Error(ErrorKind::type_mismatch, "benign context contains a refusal steer symbol");
  }
}

// Input sequence covering every response prediction: prompt + y[0..n-2].
TokenSequence scored_input(std::span<const Token> prompt, std::span<const Token> response) {
  TokenSequence seq(prompt.begin(), prompt.end());
  if (!response.empty()) seq.insert(seq.end(), response.begin(), response.end() - 1);
  return seq;
}

}  // namespace

double token_kl(std::span<const double> teacher, std::span<const double> student, DivergenceMode mode) {
  return combine(kl_parts(teacher, student), mode);
}

double token_kl(const model::Distribution& teacher, const model::Distribution& student, DivergenceMode mode) {
  return token_kl(teacher.logp, student.logp, mode);
}

double token_kl_backward(std::span<const double> teacher, std::span<const double> student, DivergenceMode mode,
                         double weight, std::span<double> dlogits) {
  const KLParts k = kl_parts(teacher, student);
  const double wf = mode.forward_weight();
  const double wr = 1.0 - wf;
  for (std::size_t j = 0; j < teacher.size(); ++j) {
    const double lt = floored(teacher[j]);
    const double ls = floored(student[j]);
    const double s = std::exp(student[j]);
    const double t = std::exp(teacher[j]);
    // d KL(T||S)/dz = s - t ; d KL(S||T)/dz = s (log s - log t - KL(S||T))
    const double g = wf * (s - t) + wr * s * (ls - lt - k.reverse);
    dlogits[j] += weight * g;
  }
  return combine(k, mode);
}

// ---------------------------------------------------------------------------

std::size_t response_token_count(std::span<const SftExample> dataset) {
  std::size_t n = 0;
  for (const auto& ex : dataset) n += ex.response.size();
  return n;
}

double sft_nll(const Parameters& params, std::span<const SftExample> dataset, Gradients* grads, ExecMode mode) {
  const std::size_t V = static_cast<std::size_t>(params.config().vocab_size);
  auto item = [&](std::size_t i, Gradients* g) {
    const SftExample& ex = dataset[i];
    if (ex.prompt.empty()) throw Error(ErrorKind::empty_input, "empty prompt in SFT pair");
    const TokenSequence seq = scored_input(ex.prompt, ex.response);
    if (seq.size() > static_cast<std::size_t>(params.config().context_length)) {
      throw Error(ErrorKind::length, "SFT pair exceeds context length");
    }
    const model::ForwardTrace trace = model::forward_trace(params, seq);
    const std::size_t first = ex.prompt.size() - 1;
    double loss = 0.0;
    std::vector<double> dlogits;
    if (g) dlogits.assign(seq.size() * V, 0.0);
    for (std::size_t t = 0; t < ex.response.size(); ++t) {
      const auto lp = trace.logprobs(first + t);
      const auto y = static_cast<std::size_t>(ex.response[t]);
      loss -= lp[y];
      if (g) {
        double* d = dlogits.data() + (first + t) * V;
        for (std::size_t j = 0; j < V; ++j) d[j] += std::exp(lp[j]);
        d[y] -= 1.0;
      }
    }
    if (g) model::backward(params, trace, dlogits, *g);
    return loss;
  };
  return model::accumulate_ordered(dataset.size(), params.tensors(), item, grads, mode);
}

// ---------------------------------------------------------------------------

void check_rollout(const Rollout& r) {
  for (Token t : r.response) {
    if (tok::is_context(t)) {
      throw Error(ErrorKind::contaminated_rollout,
                  "rollout for " + render_query(r.query) + " contains context token " + std::string(Vocabulary::name(t)));
    }
    if (t == tok::BOS) throw Error(ErrorKind::contaminated_rollout, "rollout contains BOS");
  }
  if (r.label != classify_query(r.query.payload)) {
    throw Error(ErrorKind::type_mismatch, "rollout label disagrees with the query type");
  }
}

const TokenSequence& context_for(const Rollout& r, const ContextPair& contexts) {
  return r.label == QueryType::harmful ? contexts.harmful : contexts.benign;
}

AlignedPair align(const Parameters& student, const Parameters& teacher, std::span<const Token> context,
                  const Query& query, std::span<const Token> response) {
  const TokenSequence sp = prompt_tokens({}, query);
  const TokenSequence tp = prompt_tokens(context, query);
  const model::LogProbs s = model::forward_logprobs(student, scored_input(sp, response));
  const model::LogProbs t = model::forward_logprobs(teacher, scored_input(tp, response));
  AlignedPair out;
  const std::size_t n = response.size();
  auto slice = [n](const model::LogProbs& lp, std::size_t first) {
    model::LogProbs r;
    r.length = n;
    r.vocab = lp.vocab;
    r.values.assign(lp.values.begin() + static_cast<long>(first * lp.vocab),
                    lp.values.begin() + static_cast<long>((first + n) * lp.vocab));
    return r;
  };
  out.student = slice(s, sp.size() - 1);
  out.teacher = slice(t, tp.size() - 1);
  return out;
}

OpsaValue opsa_objective(const Parameters& student, const Parameters& teacher, std::span<const Rollout> batch,
                         const ContextPair& contexts, DivergenceMode mode, Gradients* grads, ExecMode exec) {
  mode.validate();
  check_context_types(contexts);
  for (const auto& r : batch) check_rollout(r);
  if (student.config().vocab_size != teacher.config().vocab_size) {
    throw Error(ErrorKind::shape, "teacher and student vocabularies differ");
  }
  const std::size_t V = static_cast<std::size_t>(student.config().vocab_size);
  std::vector<std::vector<KLRecord>> per(batch.size());

  auto item = [&](std::size_t i, Gradients* g) {
    const Rollout& r = batch[i];
    const TokenSequence& ctx = context_for(r, contexts);
    const TokenSequence sp = prompt_tokens({}, r.query);
    const TokenSequence tp = prompt_tokens(ctx, r.query);
    const model::LogProbs tlp = model::forward_logprobs(teacher, scored_input(tp, r.response));
    const TokenSequence sseq = scored_input(sp, r.response);
    const model::ForwardTrace strace = model::forward_trace(student, sseq);
    std::vector<double> dlogits;
    if (g) dlogits.assign(sseq.size() * V, 0.0);
    double sum = 0.0;
    per[i].reserve(r.response.size());
    for (std::size_t t = 0; t < r.response.size(); ++t) {
      const auto trow = tlp.row(tp.size() - 1 + t);
      const auto srow = strace.logprobs(sp.size() - 1 + t);
      double kl;
      if (g) {
        kl = token_kl_backward(trow, srow, mode, 1.0,
                               std::span<double>(dlogits.data() + (sp.size() - 1 + t) * V, V));
      } else {
        kl = token_kl(trow, srow, mode);
      }
      sum += kl;
      per[i].push_back({i, t, r.response[t], kl});
    }
    if (g) model::backward(student, strace, dlogits, *g);
    return sum;
  };

  OpsaValue out;
  out.value = model::accumulate_ordered(batch.size(), student.tensors(), item, grads, exec);
  for (auto& p : per) {
    out.tokens += p.size();
    out.records.insert(out.records.end(), p.begin(), p.end());
  }
  return out;
}

SafetyTokenSet default_safety_tokens(const Payload& payload) {
  SafetyTokenSet s{tok::REFUSE, tok::COMPLY};
  for (Token t : transform(payload)) s.insert(t);
  return s;
}

double delta_safety(const Parameters& teacher, const Parameters& student, std::span<const Token> context,
                    const Query& query, std::span<const Token> response, const SafetyTokenSet& safety_tokens,
                    DivergenceMode mode) {
  Rollout r{query, query.type, TokenSequence(response.begin(), response.end())};
  check_rollout(r);
  for (Token t : context) {
    if (query.type == QueryType::harmful && t == tok::CTXB) {
      throw Error(ErrorKind::type_mismatch, "harmful query paired with the benign context");
    }
  }
  const AlignedPair pair = align(student, teacher, context, query, response);
  double sum = 0.0;
  for (std::size_t t = 0; t < response.size(); ++t) {
    if (safety_tokens.count(response[t])) sum += token_kl(pair.teacher.row(t), pair.student.row(t), mode);
  }
  return sum;
}

}  // namespace opsa::losses
