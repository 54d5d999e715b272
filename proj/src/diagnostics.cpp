#include "opsa/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <sstream>

#include "opsa/error.hpp"
#include "opsa/parallel.hpp"

namespace opsa::diagnostics {

std::string rollout_set_id(std::span<const losses::Rollout> rollouts) {
  Fnv1a h;
  for (const auto& r : rollouts) {
    h.update(render_query(r.query));
    h.update(Vocabulary::render(r.response));
    h.update_values(std::span<const std::uint64_t>(&r.seed, 1));
  }
  return h.hex();
}

RolloutSet make_rollout_set(const model::Parameters& policy, int count, std::uint64_t seed, model::ExecMode exec) {
  const auto queries = sample_queries(Split::diagnostics, QueryType::harmful, count, derive_seed(seed, 401));
  RolloutSet set;
  set.rollouts.resize(queries.size());
  for_each_index(queries.size(), exec, [&](std::size_t i) {
    const std::uint64_t s = derive_seed(derive_seed(seed, 402), i);
    set.rollouts[i] = {queries[i], queries[i].type,
                       model::decode(policy, prompt_tokens({}, queries[i]), model::DecodeConfig::sampled(s)), s};
  });
  set.id = rollout_set_id(set.rollouts);
  return set;
}

KLProfile profile(const model::Parameters& teacher, const losses::ContextPair& contexts,
                  const model::Parameters& student, const RolloutSet& rollouts, model::ExecMode exec) {
  const auto mode = losses::DivergenceMode::mix(0.5);
  std::vector<std::vector<KLEntry>> per(rollouts.rollouts.size());
  for_each_index(rollouts.rollouts.size(), exec, [&](std::size_t i) {
    const auto& r = rollouts.rollouts[i];
    losses::check_rollout(r);
    const auto pair = losses::align(student, teacher, losses::context_for(r, contexts), r.query, r.response);
    if (pair.student.length != r.response.size() || pair.teacher.length != r.response.size()) {
      throw Error(ErrorKind::shape, "aligned pair does not cover the rollout");
    }
    for (std::size_t t = 0; t < r.response.size(); ++t) {
      per[i].push_back({i, t, r.response[t], losses::token_kl(pair.teacher.row(t), pair.student.row(t), mode)});
    }
  });
  KLProfile p;
  p.teacher_id = teacher.fingerprint();
  p.student_id = student.fingerprint();
  p.rollout_set_id = rollouts.id;
  for (auto& v : per) p.entries.insert(p.entries.end(), v.begin(), v.end());
  return p;
}

std::size_t max_position(const KLProfile& p) {
  std::size_t m = 0;
  for (const auto& e : p.entries) m = std::max(m, e.position + 1);
  return m;
}

std::vector<std::optional<double>> position_curve(const KLProfile& p, std::size_t max_pos) {
  std::vector<double> sum(max_pos, 0.0);
  std::vector<std::size_t> n(max_pos, 0);
  for (const auto& e : p.entries) {
    if (e.position < max_pos) {
      sum[e.position] += e.kl;
      ++n[e.position];
    }
  }
  std::vector<std::optional<double>> out(max_pos);
  for (std::size_t i = 0; i < max_pos; ++i) {
    if (n[i]) out[i] = sum[i] / static_cast<double>(n[i]);
  }
  return out;
}

std::optional<double> window_mean(std::span<const std::optional<double>> curve, std::size_t lo, std::size_t hi) {
  double sum = 0.0;
  std::size_t n = 0;
  for (std::size_t i = lo; i < std::min(hi, curve.size()); ++i) {
    if (curve[i]) {
      sum += *curve[i];
      ++n;
    }
  }
  if (!n) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::optional<double> entry_mean(const KLProfile& p, std::size_t lo, std::size_t hi) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& e : p.entries) {
    if (e.position >= lo && e.position < hi) {
      sum += e.kl;
      ++n;
    }
  }
  if (!n) return std::nullopt;
  return sum / static_cast<double>(n);
}

std::vector<TokenDecomposition> token_decomposition(const KLProfile& p, std::size_t min_count, std::size_t top_k) {
  if (min_count < 1) throw Error(ErrorKind::config, "min_count must be at least 1");
  const auto curve = position_curve(p, max_position(p));
  struct Acc {
    double kl = 0.0;
    double base = 0.0;
    std::size_t n = 0;
  };
  std::map<Token, Acc> acc;
  for (const auto& e : p.entries) {
    auto& a = acc[e.token];
    a.kl += e.kl;
    a.base += *curve[e.position];
    ++a.n;
  }
  std::vector<TokenDecomposition> out;
  for (const auto& [token, a] : acc) {
    if (a.n < min_count) continue;
    TokenDecomposition d;
    d.token = token;
    d.count = a.n;
    d.observed = a.kl / static_cast<double>(a.n);
    d.baseline = a.base / static_cast<double>(a.n);
    d.residual = d.observed - d.baseline;
    out.push_back(d);
  }
  std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.observed > b.observed; });
  if (out.size() > top_k) out.resize(top_k);
  return out;
}

std::vector<double> ranks(std::span<const double> xs) {
  std::vector<std::size_t> order(xs.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
    for (std::size_t k = i; k <= j; ++k) r[order[k]] = avg;
    i = j + 1;
  }
  return r;
}

double spearman_rho(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw Error(ErrorKind::shape, "rank correlation over sequences of different length");
  if (xs.size() < 2) throw Error(ErrorKind::empty_input, "rank correlation needs at least two points");
  const auto rx = ranks(xs);
  const auto ry = ranks(ys);
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) throw Error(ErrorKind::numeric, "rank correlation undefined for constant input");
  return sxy / std::sqrt(sxx * syy);
}

namespace {
void header(std::ostream& os, const KLProfile& p) {
  os << "# teacher=" << p.teacher_id << " student=" << p.student_id << " rollouts=" << p.rollout_set_id << '\n';
}
}  // namespace

std::string profile_tsv(const KLProfile& p) {
  std::ostringstream os;
  os.precision(17);
  header(os, p);
  os << "rollout\tposition\ttoken\tkl\n";
  for (const auto& e : p.entries) {
    os << e.rollout << '\t' << e.position << '\t' << Vocabulary::name(e.token) << '\t' << e.kl << '\n';
  }
  return os.str();
}

std::string decomposition_tsv(const KLProfile& p, std::span<const TokenDecomposition> rows) {
  std::ostringstream os;
  os.precision(17);
  header(os, p);
  os << "token\tcount\tobserved\tbaseline\tresidual\n";
  for (const auto& d : rows) {
    os << Vocabulary::name(d.token) << '\t' << d.count << '\t' << d.observed << '\t' << d.baseline << '\t'
       << d.residual << '\n';
  }
  return os.str();
}

std::string plot_data_tsv(std::span<const std::optional<double>> curve, std::span<const TokenDecomposition> rows) {
  std::ostringstream os;
  os.precision(17);
  os << "position\tmean\n";
  for (std::size_t i = 0; i < curve.size(); ++i) {
    if (curve[i]) os << i << '\t' << *curve[i] << '\n';
  }
  os << "\ntoken\tbaseline\tresidual\n";
  for (const auto& d : rows) os << Vocabulary::name(d.token) << '\t' << d.baseline << '\t' << d.residual << '\n';
  return os.str();
}

}  // namespace opsa::diagnostics
