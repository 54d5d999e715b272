#include <doctest.h>

#include <cmath>

#include "opsa/diagnostics.hpp"
#include "opsa/error.hpp"
#include "opsa/train.hpp"

#include "fixtures.hpp"

using namespace opsa;
using namespace opsa::train;

using namespace opsa::testing;

namespace {

const losses::ContextPair& kContexts = strong_contexts();

}  // namespace

TEST_CASE("learning rate schedule") {
  OptimizerConfig c;
  const long total = 100;
  CHECK(lr_at(0, total, c) == 0.0);
  CHECK(lr_at(10, total, c) == doctest::Approx(c.peak_lr).epsilon(1e-12));
  CHECK(lr_at(55, total, c) == doctest::Approx(c.peak_lr / 2).epsilon(1e-9));
  CHECK(lr_at(total, total, c) == doctest::Approx(0.0).scale(1.0).epsilon(1e-15));
  CHECK(lr_at(0, 0, c) == 0.0);
  CHECK_THROWS_AS(lr_at(101, total, c), Error);
  CHECK_THROWS_AS(lr_at(-1, total, c), Error);
  int peaks = 0;
  double prev = 0.0;
  bool rising = true;
  for (long s = 1; s <= total; ++s) {
    const double lr = lr_at(s, total, c);
    CHECK(std::abs(lr - prev) <= c.peak_lr / 10 + 1e-15);
    if (rising && lr < prev) {
      rising = false;
      ++peaks;
    }
    if (!rising) CHECK(lr <= prev);
    prev = lr;
  }
  CHECK(peaks == 1);
}

TEST_CASE("one AdamW step by hand") {
  model::ModelConfig mc = small_model();
  TrainState s(model::init(mc));
  const model::Parameters before = s.params;
  model::Gradients g = s.params.tensors().zeros_like();
  const std::size_t w = s.params.tensors().index_of("head.weight");
  const std::size_t b = s.params.tensors().index_of("head.bias");
  g.tensor(w)[3] = 0.3;
  g.tensor(b)[1] = -0.4;
  OptimizerConfig c;
  const double norm = adamw_step(s, g, 0.01, c);
  CHECK(norm == doctest::Approx(0.5).epsilon(1e-14));
  const double pw = before.tensors().tensor(w)[3];
  CHECK(s.params.tensors().tensor(w)[3] == doctest::Approx(pw - 0.01 * (0.3 / (0.3 + 1e-8) + 0.01 * pw)).epsilon(1e-12));
  CHECK(s.params.tensors().tensor(b)[1] == doctest::Approx(0.01 * 0.4 / (0.4 + 1e-8)).epsilon(1e-12));
  const double pw0 = before.tensors().tensor(w)[0];
  CHECK(s.params.tensors().tensor(w)[0] == doctest::Approx(pw0 * (1 - 0.01 * 0.01)).epsilon(1e-14));

  g.tensor(w)[3] = 30.0;
  const double big = adamw_step(s, g, 0.01, c);
  CHECK(big > c.clip_norm);
  CHECK(s.params.tensors().all_finite());

  g.tensor(w)[0] = std::nan("");
  try {
    adamw_step(s, g, 0.01, c);
    FAIL("expected training error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::training);
    CHECK(std::string(e.what()).find("step 3") != std::string::npos);
  }
}

TEST_CASE("pretraining reduces NLL and is reproducible") {
  const auto corpus = make_pretrain_corpus(small_corpus());
  const auto r1 = pretrain_base(corpus, small_model(), fast(2));
  const auto r2 = pretrain_base(corpus, small_model(), fast(2));
  const auto r3 = pretrain_base(corpus, small_model(), fast(2), TrainOptions{model::ExecMode::parallel, "", "", {}});
  CHECK(r1.params.fingerprint() == r2.params.fingerprint());
  CHECK(r1.params.fingerprint() == r3.params.fingerprint());
  CHECK(r1.epoch_fingerprints.size() == 2);
  CHECK(r1.log.size() == static_cast<std::size_t>(2 * steps_per_epoch(corpus.size(), 32)));
  CHECK(r1.log.back().loss < r1.log.front().loss);
  CHECK(small_base().fingerprint() != model::init(small_model()).fingerprint());
}

TEST_CASE("zero epochs leave the base unchanged") {
  const auto& base = small_base();
  const auto prompts = few_prompts(8, 8);
  CHECK(train_opsa(base, prompts, kContexts, fast(0), OpsaOptions{}).train.params.fingerprint() == base.fingerprint());
  losses::SftExample ex{prompt_tokens({}, prompts[0].query), refuse_response()};
  SftDataset data;
  data.examples = {ex};
  CHECK(train_sft(base, data, fast(0)).params.fingerprint() == base.fingerprint());
}

TEST_CASE("SFT data filter keeps only refused harmful traces") {
  const auto& base = small_base();
  const auto prompts = few_prompts(24, 8);
  const auto data = build_sft_dataset(base, prompts, kContexts.harmful, model::DecodeConfig::sampled(3));
  CHECK(data.harmful_candidates == 24);
  CHECK(data.benign == 8);
  CHECK(data.examples.size() == data.harmful_kept + data.benign);
  for (std::size_t i = 0; i < data.examples.size(); ++i) {
    const auto& p = data.prompts[i];
    CHECK(data.examples[i].prompt == prompt_tokens({}, p.query));
    if (p.label == QueryType::harmful) {
      const Verdict v = judge(p.query, data.examples[i].response);
      CHECK(v.refused);
      CHECK_FALSE(v.leaked);
    }
  }

  // A context under which nothing refuses empties the harmful side.
  model::Parameters mute = base;
  auto bias = mute.mutable_tensors().tensor(std::string_view("head.bias"));
  bias[tok::REFUSE] = -50.0;
  try {
    build_sft_dataset(mute, prompts, kContexts.harmful, model::DecodeConfig::sampled(3));
    FAIL("expected empty filter error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::empty_input);
    CHECK(std::string(e.what()).find("pass rate") != std::string::npos);
  }
}

TEST_CASE("SFT training lowers training loss deterministically") {
  const auto& base = small_base();
  const auto data = build_sft_dataset(base, few_prompts(24, 24), kContexts.harmful, model::DecodeConfig::sampled(3));
  const double before = mean_nll(base, data.examples);
  const auto a = train_sft(base, data, fast(3, 16));
  const auto b = train_sft(base, data, fast(3, 16));
  CHECK(a.params.fingerprint() == b.params.fingerprint());
  CHECK(mean_nll(a.params, data.examples) < before);
}

TEST_CASE("OPSA keeps the teacher frozen and every rollout on-policy") {
  const auto& base = small_base();
  const std::string base_fp = base.fingerprint();
  const auto prompts = few_prompts(12, 12);
  OpsaOptions o;
  o.keep_step_snapshots = true;
  const auto r = train_opsa(base, prompts, kContexts, fast(2, 8), o);
  CHECK(r.teacher_fingerprint_before == r.teacher_fingerprint_after);
  CHECK(r.teacher_fingerprint_before == base_fp);
  CHECK(base.fingerprint() == base_fp);
  REQUIRE(r.step_snapshots.size() == r.rollout_log.size());
  CHECK(r.rollout_log.size() == 6);
  for (std::size_t s = 0; s < r.rollout_log.size(); ++s) {
    const auto& step = r.rollout_log[s];
    CHECK(step.student_fingerprint == r.step_snapshots[s].fingerprint());
    for (std::size_t i = 0; i < step.rollouts.size(); i += 3) {
      const auto& ro = step.rollouts[i];
      CHECK(ro.seed == rollout_seed(5, step.step, i));
      model::DecodeConfig cfg = o.rollout;
      cfg.seed = ro.seed;
      CHECK(model::decode(r.step_snapshots[s], prompt_tokens({}, ro.query), cfg) == ro.response);
    }
  }
  CHECK(r.rollout_log[1].student_fingerprint != r.rollout_log[0].student_fingerprint);
  const auto again = train_opsa(base, prompts, kContexts, fast(2, 8), OpsaOptions{});
  CHECK(again.train.params.fingerprint() == r.train.params.fingerprint());
}

TEST_CASE("OPSA narrows the gap to the privileged teacher on held-out probes") {
  const auto& base = small_base();
  const auto r = train_opsa(base, few_prompts(48, 48), kContexts, fast(3, 16), OpsaOptions{});
  const auto rollouts = diagnostics::make_rollout_set(base, 60, 42);
  auto mean_kl = [&](const model::Parameters& student) {
    return *diagnostics::entry_mean(diagnostics::profile(base, kContexts, student, rollouts), 0, 1000);
  };
  CHECK(mean_kl(r.train.params) < mean_kl(base));
}

TEST_CASE("a rollout carrying context tokens aborts OPSA at its step") {
  model::Parameters leaky = small_base();
  leaky.mutable_tensors().tensor(std::string_view("head.bias"))[tok::steer(1)] = 50.0;
  try {
    train_opsa(leaky, few_prompts(4, 4), kContexts, fast(1, 8), OpsaOptions{});
    FAIL("expected contaminated rollout");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::contaminated_rollout);
    CHECK(e.message().find("STEER1") != std::string::npos);
    CHECK(e.message().find("(step 1)") != std::string::npos);
  }
}

TEST_CASE("invalid optimizer settings are rejected") {
  OptimizerConfig c;
  c.batch_size = 0;
  CHECK_THROWS_AS(c.validate(), Error);
  OptimizerConfig d;
  d.peak_lr = -1.0;
  CHECK_THROWS_AS(d.validate(), Error);
  CHECK(OptimizerConfig::from_json(OptimizerConfig{}.to_json()).to_json() == OptimizerConfig{}.to_json());
}
