#include "opsa/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "opsa/error.hpp"

namespace opsa::harness {

using nlohmann::ordered_json;

namespace {

ordered_json parse(const std::string& text) { return ordered_json::parse(text); }

ordered_json mode_json(const losses::DivergenceMode& m) {
  ordered_json j;
  j["kind"] = m.name();
  j["alpha"] = m.alpha;
  return j;
}

losses::DivergenceMode mode_from(const nlohmann::json& j) {
  auto m = losses::DivergenceMode::parse(j.at("kind").get<std::string>());
  if (m.kind == losses::DivergenceMode::Kind::mix) m.alpha = j.value("alpha", 0.5);
  return m;
}

ordered_json prompts_json(const PromptSetSpec& p) {
  ordered_json j;
  j["harmful_plain"] = p.harmful_plain;
  j["harmful_wrapped"] = p.harmful_wrapped;
  j["benign_plain"] = p.benign_plain;
  j["benign_wrapped"] = p.benign_wrapped;
  return j;
}

std::vector<LabeledPrompt> alignment_prompts(const ExperimentConfig& cfg, std::uint64_t seed) {
  PromptSetSpec spec = cfg.prompts;
  spec.seed = seed;
  return make_alignment_prompts(spec);
}

bool progress_log(bool* set = nullptr) {
  static bool enabled = false;
  if (set) enabled = *set;
  return enabled;
}

template <class Fn>
auto stage(const std::string& name, std::map<std::string, double>& timings, Fn&& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  auto finish = [&] {
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    timings[name] += secs;
    if (progress_log()) fmt::print(stderr, "[{}] {:.1f}s\n", name, secs);
  };
  try {
    if constexpr (std::is_void_v<decltype(fn())>) {
      fn();
      finish();
    } else {
      auto out = fn();
      finish();
      return out;
    }
  } catch (const Error& e) {
    throw Error(e.kind(), "stage '" + name + "' failed: " + e.message());
  } catch (const std::exception& e) {
    throw Error(ErrorKind::training, "stage '" + name + "' failed: " + e.what());
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// configuration

ExperimentConfig::ExperimentConfig() {
  pretrain.epochs = 6;
  pretrain.batch_size = 64;
  pretrain.seed = 17;
}

void ExperimentConfig::validate() const {
  world.validate();
  model.validate();
  pretrain.validate();
  align.validate();
  divergence.validate();
  if (seeds.empty()) throw Error(ErrorKind::config, "seed list is empty");
  if (prompts.harmful_plain < 0 || prompts.harmful_wrapped < 0 || prompts.benign_plain < 0 ||
      prompts.benign_wrapped < 0) {
    throw Error(ErrorKind::config, "prompt counts must be non-negative");
  }
  if (suite_size < 1) throw Error(ErrorKind::config, "suite size must be positive");
  if (dev_size < 1) throw Error(ErrorKind::config, "dev size must be positive");
  if (capability_k < 1 || safety_samples < 1) throw Error(ErrorKind::config, "sample counts must be positive");
  if (attacks.behaviors < 1 || attacks.prefill_samples < 1 || attacks.template_samples < 1) {
    throw Error(ErrorKind::config, "attack budgets must be positive");
  }
  if (attacks.prefix.empty()) throw Error(ErrorKind::config, "prefill prefix is empty");
  if (diagnostic_rollouts < 1) throw Error(ErrorKind::config, "diagnostic rollout count must be positive");
}

std::string ExperimentConfig::identity_json() const {
  ordered_json j;
  j["world"] = parse(world.to_json());
  j["model"] = parse(model.to_json());
  j["pretrain"] = parse(pretrain.to_json());
  j["align"] = parse(align.to_json());
  j["divergence"] = mode_json(divergence);
  j["pool_size"] = pool_size;
  j["pool_seed"] = pool_seed;
  j["dev_size"] = dev_size;
  j["prompts"] = prompts_json(prompts);
  j["suite_size"] = suite_size;
  j["suite_seed"] = suite_seed;
  j["attacks"]["behaviors"] = attacks.behaviors;
  j["attacks"]["prefill_samples"] = attacks.prefill_samples;
  j["attacks"]["template_samples"] = attacks.template_samples;
  j["attacks"]["prefix"] = Vocabulary::render(attacks.prefix);
  j["capability_k"] = capability_k;
  j["safety_samples"] = safety_samples;
  j["diagnostic_rollouts"] = diagnostic_rollouts;
  j["diagnostic_seed"] = diagnostic_seed;
  j["seeds"] = seeds;
  j["select_checkpoint"] = select_checkpoint;
  j["run_attacks"] = run_attacks;
  j["run_diagnostics"] = run_diagnostics;
  return j.dump();
}

std::string ExperimentConfig::to_json() const {
  ordered_json j = parse(identity_json());
  j["output_dir"] = output_dir;
  j["cache_dir"] = cache_dir;
  j["exec"] = exec == model::ExecMode::parallel ? "parallel" : "reference";
  return j.dump(2);
}

ExperimentConfig ExperimentConfig::from_json(std::string_view text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::config, std::string("malformed config: ") + e.what());
  }
  ExperimentConfig c;
  try {
    if (j.contains("world")) c.world = CorpusSpec::from_json(j["world"].dump());
    if (j.contains("model")) c.model = model::ModelConfig::from_json(j["model"].dump());
    if (j.contains("pretrain")) c.pretrain = train::OptimizerConfig::from_json(j["pretrain"].dump());
    if (j.contains("align")) c.align = train::OptimizerConfig::from_json(j["align"].dump());
    if (j.contains("divergence")) c.divergence = mode_from(j["divergence"]);
    c.pool_size = j.value("pool_size", c.pool_size);
    c.pool_seed = j.value("pool_seed", c.pool_seed);
    c.dev_size = j.value("dev_size", c.dev_size);
    if (j.contains("prompts")) {
      const auto& p = j["prompts"];
      c.prompts.harmful_plain = p.value("harmful_plain", c.prompts.harmful_plain);
      c.prompts.harmful_wrapped = p.value("harmful_wrapped", c.prompts.harmful_wrapped);
      c.prompts.benign_plain = p.value("benign_plain", c.prompts.benign_plain);
      c.prompts.benign_wrapped = p.value("benign_wrapped", c.prompts.benign_wrapped);
    }
    c.suite_size = j.value("suite_size", c.suite_size);
    c.suite_seed = j.value("suite_seed", c.suite_seed);
    if (j.contains("attacks")) {
      const auto& a = j["attacks"];
      c.attacks.behaviors = a.value("behaviors", c.attacks.behaviors);
      c.attacks.prefill_samples = a.value("prefill_samples", c.attacks.prefill_samples);
      c.attacks.template_samples = a.value("template_samples", c.attacks.template_samples);
      if (a.contains("prefix")) c.attacks.prefix = Vocabulary::parse_sequence(a["prefix"].get<std::string>());
    }
    c.capability_k = j.value("capability_k", c.capability_k);
    c.safety_samples = j.value("safety_samples", c.safety_samples);
    c.diagnostic_rollouts = j.value("diagnostic_rollouts", c.diagnostic_rollouts);
    c.diagnostic_seed = j.value("diagnostic_seed", c.diagnostic_seed);
    if (j.contains("seeds")) c.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
    c.select_checkpoint = j.value("select_checkpoint", c.select_checkpoint);
    c.run_attacks = j.value("run_attacks", c.run_attacks);
    c.run_diagnostics = j.value("run_diagnostics", c.run_diagnostics);
    c.output_dir = j.value("output_dir", c.output_dir);
    c.cache_dir = j.value("cache_dir", c.cache_dir);
    const std::string exec = j.value("exec", std::string("parallel"));
    if (exec != "parallel" && exec != "reference") throw Error(ErrorKind::config, "exec must be parallel or reference");
    c.exec = exec == "parallel" ? model::ExecMode::parallel : model::ExecMode::reference;
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::config, std::string("invalid config field: ") + e.what());
  }
  c.validate();
  return c;
}

ExperimentConfig ExperimentConfig::load(const std::string& path) { return from_json(read_file(path)); }

std::string ExperimentConfig::hash() const { return content_hash(identity_json()); }

std::string ExperimentConfig::base_hash() const {
  return content_hash(world.to_json() + model.to_json() + pretrain.to_json());
}

std::string ExperimentConfig::resolved_cache_dir() const {
  return cache_dir.empty() ? output_dir + "/cache" : cache_dir;
}

std::string_view to_string(Method m) {
  switch (m) {
    case Method::base: return "base";
    case Method::sft: return "sft";
    case Method::opsa: return "opsa";
  }
  return "base";
}

Method parse_method(std::string_view name) {
  for (Method m : {Method::base, Method::sft, Method::opsa}) {
    if (to_string(m) == name) return m;
  }
  throw Error(ErrorKind::config, "unknown method '" + std::string(name) + "'");
}

const ArmReport& SeedReport::arm(std::string_view method) const {
  for (const auto& a : arms) {
    if (a.method == method) return a;
  }
  throw Error(ErrorKind::out_of_range, "no arm named " + std::string(method));
}

const CurveSummary* DiagnosticsSummary::find(std::string_view student) const {
  for (const auto& c : curves) {
    if (c.student == student) return &c;
  }
  return nullptr;
}

// ---------------------------------------------------------------------------
// stages

model::Parameters obtain_base(const ExperimentConfig& cfg, bool* from_cache) {
  const std::string path = cfg.resolved_cache_dir() + "/base-" + cfg.base_hash() + ".ckpt";
  if (std::filesystem::exists(path)) {
    auto p = model::load_checkpoint(path);
    if (!(p.config() == cfg.model)) throw Error(ErrorKind::config, "cached base at " + path + " has another config");
    if (from_cache) *from_cache = true;
    return p;
  }
  if (from_cache) *from_cache = false;
  const auto corpus = make_pretrain_corpus(cfg.world);
  train::TrainOptions options;
  options.exec = cfg.exec;
  auto result = train::pretrain_base(corpus, cfg.model, cfg.pretrain, options);
  model::save_checkpoint(result.params, path);
  return std::move(result.params);
}

promptsearch::Selection search_context(const ExperimentConfig& cfg, const model::Parameters& base) {
  const auto pool = promptsearch::build_pool(cfg.pool_size, cfg.pool_seed);
  const auto dev = promptsearch::dev_queries(cfg.pool_seed, cfg.dev_size);
  return promptsearch::select_context(pool, base, dev, model::DecodeConfig::greedy(), cfg.exec);
}

losses::ContextPair context_pair(const promptsearch::PrivilegedContext& harmful) {
  return {harmful.tokens, promptsearch::benign_context().tokens};
}

Workbench make_workbench(const ExperimentConfig& cfg, model::Parameters base, losses::ContextPair contexts) {
  return Workbench{&cfg, std::move(base), std::move(contexts), make_eval_suites(cfg.suite_seed, cfg.suite_size),
                   eval::attack_behaviors(cfg.suite_seed, cfg.attacks.behaviors)};
}

std::string prompt_hash(std::span<const LabeledPrompt> prompts) { return content_hash(serialize_prompts(prompts)); }

namespace {

eval::SafetyRates rates_of(const Workbench& wb, const model::Parameters& params, std::uint64_t seed) {
  const auto& cfg = *wb.config;
  model::DecodeConfig dc = model::DecodeConfig::greedy();
  if (cfg.safety_samples > 1) dc = model::DecodeConfig::sampled(derive_seed(seed, 10));
  return eval::safety_rates(params, wb.suites, dc, cfg.safety_samples, cfg.exec);
}

}  // namespace

ArmReport evaluate_params(const Workbench& wb, const model::Parameters& params, std::string method,
                          std::uint64_t seed, bool attacks) {
  const auto& cfg = *wb.config;
  const auto rates = rates_of(wb, params, seed);
  const double capability = eval::capability_score(params, wb.suites.benign_plain,
                                                   model::DecodeConfig::sampled(derive_seed(seed, 11)),
                                                   cfg.capability_k, cfg.exec);
  ArmReport r;
  r.method = std::move(method);
  r.safety = eval::SafetyReport::make(rates, capability, seed, cfg.safety_samples, cfg.capability_k,
                                      params.fingerprint());
  r.fingerprint = params.fingerprint();
  if (attacks) {
    const auto pre = eval::attack_prefill(params, wb.behaviors, cfg.attacks.prefix,
                                          model::DecodeConfig::sampled(derive_seed(seed, 12)),
                                          cfg.attacks.prefill_samples, cfg.exec);
    const auto templates = all_templates();
    const auto tpl = eval::attack_templates(params, wb.behaviors, templates,
                                            model::DecodeConfig::sampled(derive_seed(seed, 13)),
                                            cfg.attacks.template_samples, cfg.exec);
    r.prefill = eval::asr_metrics(pre);
    r.templates = eval::asr_metrics(tpl);
  }
  return r;
}

ArmOutput run_arm(const Workbench& wb, Method method, std::span<const LabeledPrompt> prompts, std::uint64_t seed,
                  const losses::DivergenceMode& mode, double* sft_pass_rate, const std::string& artifact_dir) {
  const auto& cfg = *wb.config;
  if (method == Method::base) {
    return {evaluate_params(wb, wb.base, "base", seed, cfg.run_attacks), wb.base};
  }
  train::OptimizerConfig opt = cfg.align;
  opt.seed = seed;
  train::TrainOptions options;
  options.exec = cfg.exec;
  if (!artifact_dir.empty()) {
    options.log_path = artifact_dir + "/steps.jsonl";
    options.checkpoint_dir = artifact_dir;
    std::filesystem::create_directories(artifact_dir);
  }
  std::vector<double> composites;
  std::optional<model::Parameters> best;
  int best_epoch = -1;
  double best_score = -1.0;
  if (cfg.select_checkpoint) {
    options.on_epoch = [&](int epoch, const model::Parameters& p) {
      const double s = eval::composite_score(rates_of(wb, p, seed));
      composites.push_back(s);
      if (s > best_score) {
        best_score = s;
        best_epoch = epoch;
        best = p;
      }
    };
  }

  model::Parameters final_params = wb.base;
  if (method == Method::sft) {
    const auto data = train::build_sft_dataset(wb.base, prompts, wb.contexts.harmful,
                                               model::DecodeConfig::sampled(derive_seed(seed, 21)));
    if (sft_pass_rate) *sft_pass_rate = data.harmful_pass_rate();
    final_params = train::train_sft(wb.base, data, opt, options).params;
  } else {
    train::OpsaOptions o;
    o.mode = mode;
    o.rollout = model::DecodeConfig::sampled(0);
    final_params = train::train_opsa(wb.base, prompts, wb.contexts, opt, o, options).train.params;
  }
  int selected = opt.epochs > 0 ? opt.epochs - 1 : -1;
  const model::Parameters& chosen = best ? *best : final_params;
  if (best) selected = best_epoch;
  ArmReport report = evaluate_params(wb, chosen, std::string(to_string(method)), seed, cfg.run_attacks);
  report.selected_epoch = selected;
  report.epoch_composites = composites;
  return {std::move(report), chosen};
}

// ---------------------------------------------------------------------------
// report

namespace {

ordered_json metrics_json(const std::optional<eval::AsrMetrics>& m) {
  if (!m) return nullptr;
  ordered_json j;
  j["mean_asr"] = m->mean_asr;
  j["pass_at_n"] = m->pass_at_n;
  j["attempts_per_behavior"] = m->attempts_per_behavior;
  j["behaviors"] = m->behaviors;
  return j;
}

ordered_json context_json(const promptsearch::PrivilegedContext& c) {
  ordered_json j;
  j["tokens"] = c.label();
  j["strength"] = c.strength;
  j["length"] = c.length;
  j["framing"] = std::string(promptsearch::to_string(c.framing));
  return j;
}

ordered_json curve_json(const std::vector<std::optional<double>>& curve) {
  ordered_json j = ordered_json::array();
  for (const auto& v : curve) j.push_back(v ? ordered_json(*v) : ordered_json(nullptr));
  return j;
}

ordered_json optional_json(const std::optional<double>& v) { return v ? ordered_json(*v) : ordered_json(nullptr); }

}  // namespace

std::string RunReport::to_json(bool include_timings) const {
  ordered_json j;
  j["experiment_id"] = experiment_id;
  j["config"] = parse(config_json);
  j["base_fingerprint"] = base_fingerprint;
  j["contexts"]["harmful"] = context_json(harmful_context);
  j["contexts"]["benign"] = context_json(benign_context);
  auto& table = j["tfr_table"];
  table = ordered_json::array();
  for (const auto& r : tfr_table) {
    ordered_json row = context_json(r.context);
    row["id"] = r.pool_index;
    row["tfr"] = r.result.rate;
    row["base_leak"] = r.result.base_leak_rate;
    row["tfr_given_leaked"] = r.result.rate_given_leaked;
    table.push_back(row);
  }
  auto& seeds_json = j["seeds"];
  seeds_json = ordered_json::array();
  for (const auto& s : seeds) {
    ordered_json sj;
    sj["seed"] = s.seed;
    sj["prompt_hash"] = s.prompt_hash;
    sj["prompt_count"] = s.prompt_count;
    sj["sft_harmful_pass_rate"] = s.sft_harmful_pass_rate;
    for (const auto& a : s.arms) {
      ordered_json aj;
      aj["safety"] = parse(a.safety.to_json());
      aj["selected_epoch"] = a.selected_epoch;
      aj["epoch_composites"] = a.epoch_composites;
      aj["prefill"] = metrics_json(a.prefill);
      aj["template"] = metrics_json(a.templates);
      aj["fingerprint"] = a.fingerprint;
      sj["arms"][a.method] = aj;
    }
    seeds_json.push_back(sj);
  }
  if (diagnostics) {
    auto& d = j["diagnostics"];
    d["rollout_set_id"] = diagnostics->rollout_set_id;
    for (const auto& c : diagnostics->curves) {
      ordered_json cj;
      cj["student_fingerprint"] = c.student_fingerprint;
      cj["early_mean"] = optional_json(c.early);
      cj["late_mean"] = optional_json(c.late);
      cj["curve"] = curve_json(c.curve);
      auto& top = cj["top_tokens"];
      top = ordered_json::array();
      for (const auto& t : c.top_tokens) {
        ordered_json tj;
        tj["token"] = std::string(Vocabulary::name(t.token));
        tj["count"] = t.count;
        tj["observed"] = t.observed;
        tj["baseline"] = t.baseline;
        tj["residual"] = t.residual;
        top.push_back(tj);
      }
      d["students"][c.student] = cj;
    }
  }
  if (include_timings) j["timings"] = timings;
  return j.dump(2);
}

namespace {

template <class Json>
Json parse_report(std::string_view json) {
  try {
    return Json::parse(json);
  } catch (const std::exception& e) {
    throw Error(ErrorKind::io, std::string("malformed report: ") + e.what());
  }
}

}  // namespace

void set_progress_log(bool enabled) { progress_log(&enabled); }

std::string report_content_hash(std::string_view json) {
  auto j = parse_report<ordered_json>(json);
  j.erase("timings");
  return content_hash(j.dump());
}

std::string RunReport::content_hash() const { return report_content_hash(to_json(false)); }

void verify_report(std::string_view json) {
  const auto j = parse_report<nlohmann::json>(json);
  try {
    for (const auto& s : j.at("seeds")) {
      for (const auto& [name, arm] : s.at("arms").items()) {
        eval::SafetyReport::from_json(arm.at("safety").dump());
      }
    }
  } catch (const Error&) {
    throw;
  } catch (const std::exception& e) {
    throw Error(ErrorKind::io, std::string("incomplete report: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// pipeline

RunReport run_pipeline(const ExperimentConfig& cfg) {
  cfg.validate();
  namespace fs = std::filesystem;
  fs::create_directories(cfg.output_dir);
  write_file_atomic(cfg.output_dir + "/config.json", cfg.to_json());

  RunReport report;
  report.experiment_id = cfg.hash();
  report.config_json = cfg.identity_json();
  auto& timings = report.timings;

  const model::Parameters base = stage("pretrain", timings, [&] { return obtain_base(cfg); });
  report.base_fingerprint = base.fingerprint();

  const auto selection = stage("search_context", timings, [&] { return search_context(cfg, base); });
  report.harmful_context = selection.context;
  report.benign_context = promptsearch::benign_context();
  report.tfr_table = selection.table;
  write_file_atomic(cfg.output_dir + "/tfr_table.tsv", promptsearch::tfr_table_tsv(selection.table));

  const Workbench wb = make_workbench(cfg, base, context_pair(selection.context));
  std::optional<model::Parameters> first_sft, first_opsa;

  for (std::uint64_t seed : cfg.seeds) {
    stage("seed-" + std::to_string(seed), timings, [&] {
      const auto prompts = alignment_prompts(cfg, seed);
      SeedReport sr;
      sr.seed = seed;
      sr.prompt_hash = prompt_hash(prompts);
      sr.prompt_count = prompts.size();
      const std::string dir = cfg.output_dir + "/seed-" + std::to_string(seed);

      sr.arms.push_back(run_arm(wb, Method::base, prompts, seed, cfg.divergence).report);
      if (prompt_hash(prompts) != sr.prompt_hash) throw Error(ErrorKind::training, "SFT prompt set differs");
      auto sft = run_arm(wb, Method::sft, prompts, seed, cfg.divergence, &sr.sft_harmful_pass_rate, dir + "/sft");
      if (prompt_hash(prompts) != sr.prompt_hash) throw Error(ErrorKind::training, "OPSA prompt set differs");
      auto opsa = run_arm(wb, Method::opsa, prompts, seed, cfg.divergence, nullptr, dir + "/opsa");
      sr.arms.push_back(std::move(sft.report));
      sr.arms.push_back(std::move(opsa.report));
      if (!first_sft) {
        first_sft = std::move(sft.params);
        first_opsa = std::move(opsa.params);
      }
      for (const auto& a : sr.arms) write_file_atomic(dir + "/" + a.method + "_safety.tsv", a.safety.to_tsv());
      report.seeds.push_back(std::move(sr));
    });
  }

  if (cfg.run_diagnostics) {
    stage("diagnostics", timings, [&] {
      const auto rollouts =
          diagnostics::make_rollout_set(base, cfg.diagnostic_rollouts, cfg.diagnostic_seed, cfg.exec);
      DiagnosticsSummary d;
      d.rollout_set_id = rollouts.id;
      const std::vector<std::pair<std::string, const model::Parameters*>> students{
          {"base", &base}, {"sft", &*first_sft}, {"opsa", &*first_opsa}};
      for (const auto& [name, params] : students) {
        const auto prof = diagnostics::profile(base, wb.contexts, *params, rollouts, cfg.exec);
        CurveSummary c;
        c.student = name;
        c.student_fingerprint = params->fingerprint();
        c.curve = diagnostics::position_curve(prof, diagnostics::max_position(prof));
        c.early = diagnostics::window_mean(c.curve, 0, 10);
        c.late = diagnostics::window_mean(c.curve, 30, c.curve.size());
        c.top_tokens = diagnostics::token_decomposition(prof, 15, 10);
        const std::string dir = cfg.output_dir + "/diagnostics/" + name;
        write_file_atomic(dir + "/profile.tsv", diagnostics::profile_tsv(prof));
        write_file_atomic(dir + "/decomposition.tsv", diagnostics::decomposition_tsv(prof, c.top_tokens));
        write_file_atomic(dir + "/plot.tsv", diagnostics::plot_data_tsv(c.curve, c.top_tokens));
        d.curves.push_back(std::move(c));
      }
      report.diagnostics = std::move(d);
    });
  }

  write_file_atomic(cfg.output_dir + "/report.json", report.to_json());
  return report;
}

// ---------------------------------------------------------------------------
// sweeps

namespace {

struct Prepared {
  model::Parameters base;
  promptsearch::Selection selection;
};

Prepared prepare(const ExperimentConfig& cfg) {
  cfg.validate();
  Prepared p{obtain_base(cfg), {}};
  p.selection = search_context(cfg, p.base);
  return p;
}

double mean(std::span<const double> xs) {
  double s = 0.0;
  for (double x : xs) s += x;
  return xs.empty() ? 0.0 : s / static_cast<double>(xs.size());
}

ExperimentConfig without_extras(const ExperimentConfig& cfg) {
  ExperimentConfig c = cfg;
  c.run_attacks = false;
  return c;
}

}  // namespace

std::vector<LabeledPrompt> subsample_prompts(std::span<const LabeledPrompt> prompts, double fraction) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorKind::config, "fraction must be in (0,1]");
  auto key = [](const LabeledPrompt& p) { return std::make_pair(p.label, p.query.wrapper.has_value()); };
  std::map<std::pair<QueryType, bool>, std::size_t> total, kept;
  for (const auto& p : prompts) ++total[key(p)];
  std::vector<LabeledPrompt> out;
  for (const auto& p : prompts) {
    const auto k = key(p);
    const auto limit = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(total[k]) - 1e-9));
    if (kept[k] < limit) {
      ++kept[k];
      out.push_back(p);
    }
  }
  return out;
}

std::vector<SizeRow> sweep_data_size(const ExperimentConfig& cfg_in, std::span<const double> fractions) {
  const ExperimentConfig cfg = without_extras(cfg_in);
  const Prepared prep = prepare(cfg);
  const Workbench wb = make_workbench(cfg, prep.base, context_pair(prep.selection.context));
  std::vector<SizeRow> rows;
  for (double f : fractions) {
    SizeRow sft{"sft", f, 0, {}, 0.0}, opsa{"opsa", f, 0, {}, 0.0};
    for (std::uint64_t seed : cfg.seeds) {
      const auto prompts = subsample_prompts(alignment_prompts(cfg, seed), f);
      sft.prompts = opsa.prompts = prompts.size();
      sft.composites.push_back(run_arm(wb, Method::sft, prompts, seed, cfg.divergence).report.safety.composite);
      opsa.composites.push_back(run_arm(wb, Method::opsa, prompts, seed, cfg.divergence).report.safety.composite);
    }
    sft.mean = mean(sft.composites);
    opsa.mean = mean(opsa.composites);
    rows.push_back(std::move(sft));
    rows.push_back(std::move(opsa));
  }
  return rows;
}

std::string size_table_tsv(std::span<const SizeRow> rows) {
  std::ostringstream os;
  os << "method\tfraction\tprompts\tcomposite_mean\tper_seed\n";
  for (const auto& r : rows) {
    os << r.method << '\t' << r.fraction << '\t' << r.prompts << '\t' << fmt::format("{:.4f}", r.mean) << '\t';
    for (std::size_t i = 0; i < r.composites.size(); ++i) {
      os << (i ? "," : "") << fmt::format("{:.4f}", r.composites[i]);
    }
    os << '\n';
  }
  return os.str();
}

PromptSetSpec composition_spec(int harmful, int ratio, std::uint64_t seed) {
  if (harmful < 1 || ratio < 1) throw Error(ErrorKind::config, "harmful count and ratio must be positive");
  PromptSetSpec s;
  s.harmful_wrapped = harmful / 4;
  s.harmful_plain = harmful - s.harmful_wrapped;
  s.benign_wrapped = harmful * ratio / 4;
  s.benign_plain = harmful * ratio - s.benign_wrapped;
  s.seed = seed;
  return s;
}

std::string delta_annotation(double score, double baseline) {
  return fmt::format("{:.2f} ({:+.2f})", 100.0 * score, 100.0 * (score - baseline));
}

std::vector<CompositionCell> sweep_composition(const ExperimentConfig& cfg_in, std::span<const int> harmful_counts,
                                               std::span<const int> ratios) {
  const ExperimentConfig cfg = without_extras(cfg_in);
  for (int h : harmful_counts) composition_spec(h, 1, 0);
  for (int r : ratios) composition_spec(1, r, 0);
  const Prepared prep = prepare(cfg);
  std::vector<CompositionCell> cells;
  for (int h : harmful_counts) {
    for (int r : ratios) {
      ExperimentConfig cell_cfg = cfg;
      cell_cfg.prompts = composition_spec(h, r, 0);
      const Workbench wb = make_workbench(cell_cfg, prep.base, context_pair(prep.selection.context));
      std::vector<double> sft, opsa;
      for (std::uint64_t seed : cfg.seeds) {
        const auto prompts = alignment_prompts(cell_cfg, seed);
        sft.push_back(run_arm(wb, Method::sft, prompts, seed, cfg.divergence).report.safety.composite);
        opsa.push_back(run_arm(wb, Method::opsa, prompts, seed, cfg.divergence).report.safety.composite);
      }
      CompositionCell c;
      c.harmful = h;
      c.ratio = r;
      c.sft = mean(sft);
      c.opsa = mean(opsa);
      c.annotation = delta_annotation(c.opsa, c.sft);
      cells.push_back(std::move(c));
    }
  }
  return cells;
}

std::string composition_table_tsv(std::span<const CompositionCell> cells) {
  std::ostringstream os;
  os << "harmful\tratio\tsft\topsa\topsa_vs_sft\n";
  for (const auto& c : cells) {
    os << c.harmful << '\t' << c.ratio << "x\t" << fmt::format("{:.2f}", 100.0 * c.sft) << '\t'
       << fmt::format("{:.2f}", 100.0 * c.opsa) << '\t' << c.annotation << '\n';
  }
  return os.str();
}

std::vector<DivergenceRow> ablate_divergence(const ExperimentConfig& cfg_in) {
  const ExperimentConfig cfg = without_extras(cfg_in);
  const Prepared prep = prepare(cfg);
  const Workbench wb = make_workbench(cfg, prep.base, context_pair(prep.selection.context));
  std::vector<DivergenceRow> rows;
  for (const auto& mode :
       {losses::DivergenceMode::forward(), losses::DivergenceMode::reverse(), losses::DivergenceMode::mix(0.5)}) {
    DivergenceRow row;
    row.mode = mode.name();
    for (std::uint64_t seed : cfg.seeds) {
      const auto prompts = alignment_prompts(cfg, seed);
      const auto r = run_arm(wb, Method::opsa, prompts, seed, mode).report;
      for (std::size_t i = 0; i < row.rates.size(); ++i) row.rates[i] += r.safety.rates[i];
      row.composites.push_back(r.safety.composite);
    }
    for (double& v : row.rates) v /= static_cast<double>(cfg.seeds.size());
    row.mean_harm = eval::mean_harm(row.rates);
    row.mean_over_refusal = eval::mean_over_refusal(row.rates);
    row.composite = mean(row.composites);
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string divergence_table_tsv(std::span<const DivergenceRow> rows) {
  std::ostringstream os;
  os << "mode";
  for (auto n : eval::kRateNames) os << '\t' << n;
  os << "\tavg_harm\tavg_over_refusal\tcomposite\n";
  for (const auto& r : rows) {
    os << r.mode;
    for (double v : r.rates) os << '\t' << fmt::format("{:.4f}", v);
    os << '\t' << fmt::format("{:.4f}", r.mean_harm) << '\t' << fmt::format("{:.4f}", r.mean_over_refusal) << '\t'
       << fmt::format("{:.4f}", r.composite) << '\n';
  }
  return os.str();
}

std::vector<promptsearch::TfrRow> spanning_contexts(std::span<const promptsearch::TfrRow> table) {
  if (table.size() < 3) throw Error(ErrorKind::empty_input, "need at least three candidates");
  std::vector<std::size_t> order(table.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const auto& x = table[a];
    const auto& y = table[b];
    if (x.result.rate != y.result.rate) return x.result.rate < y.result.rate;
    if (x.context.tokens.size() != y.context.tokens.size()) return x.context.tokens.size() < y.context.tokens.size();
    return x.pool_index < y.pool_index;
  });
  const std::size_t lo = order.front();
  const std::size_t hi = promptsearch::best_row(table);
  const double target = 0.5 * (table[lo].result.rate + table[hi].result.rate);
  std::optional<std::size_t> mid;
  for (std::size_t i : order) {
    if (i == lo || i == hi) continue;
    const double r = table[i].result.rate;
    if (r <= table[lo].result.rate || r >= table[hi].result.rate) continue;
    if (!mid || std::abs(r - target) < std::abs(table[*mid].result.rate - target)) mid = i;
  }
  if (!mid) throw Error(ErrorKind::numeric, "no candidate with a TFR strictly between the extremes");
  return {table[lo], table[*mid], table[hi]};
}

std::vector<TfrValidationRow> tfr_validation(const ExperimentConfig& cfg_in, const model::Parameters& base,
                                             std::span<const promptsearch::TfrRow> picks) {
  const ExperimentConfig cfg = without_extras(cfg_in);
  std::vector<TfrValidationRow> rows;
  for (const auto& pick : picks) {
    const Workbench wb = make_workbench(cfg, base, context_pair(pick.context));
    TfrValidationRow row;
    row.context = pick.context;
    row.tfr = pick.result.rate;
    for (std::uint64_t seed : cfg.seeds) {
      const auto prompts = alignment_prompts(cfg, seed);
      const auto r = run_arm(wb, Method::opsa, prompts, seed, cfg.divergence).report;
      row.harm.push_back(eval::mean_harm(r.safety.rates));
    }
    row.mean_harm = mean(row.harm);
    rows.push_back(std::move(row));
  }
  return rows;
}

}  // namespace opsa::harness
