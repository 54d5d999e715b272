#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>

#include "opsa/error.hpp"
#include "opsa/harness.hpp"

using namespace opsa;
using harness::ExperimentConfig;

namespace {

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string output;
  std::string exec;
};

void add_common(CLI::App* app, Common& c) {
  app->add_option("--config", c.config_path, "experiment config (JSON)")->check(CLI::ExistingFile);
  app->add_option("--seed", c.seed, "seed for this command");
  app->add_option("--output", c.output, "output directory override");
  app->add_option("--exec", c.exec, "reference or parallel")->check(CLI::IsMember({"reference", "parallel"}));
}

ExperimentConfig load_config(const Common& c) {
  ExperimentConfig cfg = c.config_path.empty() ? ExperimentConfig() : ExperimentConfig::load(c.config_path);
  if (c.seed) cfg.seeds = {*c.seed};
  if (!c.output.empty()) cfg.output_dir = c.output;
  if (!c.exec.empty()) cfg.exec = c.exec == "parallel" ? model::ExecMode::parallel : model::ExecMode::reference;
  cfg.validate();
  return cfg;
}

std::uint64_t the_seed(const ExperimentConfig& cfg) { return cfg.seeds.front(); }

model::Parameters params_from(const ExperimentConfig& cfg, const std::string& checkpoint) {
  return checkpoint.empty() ? harness::obtain_base(cfg) : model::load_checkpoint(checkpoint);
}

void print_safety(const eval::SafetyReport& r) { std::cout << r.to_tsv(); }

std::string seed_dir(const ExperimentConfig& cfg) {
  return cfg.output_dir + "/seed-" + std::to_string(the_seed(cfg));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"On-policy safety alignment laboratory"};
  app.require_subcommand(1);

  Common pre_c, search_c, train_c, eval_c, attack_c, diag_c, sweep_c, ablate_c, report_c;

  auto* pre = app.add_subcommand("pretrain", "train the base model on the synthetic corpus");
  add_common(pre, pre_c);

  auto* search = app.add_subcommand("search-context", "measure teacher flip rates and select the context");
  add_common(search, search_c);

  auto* trn = app.add_subcommand("train", "align the base with SFT or OPSA");
  add_common(trn, train_c);
  std::string method = "opsa", divergence = "mix";
  double alpha = 0.5;
  trn->add_option("--method", method)->check(CLI::IsMember({"sft", "opsa"}));
  trn->add_option("--divergence", divergence)->check(CLI::IsMember({"forward", "reverse", "mix"}));
  trn->add_option("--alpha", alpha, "forward weight for mix")->check(CLI::Range(0.0, 1.0));

  auto* ev = app.add_subcommand("eval", "safety rates, composite and capability");
  add_common(ev, eval_c);
  std::string eval_ckpt;
  ev->add_option("--checkpoint", eval_ckpt, "model checkpoint (default: base)");

  auto* atk = app.add_subcommand("attack", "run a jailbreak attack family");
  add_common(atk, attack_c);
  std::string family = "prefill", attack_ckpt;
  atk->add_option("--family", family)->check(CLI::IsMember({"prefill", "template"}));
  atk->add_option("--checkpoint", attack_ckpt, "model checkpoint (default: base)");

  auto* diag = app.add_subcommand("diagnose-kl", "per-position KL profile against the privileged teacher");
  add_common(diag, diag_c);
  std::string diag_ckpt;
  std::size_t min_count = 15, top_k = 10;
  diag->add_option("--checkpoint", diag_ckpt, "student checkpoint (default: base)");
  diag->add_option("--min-count", min_count);
  diag->add_option("--top-k", top_k);

  auto* sweep = app.add_subcommand("sweep", "data-size or composition sweep");
  add_common(sweep, sweep_c);
  std::string kind = "size";
  std::vector<double> fractions{0.10, 0.25, 0.50, 0.75, 1.0};
  std::vector<int> counts{8, 16, 24, 48, 96, 128};
  std::vector<int> ratios{1, 2, 5, 10};
  sweep->add_option("--kind", kind)->check(CLI::IsMember({"size", "composition"}));
  sweep->add_option("--fractions", fractions)->delimiter(',');
  sweep->add_option("--counts", counts)->delimiter(',');
  sweep->add_option("--ratios", ratios)->delimiter(',');

  auto* ablate = app.add_subcommand("ablate-divergence", "forward, reverse and mixed KL under one config");
  add_common(ablate, ablate_c);

  auto* rep = app.add_subcommand("report", "run the full pipeline, or verify an existing report");
  add_common(rep, report_c);
  std::string report_in;
  rep->add_option("--input", report_in, "verify this report instead of running")->check(CLI::ExistingFile);

  CLI11_PARSE(app, argc, argv);
  harness::set_progress_log(true);

  try {
    if (*pre) {
      Common c = pre_c;
      std::optional<std::uint64_t> s = c.seed;
      c.seed.reset();
      ExperimentConfig cfg = load_config(c);
      if (s) cfg.world.seed = cfg.model.seed = cfg.pretrain.seed = *s;
      bool cached = false;
      const auto base = harness::obtain_base(cfg, &cached);
      model::save_checkpoint(base, cfg.output_dir + "/base.ckpt");
      const auto corpus = make_pretrain_corpus(cfg.world);
      write_file_atomic(cfg.output_dir + "/corpus.tsv", serialize_corpus(cfg.world, corpus));
      std::cout << "base " << base.fingerprint() << (cached ? " (cached)" : "") << " -> " << cfg.output_dir
                << "/base.ckpt\n";
    } else if (*search) {
      const auto cfg = load_config(search_c);
      const auto sel = harness::search_context(cfg, harness::obtain_base(cfg));
      const auto tsv = promptsearch::tfr_table_tsv(sel.table);
      write_file_atomic(cfg.output_dir + "/tfr_table.tsv", tsv);
      std::cout << tsv << "selected " << sel.context.label() << " (id " << sel.pool_index << ", tfr "
                << sel.table[promptsearch::best_row(sel.table)].result.rate << ")\n";
    } else if (*trn) {
      const auto cfg = load_config(train_c);
      auto mode = losses::DivergenceMode::parse(divergence);
      if (mode.kind == losses::DivergenceMode::Kind::mix) mode.alpha = alpha;
      const auto base = harness::obtain_base(cfg);
      const auto sel = harness::search_context(cfg, base);
      const auto wb = harness::make_workbench(cfg, base, harness::context_pair(sel.context));
      PromptSetSpec spec = cfg.prompts;
      spec.seed = the_seed(cfg);
      const auto prompts = make_alignment_prompts(spec);
      const std::string dir = seed_dir(cfg) + "/" + method;
      const auto out = harness::run_arm(wb, harness::parse_method(method), prompts, the_seed(cfg), mode, nullptr, dir);
      model::save_checkpoint(out.params, dir + "/selected.ckpt");
      write_file_atomic(dir + "/safety.json", out.report.safety.to_json());
      std::cout << method << " (" << mode.name() << ") selected epoch " << out.report.selected_epoch << " -> " << dir
                << "/selected.ckpt\n";
      print_safety(out.report.safety);
    } else if (*ev) {
      const auto cfg = load_config(eval_c);
      const auto params = params_from(cfg, eval_ckpt);
      const auto wb = harness::make_workbench(cfg, params, {});
      const auto r = harness::evaluate_params(wb, params, "eval", the_seed(cfg), false);
      write_file_atomic(cfg.output_dir + "/eval-" + params.fingerprint() + ".json", r.safety.to_json());
      print_safety(r.safety);
    } else if (*atk) {
      const auto cfg = load_config(attack_c);
      const auto params = params_from(cfg, attack_ckpt);
      const auto behaviors = eval::attack_behaviors(cfg.suite_seed, cfg.attacks.behaviors);
      const auto f = eval::parse_attack_family(family);
      std::vector<eval::AttackRecord> records;
      if (f == eval::AttackFamily::prefill) {
        records = eval::attack_prefill(params, behaviors, cfg.attacks.prefix,
                                       model::DecodeConfig::sampled(derive_seed(the_seed(cfg), 12)),
                                       cfg.attacks.prefill_samples, cfg.exec);
      } else {
        const auto templates = all_templates();
        records = eval::attack_templates(params, behaviors, templates,
                                         model::DecodeConfig::sampled(derive_seed(the_seed(cfg), 13)),
                                         cfg.attacks.template_samples, cfg.exec);
      }
      const auto m = eval::asr_metrics(records);
      write_file_atomic(cfg.output_dir + "/attack-" + family + "-" + params.fingerprint() + ".tsv",
                        eval::attack_records_tsv(records, params.fingerprint(), the_seed(cfg)));
      std::cout << fmt::format("family {} behaviors {} budget {} mean_asr {:.4f} pass@{} {:.4f}\n", family,
                               m.behaviors, m.attempts_per_behavior, m.mean_asr, m.attempts_per_behavior,
                               m.pass_at_n);
    } else if (*diag) {
      const auto cfg = load_config(diag_c);
      const auto base = harness::obtain_base(cfg);
      const auto student = diag_ckpt.empty() ? base : model::load_checkpoint(diag_ckpt);
      const auto sel = harness::search_context(cfg, base);
      const auto rollouts =
          diagnostics::make_rollout_set(base, cfg.diagnostic_rollouts, cfg.diagnostic_seed, cfg.exec);
      const auto prof = diagnostics::profile(base, harness::context_pair(sel.context), student, rollouts, cfg.exec);
      const auto curve = diagnostics::position_curve(prof, diagnostics::max_position(prof));
      const auto rows = diagnostics::token_decomposition(prof, min_count, top_k);
      const std::string dir = cfg.output_dir + "/diagnostics/" + student.fingerprint();
      write_file_atomic(dir + "/profile.tsv", diagnostics::profile_tsv(prof));
      write_file_atomic(dir + "/decomposition.tsv", diagnostics::decomposition_tsv(prof, rows));
      write_file_atomic(dir + "/plot.tsv", diagnostics::plot_data_tsv(curve, rows));
      const auto early = diagnostics::window_mean(curve, 0, 10);
      const auto late = diagnostics::window_mean(curve, 30, curve.size());
      std::cout << fmt::format("context {} early(0-9) {:.5f} late(>=30) {}\n", sel.context.label(),
                               early.value_or(0.0), late ? fmt::format("{:.5f}", *late) : std::string("absent"));
      std::cout << diagnostics::decomposition_tsv(prof, rows);
    } else if (*sweep) {
      const auto cfg = load_config(sweep_c);
      std::string tsv;
      if (kind == "size") {
        tsv = harness::size_table_tsv(harness::sweep_data_size(cfg, fractions));
      } else {
        tsv = harness::composition_table_tsv(harness::sweep_composition(cfg, counts, ratios));
      }
      write_file_atomic(cfg.output_dir + "/sweep-" + kind + ".tsv", tsv);
      std::cout << tsv;
    } else if (*ablate) {
      const auto cfg = load_config(ablate_c);
      const auto tsv = harness::divergence_table_tsv(harness::ablate_divergence(cfg));
      write_file_atomic(cfg.output_dir + "/ablate-divergence.tsv", tsv);
      std::cout << tsv;
    } else if (*rep) {
      if (!report_in.empty()) {
        const auto text = read_file(report_in);
        harness::verify_report(text);
        std::cout << "report ok, content hash " << harness::report_content_hash(text) << '\n';
        return 0;
      }
      const auto cfg = load_config(report_c);
      const auto r = harness::run_pipeline(cfg);
      std::cout << "experiment " << r.experiment_id << " context " << r.harmful_context.label() << '\n';
      std::cout << "seed\tmethod\tcomposite\tcapability\tprefill_asr\ttemplate_asr\n";
      for (const auto& s : r.seeds) {
        for (const auto& a : s.arms) {
          std::cout << fmt::format("{}\t{}\t{:.4f}\t{:.4f}\t{}\t{}\n", s.seed, a.method, a.safety.composite,
                                   a.safety.capability,
                                   a.prefill ? fmt::format("{:.4f}", a.prefill->mean_asr) : std::string("-"),
                                   a.templates ? fmt::format("{:.4f}", a.templates->mean_asr) : std::string("-"));
        }
      }
      std::cout << "report " << cfg.output_dir << "/report.json hash " << r.content_hash() << '\n';
    }
  } catch (const Error& e) {
    std::cerr << "error (" << to_string(e.kind()) << "): " << e.what() << '\n';
    return 2;
  }
  return 0;
}
