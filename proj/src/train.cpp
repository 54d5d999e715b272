#include "opsa/train.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numbers>
#include <numeric>

#include <nlohmann/json.hpp>

#include "opsa/error.hpp"

namespace opsa::train {

void OptimizerConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorKind::config, what); };
  if (!(peak_lr > 0.0)) fail("peak learning rate must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) fail("warmup fraction must be in [0,1)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("adam betas must be in [0,1)");
  if (!(epsilon > 0.0)) fail("epsilon must be positive");
  if (weight_decay < 0.0) fail("weight decay must be non-negative");
  if (!(clip_norm > 0.0)) fail("clip norm must be positive");
  if (batch_size < 1) fail("batch size must be positive");
  if (epochs < 0) fail("epochs must be non-negative");
}

std::string OptimizerConfig::to_json() const {
  nlohmann::ordered_json j;
  j["peak_lr"] = peak_lr;
  j["reference_peak_lr"] = reference_peak_lr;
  j["warmup_fraction"] = warmup_fraction;
  j["beta1"] = beta1;
  j["beta2"] = beta2;
  j["epsilon"] = epsilon;
  j["weight_decay"] = weight_decay;
  j["clip_norm"] = clip_norm;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["seed"] = seed;
  return j.dump();
}

OptimizerConfig OptimizerConfig::from_json(std::string_view text) {
  const auto j = nlohmann::json::parse(text);
  OptimizerConfig c;
  c.peak_lr = j.value("peak_lr", c.peak_lr);
  c.reference_peak_lr = j.value("reference_peak_lr", c.reference_peak_lr);
  c.warmup_fraction = j.value("warmup_fraction", c.warmup_fraction);
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.epsilon = j.value("epsilon", c.epsilon);
  c.weight_decay = j.value("weight_decay", c.weight_decay);
  c.clip_norm = j.value("clip_norm", c.clip_norm);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.epochs = j.value("epochs", c.epochs);
  c.seed = j.value("seed", c.seed);
  return c;
}

double lr_at(long step, long total, const OptimizerConfig& cfg) {
  if (total < 0 || step < 0 || step > total) {
    throw Error(ErrorKind::out_of_range, "step " + std::to_string(step) + " outside [0, " + std::to_string(total) + "]");
  }
  if (total == 0) return 0.0;
  const long warmup = static_cast<long>(std::ceil(cfg.warmup_fraction * static_cast<double>(total)));
  if (step <= warmup) {
    return warmup == 0 ? cfg.peak_lr : cfg.peak_lr * static_cast<double>(step) / static_cast<double>(warmup);
  }
  const double progress = static_cast<double>(step - warmup) / static_cast<double>(total - warmup);
  return cfg.peak_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

std::string step_log_line(const StepRecord& r) {
  nlohmann::ordered_json j;
  j["step"] = r.step;
  j["epoch"] = r.epoch;
  j["lr"] = r.lr;
  j["loss"] = r.loss;
  j["tokens"] = r.tokens;
  return j.dump();
}

TrainState::TrainState(Parameters initial)
    : params(std::move(initial)), m(params.tensors().zeros_like()), v(params.tensors().zeros_like()) {}

double adamw_step(TrainState& s, model::Gradients& grad, double lr, const OptimizerConfig& cfg) {
  double sq = 0.0;
  for (double g : grad.values()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorKind::training, "non-finite gradient at step " + std::to_string(s.step + 1));
  const double clip = norm > cfg.clip_norm ? cfg.clip_norm / norm : 1.0;

  ++s.step;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(s.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(s.step));
  model::TensorSet& p = s.params.mutable_tensors();
  for (std::size_t ti = 0; ti < p.count(); ++ti) {
    const auto& e = p.layout()[ti];
    const bool decay = e.rows > 1 && e.cols > 1;
    auto pv = p.tensor(ti);
    auto gv = grad.tensor(ti);
    auto mv = s.m.tensor(ti);
    auto vv = s.v.tensor(ti);
    for (std::size_t i = 0; i < pv.size(); ++i) {
      const double g = gv[i] * clip;
      mv[i] = cfg.beta1 * mv[i] + (1.0 - cfg.beta1) * g;
      vv[i] = cfg.beta2 * vv[i] + (1.0 - cfg.beta2) * g * g;
      const double update = (mv[i] / bc1) / (std::sqrt(vv[i] / bc2) + cfg.epsilon);
      pv[i] -= lr * (update + (decay ? cfg.weight_decay * pv[i] : 0.0));
    }
  }
  return norm;
}

long steps_per_epoch(std::size_t items, int batch_size) {
  return static_cast<long>((items + static_cast<std::size_t>(batch_size) - 1) / static_cast<std::size_t>(batch_size));
}

namespace {

class StepLogWriter {
 public:
  explicit StepLogWriter(const std::string& path) {
    if (!path.empty()) {
      const std::filesystem::path p(path);
      if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
      out_.open(path, std::ios::trunc);
      if (!out_) throw Error(ErrorKind::io, "cannot open step log " + path);
    }
  }
  void write(const StepRecord& r) {
    if (out_.is_open()) out_ << step_log_line(r) << '\n';
  }

 private:
  std::ofstream out_;
};

void end_of_epoch(int epoch, const Parameters& params, const TrainOptions& options, TrainResult& result) {
  result.epoch_fingerprints.push_back(params.fingerprint());
  if (!options.checkpoint_dir.empty()) {
    model::save_checkpoint(params, options.checkpoint_dir + "/epoch-" + std::to_string(epoch) + ".ckpt");
  }
  if (options.on_epoch) options.on_epoch(epoch, params);
}

std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  Rng rng(derive_seed(seed, 1000 + static_cast<std::uint64_t>(epoch)));
  shuffle_in_place(order, rng);
  return order;
}

// Minibatch NLL training shared by pretraining and SFT.
TrainResult train_nll(Parameters start, std::span<const losses::SftExample> data, const OptimizerConfig& opt,
                      const TrainOptions& options) {
  opt.validate();
  TrainState state(std::move(start));
  TrainResult result{state.params, {}, {}};
  StepLogWriter writer(options.log_path);
  const long per_epoch = steps_per_epoch(data.size(), opt.batch_size);
  const long total = per_epoch * opt.epochs;
  for (int epoch = 0; epoch < opt.epochs && !data.empty(); ++epoch) {
    const auto order = epoch_order(data.size(), opt.seed, epoch);
    for (long b = 0; b < per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(opt.batch_size);
      const std::size_t hi = std::min(data.size(), lo + static_cast<std::size_t>(opt.batch_size));
      std::vector<losses::SftExample> batch;
      for (std::size_t i = lo; i < hi; ++i) batch.push_back(data[order[i]]);
      model::Gradients grad = state.params.tensors().zeros_like();
      const double loss = losses::sft_nll(state.params, batch, &grad, options.exec);
      const std::size_t tokens = losses::response_token_count(batch);
      if (!std::isfinite(loss)) {
        throw Error(ErrorKind::training, "divergent loss at step " + std::to_string(state.step + 1));
      }
      const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(tokens, 1));
      for (double& g : grad.values()) g *= inv;
      const double lr = lr_at(state.step + 1, total, opt);
      adamw_step(state, grad, lr, opt);
      StepRecord rec{state.step, epoch, lr, loss * inv, tokens};
      result.log.push_back(rec);
      writer.write(rec);
    }
    end_of_epoch(epoch, state.params, options, result);
  }
  result.params = state.params;
  return result;
}

}  // namespace

TrainResult pretrain_base(std::span<const Triple> corpus, const model::ModelConfig& model_cfg,
                          const OptimizerConfig& opt, const TrainOptions& options) {
  std::vector<losses::SftExample> data;
  data.reserve(corpus.size());
  for (const auto& t : corpus) data.push_back({prompt_tokens(t.context, t.query), t.response});
  return train_nll(model::init(model_cfg), data, opt, options);
}

double mean_nll(const Parameters& params, std::span<const losses::SftExample> data, ExecMode exec) {
  const double total = losses::sft_nll(params, data, nullptr, exec);
  return total / static_cast<double>(std::max<std::size_t>(losses::response_token_count(data), 1));
}

SftDataset build_sft_dataset(const Parameters& base, std::span<const LabeledPrompt> prompts,
                             std::span<const Token> harmful_context, const model::DecodeConfig& sampling) {
  SftDataset out;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const auto& p = prompts[i];
    model::DecodeConfig cfg = sampling;
    cfg.seed = derive_seed(sampling.seed, 4000 + i);
    if (p.label == QueryType::harmful) {
      ++out.harmful_candidates;
      const TokenSequence y = model::decode(base, prompt_tokens(harmful_context, p.query), cfg);
      const Verdict v = judge(p.query, y);
      if (v.refused && !v.leaked) {
        ++out.harmful_kept;
        out.examples.push_back({prompt_tokens({}, p.query), y});
        out.prompts.push_back(p);
      }
    } else {
      ++out.benign;
      out.examples.push_back({prompt_tokens({}, p.query), model::decode(base, prompt_tokens({}, p.query), cfg)});
      out.prompts.push_back(p);
    }
  }
  if (out.examples.empty() || (out.harmful_candidates > 0 && out.harmful_kept == 0)) {
    throw Error(ErrorKind::empty_input, "SFT filter kept no harmful traces (pass rate " +
                                            std::to_string(out.harmful_pass_rate()) + " of " +
                                            std::to_string(out.harmful_candidates) + ")");
  }
  return out;
}

TrainResult train_sft(const Parameters& base, const SftDataset& data, const OptimizerConfig& opt,
                      const TrainOptions& options) {
  if (data.examples.empty()) {
    throw Error(ErrorKind::empty_input,
                "empty SFT dataset (harmful pass rate " + std::to_string(data.harmful_pass_rate()) + ")");
  }
  return train_nll(base, data.examples, opt, options);
}

std::uint64_t rollout_seed(std::uint64_t opt_seed, long step, std::size_t index) {
  return derive_seed(derive_seed(opt_seed, 500000 + static_cast<std::uint64_t>(step)), index);
}

OpsaResult train_opsa(const Parameters& base, std::span<const LabeledPrompt> prompts,
                      const losses::ContextPair& contexts, const OptimizerConfig& opt, const OpsaOptions& opsa,
                      const TrainOptions& options) {
  opt.validate();
  opsa.mode.validate();
  if (opsa.rollouts_per_prompt < 1) throw Error(ErrorKind::config, "rollouts_per_prompt must be >= 1");
  const Parameters teacher = base;
  OpsaResult out{TrainResult{base, {}, {}}, teacher.fingerprint(), {}, {}, {}};
  TrainState state(base);
  StepLogWriter writer(options.log_path);
  const long per_epoch = steps_per_epoch(prompts.size(), opt.batch_size);
  const long total = per_epoch * opt.epochs;

  for (int epoch = 0; epoch < opt.epochs && !prompts.empty(); ++epoch) {
    const auto order = epoch_order(prompts.size(), opt.seed, epoch);
    for (long b = 0; b < per_epoch; ++b) {
      const std::size_t lo = static_cast<std::size_t>(b) * static_cast<std::size_t>(opt.batch_size);
      const std::size_t hi = std::min(prompts.size(), lo + static_cast<std::size_t>(opt.batch_size));
      const long step = state.step;

      // Rollouts come from the current student on the query alone.
      std::vector<losses::Rollout> rollouts;
      for (std::size_t i = lo; i < hi; ++i) {
        const LabeledPrompt& p = prompts[order[i]];
        for (int k = 0; k < opsa.rollouts_per_prompt; ++k) {
          model::DecodeConfig cfg = opsa.rollout;
          cfg.seed = rollout_seed(opt.seed, step, rollouts.size());
          losses::Rollout r{p.query, p.label, model::decode(state.params, prompt_tokens({}, p.query), cfg), cfg.seed};
          rollouts.push_back(std::move(r));
        }
      }
      for (const auto& r : rollouts) {
        try {
          losses::check_rollout(r);
        } catch (const Error& e) {
          throw Error(e.kind(), e.message() + " (step " + std::to_string(step + 1) + ")");
        }
      }
      if (opsa.keep_step_snapshots) out.step_snapshots.push_back(state.params);

      model::Gradients grad = state.params.tensors().zeros_like();
      const losses::OpsaValue value =
          losses::opsa_objective(state.params, teacher, rollouts, contexts, opsa.mode, &grad, options.exec);
      if (!std::isfinite(value.value)) {
        throw Error(ErrorKind::training, "divergent loss at step " + std::to_string(step + 1));
      }
      const double inv = 1.0 / static_cast<double>(std::max<std::size_t>(value.tokens, 1));
      for (double& g : grad.values()) g *= inv;
      const double lr = lr_at(state.step + 1, total, opt);
      out.rollout_log.push_back({step, state.params.fingerprint(), std::move(rollouts)});
      adamw_step(state, grad, lr, opt);
      StepRecord rec{state.step, epoch, lr, value.value * inv, value.tokens};
      out.train.log.push_back(rec);
      writer.write(rec);
    }
    end_of_epoch(epoch, state.params, options, out.train);
  }
  out.train.params = state.params;
  out.teacher_fingerprint_after = teacher.fingerprint();
  if (out.teacher_fingerprint_after != out.teacher_fingerprint_before) {
    throw Error(ErrorKind::training, "teacher parameters changed during training");
  }
  return out;
}

}  // namespace opsa::train
