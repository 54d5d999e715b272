#pragma once

// A small pre-LayerNorm decoder-only transformer with exact log-probabilities,
// seeded decoding and hand-derived gradients.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "opsa/world.hpp"

namespace opsa::model {

struct ModelConfig {
  int vocab_size = tok::kVocabSize;
  int context_length = 96;
  int embedding_width = 64;
  int num_blocks = 2;
  int num_heads = 2;
  std::uint64_t seed = 0;
  // Position ids restart at `prefix_slots` on the first occurrence of this
  // token, so everything from the anchor on sits at fixed positions whatever
  // precedes it. -1 gives plain absolute positions.
  int anchor_token = tok::SEP;
  int prefix_slots = 8;

  void validate() const;
  int head_width() const { return embedding_width / num_heads; }
  int mlp_width() const { return 4 * embedding_width; }
  int position_table_size() const { return context_length + prefix_slots; }

  std::string to_json() const;
  static ModelConfig from_json(std::string_view text);
  bool operator==(const ModelConfig&) const = default;
};

// Named real-valued arrays over one flat buffer.
class TensorSet {
 public:
  struct Entry {
    std::string name;
    std::size_t offset = 0;
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t size() const { return rows * cols; }
  };

  TensorSet() = default;
  explicit TensorSet(std::shared_ptr<const std::vector<Entry>> layout);

  const std::vector<Entry>& layout() const { return *layout_; }
  std::size_t size() const { return data_.size(); }
  std::size_t count() const { return layout_->size(); }

  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  std::span<double> tensor(std::size_t index);
  std::span<const double> tensor(std::size_t index) const;
  std::span<const double> tensor(std::string_view name) const;
  std::span<double> tensor(std::string_view name);
  std::size_t index_of(std::string_view name) const;

  TensorSet zeros_like() const { return TensorSet(layout_); }
  void set_zero();
  bool all_finite() const;

 private:
  std::shared_ptr<const std::vector<Entry>> layout_;
  std::vector<double> data_;
};

using Gradients = TensorSet;

class Parameters {
 public:
  Parameters(ModelConfig config, TensorSet tensors);

  const ModelConfig& config() const { return config_; }
  const TensorSet& tensors() const { return tensors_; }
  TensorSet& mutable_tensors() { return tensors_; }

  // Content hash of the configuration and every weight.
  std::string fingerprint() const;

 private:
  ModelConfig config_;
  TensorSet tensors_;
};

std::shared_ptr<const std::vector<TensorSet::Entry>> make_layout(const ModelConfig& config);

Parameters init(const ModelConfig& config);

// Log-probabilities over the vocabulary at one position.
struct Distribution {
  std::vector<double> logp;
};

// Row-major T x V matrix of next-token log-probabilities.
struct LogProbs {
  std::size_t length = 0;
  std::size_t vocab = 0;
  std::vector<double> values;
  std::span<const double> row(std::size_t t) const { return {values.data() + t * vocab, vocab}; }
};

std::vector<int> position_ids(const ModelConfig& config, std::span<const Token> tokens);

// Activations of one forward pass, kept for backpropagation. Also serves as
// the key/value cache for incremental decoding, so full and incremental
// passes run the same arithmetic.
class ForwardTrace {
 public:
  ForwardTrace(const ModelConfig& config, std::size_t capacity);

  std::size_t length() const { return length_; }
  std::size_t capacity() const { return capacity_; }
  std::span<const Token> tokens() const { return {tokens_.data(), length_}; }
  std::span<const double> logprobs(std::size_t t) const;

  // Appends one token and computes its next-token distribution.
  void push(const Parameters& params, Token token);
  // Appends several tokens at once; same results as pushing them in order.
  void extend(const Parameters& params, std::span<const Token> tokens);

  LogProbs take_logprobs() const;

 private:
  friend void backward(const Parameters&, const ForwardTrace&, std::span<const double>, Gradients&);

  struct Block {
    std::vector<double> x, ln1_hat, ln1_rstd, ln1, qkv, att, att_out, mid, ln2_hat, ln2_rstd, ln2, fc, act;
  };

  std::size_t capacity_;
  std::size_t length_ = 0;
  int anchor_index_ = -1;
  std::vector<Token> tokens_;
  std::vector<int> pos_ids_;
  std::vector<Block> blocks_;
  std::vector<double> final_x_, lnf_hat_, lnf_rstd_, lnf_, logprobs_;
};

// Throws length error when tokens exceed the context length.
ForwardTrace forward_trace(const Parameters& params, std::span<const Token> tokens);
LogProbs forward_logprobs(const Parameters& params, std::span<const Token> tokens);
std::vector<Distribution> forward_distributions(const Parameters& params, std::span<const Token> tokens);

// Accumulates d(loss)/d(params) given d(loss)/d(logits), a T x V matrix.
void backward(const Parameters& params, const ForwardTrace& trace, std::span<const double> dlogits,
              Gradients& grads);

struct DecodeConfig {
  enum class Mode { greedy, sampled };
  Mode mode = Mode::greedy;
  double temperature = 0.6;
  double top_p = 0.95;
  int top_k = 20;
  int max_new_tokens = 40;
  std::uint64_t seed = 0;

  static DecodeConfig greedy(int max_new_tokens = 40);
  static DecodeConfig sampled(std::uint64_t seed, double temperature = 0.6, double top_p = 0.95, int top_k = 20,
                              int max_new_tokens = 40);
  void validate() const;
};

// Samples one token from a log-distribution under the decode settings.
Token pick_token(std::span<const double> logp, const DecodeConfig& cfg, Rng& rng);

// Returns response tokens (forced prefix included), stopping after EOS,
// after max_new_tokens, or at the context limit.
TokenSequence decode(const Parameters& params, std::span<const Token> prompt, const DecodeConfig& cfg,
                     std::span<const Token> forced_prefix = {});

// Scalar loss that optionally accumulates its gradient. grads == nullptr asks
// for the value only.
using LossEvaluator = std::function<double(const Parameters&, Gradients*)>;

// Exact analytic gradient of any loss built on forward_trace/backward.
Gradients gradient(const Parameters& params, const LossEvaluator& loss);

enum class ExecMode { reference, parallel };

// Evaluates item(i, g_i) into a separate zeroed buffer per item and sums
// buffers and loss values in index order. Results are identical for every
// thread count.
double accumulate_ordered(std::size_t n, const Gradients& like,
                          const std::function<double(std::size_t, Gradients*)>& item, Gradients* out,
                          ExecMode mode);

// Checkpoint container: magic line, JSON header (config, layout,
// fingerprint), then the flat weight buffer as little-endian doubles in
// layout order.
std::string serialize_checkpoint(const Parameters& params);
Parameters parse_checkpoint(std::string_view bytes);
void save_checkpoint(const Parameters& params, const std::string& path);
Parameters load_checkpoint(const std::string& path);

}  // namespace opsa::model
