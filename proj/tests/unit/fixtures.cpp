#include "fixtures.hpp"

namespace opsa::testing {

model::ModelConfig small_model() {
  model::ModelConfig c;
  c.embedding_width = 16;
  c.num_blocks = 1;
  c.num_heads = 2;
  c.seed = 4;
  return c;
}

CorpusSpec small_corpus() {
  CorpusSpec s;
  s.benign_plain_count = 120;
  s.harmful_plain_count = 80;
  s.steered_counts = {20, 20, 20, 20, 20};
  s.benign_steered_count = 20;
  s.harmful_wrapped_count = 20;
  s.seed = 9;
  return s;
}

train::OptimizerConfig fast(int epochs, int batch) {
  train::OptimizerConfig o;
  o.epochs = epochs;
  o.batch_size = batch;
  o.seed = 5;
  return o;
}

const model::Parameters& small_base() {
  static const model::Parameters base = [] {
    const auto corpus = make_pretrain_corpus(small_corpus());
    return train::pretrain_base(corpus, small_model(), fast(12, 16)).params;
  }();
  return base;
}

std::vector<LabeledPrompt> few_prompts(int harmful, int benign, std::uint64_t seed) {
  PromptSetSpec spec;
  spec.harmful_plain = harmful;
  spec.harmful_wrapped = 0;
  spec.benign_plain = benign;
  spec.benign_wrapped = 0;
  spec.seed = seed;
  return make_alignment_prompts(spec);
}

const losses::ContextPair& strong_contexts() {
  static const losses::ContextPair c{TokenSequence{tok::steer(5), tok::steer(5)}, TokenSequence{tok::CTXB}};
  return c;
}

}  // namespace opsa::testing
