#pragma once

#include "opsa/losses.hpp"
#include "opsa/train.hpp"

namespace opsa::testing {

model::ModelConfig small_model();
CorpusSpec small_corpus();
train::OptimizerConfig fast(int epochs, int batch = 32);
// A small base pretrained once per test binary.
const model::Parameters& small_base();
std::vector<LabeledPrompt> few_prompts(int harmful, int benign, std::uint64_t seed = 2);
const losses::ContextPair& strong_contexts();

}  // namespace opsa::testing
