#pragma once

#include <string>
#include <vector>

#include "mtaf/common.hpp"
#include "mtaf/model.hpp"
#include "mtaf/tokenizer.hpp"

namespace mtaf::gen {

enum class Strategy { greedy, top_k, nucleus };

Strategy strategy_from_string(std::string_view s);
std::string to_string(Strategy s);

struct DecodeConfig {
  Strategy strategy = Strategy::greedy;
  int k = 25;          // top_k
  double p = 0.9;      // nucleus
  int max_new_tokens = 40;
  double temperature = 1.0;
  uint64_t seed = 0;
  void validate() const;
};

// Token probabilities after temperature scaling; sorted by (prob desc,
// id asc) this is the basis for every truncation strategy.
struct ScoredToken {
  tok::TokenId id;
  double prob;
};

// Next-token distribution for the given logits row under the decode config:
// the surviving support, renormalized. Exposed for the support-property tests.
std::vector<ScoredToken> truncated_distribution(const std::vector<double>& logits,
                                                const DecodeConfig& config);

// Samples one token (or picks the argmax for greedy).
tok::TokenId sample_token(const std::vector<double>& logits, const DecodeConfig& config, Rng& rng);

// Autoregressive decoding. The context must end with <sep> and leave room
// within max_seq_len. Stops after emitting <eos> or max_new_tokens tokens;
// the terminating <eos> is included in the returned ids.
template <typename S>
std::vector<tok::TokenId> generate(const model::ModelParams<S>& params, const tok::Vocab& vocab,
                                   std::vector<tok::TokenId> context, const DecodeConfig& config,
                                   Rng& rng) {
  config.validate();
  if (context.empty() || context.back() != vocab.sep())
    throw UsageError("generation context must end with <sep>");
  if (static_cast<int>(context.size()) >= params.config.max_seq_len)
    throw DataError("generation context length " + std::to_string(context.size()) +
                    " must be below max_seq_len " + std::to_string(params.config.max_seq_len));

  std::vector<tok::TokenId> generated;
  for (int step = 0; step < config.max_new_tokens; ++step) {
    if (static_cast<int>(context.size()) >= params.config.max_seq_len) break;
    model::Activations<S> acts;
    model::forward(params, context, acts);
    const Eigen::Index last = acts.logits.rows() - 1;
    std::vector<double> logits(params.config.vocab_size);
    for (int v = 0; v < params.config.vocab_size; ++v)
      logits[v] = static_cast<double>(acts.logits(last, v));
    tok::TokenId next = sample_token(logits, config, rng);
    context.push_back(next);
    generated.push_back(next);
    if (next == vocab.eos()) break;
  }
  return generated;
}

template <typename S>
std::vector<tok::TokenId> generate(const model::ModelParams<S>& params, const tok::Vocab& vocab,
                                   const std::vector<tok::TokenId>& context,
                                   const DecodeConfig& config) {
  Rng rng(config.seed);
  return generate(params, vocab, context, config, rng);
}

}  // namespace mtaf::gen
