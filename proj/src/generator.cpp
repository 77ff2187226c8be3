#include "mtaf/generator.hpp"

#include <algorithm>
#include <cmath>

namespace mtaf::gen {

Strategy strategy_from_string(std::string_view s) {
  if (s == "greedy") return Strategy::greedy;
  if (s == "top_k") return Strategy::top_k;
  if (s == "nucleus") return Strategy::nucleus;
  throw DataError("unknown decoding strategy: " + std::string(s));
}

std::string to_string(Strategy s) {
  switch (s) {
    case Strategy::greedy: return "greedy";
    case Strategy::top_k: return "top_k";
    case Strategy::nucleus: return "nucleus";
  }
  throw UsageError("invalid strategy");
}

void DecodeConfig::validate() const {
  if (k < 1) throw UsageError("top_k requires k >= 1");
  if (p <= 0.0 || p > 1.0) throw UsageError("nucleus requires p in (0, 1]");
  if (max_new_tokens < 1) throw UsageError("max_new_tokens must be >= 1");
  if (temperature <= 0.0) throw UsageError("temperature must be positive");
}

std::vector<ScoredToken> truncated_distribution(const std::vector<double>& logits,
                                                const DecodeConfig& config) {
  config.validate();
  if (logits.empty()) throw UsageError("empty logits");

  // temperature divides logits before any truncation
  double max_logit = *std::max_element(logits.begin(), logits.end());
  std::vector<ScoredToken> scored(logits.size());
  double z = 0.0;
  for (size_t v = 0; v < logits.size(); ++v) {
    double e = std::exp((logits[v] - max_logit) / config.temperature);
    scored[v] = {static_cast<tok::TokenId>(v), e};
    z += e;
  }
  for (auto& s : scored) s.prob /= z;
  std::sort(scored.begin(), scored.end(), [](const ScoredToken& a, const ScoredToken& b) {
    if (a.prob != b.prob) return a.prob > b.prob;
    return a.id < b.id;
  });

  size_t keep = scored.size();
  switch (config.strategy) {
    case Strategy::greedy:
      keep = 1;
      break;
    case Strategy::top_k:
      keep = std::min<size_t>(static_cast<size_t>(config.k), scored.size());
      break;
    case Strategy::nucleus: {
      double cum = 0.0;
      keep = scored.size();
      for (size_t i = 0; i < scored.size(); ++i) {
        cum += scored[i].prob;
        if (cum >= config.p) {
          keep = i + 1;
          break;
        }
      }
      break;
    }
  }
  scored.resize(keep);
  double mass = 0.0;
  for (const auto& s : scored) mass += s.prob;
  for (auto& s : scored) s.prob /= mass;
  return scored;
}

tok::TokenId sample_token(const std::vector<double>& logits, const DecodeConfig& config, Rng& rng) {
  std::vector<ScoredToken> dist = truncated_distribution(logits, config);
  if (config.strategy == Strategy::greedy) return dist.front().id;
  double u = rng.uniform();
  double cum = 0.0;
  for (const auto& s : dist) {
    cum += s.prob;
    if (u < cum) return s.id;
  }
  return dist.back().id;  // floating-point slack
}

}  // namespace mtaf::gen
