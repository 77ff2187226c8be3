#pragma once

#include <array>
#include <string>
#include <vector>

#include "mtaf/common.hpp"
#include "mtaf/corpus.hpp"
#include "mtaf/model.hpp"

namespace mtaf::metrics {

// exp of the mean per-token cross-entropy; the inputs are nats per target
// token, pooled however the caller weighted them.
double perplexity_from_crossentropies(const std::vector<double>& nats);

// Pooled over every target-mask position in the dataset.
template <typename S>
double perplexity(const model::ModelParams<S>& params,
                  const std::vector<corpus::TrainingExample>& dataset) {
  if (dataset.empty()) throw UsageError("perplexity: empty dataset");
  double ce_sum = 0.0;
  size_t count = 0;
  for (const auto& ex : dataset) {
    model::Activations<S> acts;
    model::forward(params, ex.input_ids, acts);
    for (size_t p = 1; p < ex.input_ids.size(); ++p) {
      if (!ex.target_mask[p]) continue;
      Eigen::Matrix<S, 1, Eigen::Dynamic> row = acts.logits.row(p - 1);
      S lse = model::detail::row_logsumexp<S>(row);
      ce_sum += static_cast<double>(lse - row(ex.input_ids[p]));
      ++count;
    }
  }
  if (count == 0) throw DataError("perplexity: dataset has zero target tokens");
  return std::exp(ce_sum / static_cast<double>(count));
}

struct BleuReport {
  std::vector<double> precisions;  // p_1..p_N
  double brevity_penalty = 1.0;
  double score = 0.0;
  size_t candidate_len = 0;
  size_t reference_len = 0;  // closest reference length
};

// Sentence BLEU with per-reference clipped counts, brevity penalty against
// the closest reference length (ties -> shorter), and optional add-1
// smoothing on n >= 2.
BleuReport bleu(const std::vector<std::string>& candidate,
                const std::vector<std::vector<std::string>>& references, int max_n = 4,
                bool smoothing = false);

// Round half away from zero, then clamp to [-4, 4].
int round_affect(double x);

enum class AffectClass { frustrated, neutral, excited };
std::string to_string(AffectClass c);

// i < 0 -> frustrated, i == 0 -> neutral, i > 0 -> excited; i must lie in
// [-4, 4].
AffectClass affect_class(int i);

struct ClassScore {
  std::string name;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  size_t support = 0;
};

struct F1Report {
  std::vector<ClassScore> per_class;
  double accuracy = 0.0;
  std::vector<std::vector<size_t>> confusion;  // [true][predicted]
  const ClassScore& of(const std::string& name) const;
};

// Per-class precision/recall/F1 with the 0/0 -> 0 convention. Class ids must
// lie in [0, class_names.size()).
F1Report f1_report(const std::vector<int>& predicted, const std::vector<int>& truth,
                   const std::vector<std::string>& class_names);

F1Report f1_report(const std::vector<AffectClass>& predicted,
                   const std::vector<AffectClass>& truth);

// Fraction of items whose true index holds the strict argmax; ties count as
// incorrect.
double mc_accuracy(const std::vector<std::vector<double>>& scores,
                   const std::vector<size_t>& true_indices);

}  // namespace mtaf::metrics
