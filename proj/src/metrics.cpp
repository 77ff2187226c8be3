#include "mtaf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace mtaf::metrics {

double perplexity_from_crossentropies(const std::vector<double>& nats) {
  if (nats.empty()) throw DataError("perplexity: dataset has zero target tokens");
  double sum = 0.0;
  for (double v : nats) sum += v;
  return std::exp(sum / static_cast<double>(nats.size()));
}

namespace {

using Ngram = std::vector<std::string>;

std::map<Ngram, size_t> ngram_counts(const std::vector<std::string>& tokens, size_t n) {
  std::map<Ngram, size_t> counts;
  if (tokens.size() < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i)
    ++counts[Ngram(tokens.begin() + i, tokens.begin() + i + n)];
  return counts;
}

}  // namespace

BleuReport bleu(const std::vector<std::string>& candidate,
                const std::vector<std::vector<std::string>>& references, int max_n,
                bool smoothing) {
  if (candidate.empty()) throw UsageError("bleu: empty candidate");
  if (references.empty()) throw UsageError("bleu: empty reference list");
  if (max_n < 1) throw UsageError("bleu: max_n must be >= 1");

  BleuReport report;
  report.candidate_len = candidate.size();

  // brevity penalty: closest reference length, ties -> shorter
  size_t best_len = references.front().size();
  for (const auto& ref : references) {
    auto diff = [&](size_t len) {
      return len > candidate.size() ? len - candidate.size() : candidate.size() - len;
    };
    if (diff(ref.size()) < diff(best_len) || (diff(ref.size()) == diff(best_len) && ref.size() < best_len))
      best_len = ref.size();
  }
  report.reference_len = best_len;
  report.brevity_penalty =
      candidate.size() >= best_len
          ? 1.0
          : std::exp(1.0 - static_cast<double>(best_len) / static_cast<double>(candidate.size()));

  double log_sum = 0.0;
  int used_orders = 0;
  bool zero_precision = false;
  for (int n = 1; n <= max_n; ++n) {
    auto cand_counts = ngram_counts(candidate, static_cast<size_t>(n));
    size_t total = 0;
    for (const auto& [ng, c] : cand_counts) total += c;
    if (total == 0) {
      // candidate shorter than n: this order carries no evidence
      report.precisions.push_back(0.0);
      continue;
    }
    std::vector<std::map<Ngram, size_t>> ref_counts;
    ref_counts.reserve(references.size());
    for (const auto& ref : references) ref_counts.push_back(ngram_counts(ref, static_cast<size_t>(n)));
    size_t clipped = 0;
    for (const auto& [ng, c] : cand_counts) {
      size_t best = 0;
      for (const auto& rc : ref_counts) {
        auto it = rc.find(ng);
        if (it != rc.end()) best = std::max(best, it->second);
      }
      clipped += std::min(c, best);
    }
    double p;
    if (smoothing && n >= 2) {
      p = (static_cast<double>(clipped) + 1.0) / (static_cast<double>(total) + 1.0);
    } else {
      p = static_cast<double>(clipped) / static_cast<double>(total);
    }
    report.precisions.push_back(p);
    if (p == 0.0) {
      zero_precision = true;
    } else {
      log_sum += std::log(p);
    }
    ++used_orders;
  }

  if (used_orders == 0 || zero_precision) {
    report.score = 0.0;
  } else {
    report.score = report.brevity_penalty * std::exp(log_sum / used_orders);
  }
  return report;
}

int round_affect(double x) {
  if (!std::isfinite(x)) throw UsageError("round_affect: input must be finite");
  double r = std::round(x);  // rounds half away from zero
  return static_cast<int>(std::clamp(r, -4.0, 4.0));
}

std::string to_string(AffectClass c) {
  switch (c) {
    case AffectClass::frustrated: return "frustrated";
    case AffectClass::neutral: return "neutral";
    case AffectClass::excited: return "excited";
  }
  throw UsageError("invalid affect class");
}

AffectClass affect_class(int i) {
  if (i < -4 || i > 4) throw UsageError("affect_class: value " + std::to_string(i) + " outside [-4, 4]");
  if (i < 0) return AffectClass::frustrated;
  if (i == 0) return AffectClass::neutral;
  return AffectClass::excited;
}

const ClassScore& F1Report::of(const std::string& name) const {
  for (const auto& c : per_class)
    if (c.name == name) return c;
  throw UsageError("no such class in F1 report: " + name);
}

F1Report f1_report(const std::vector<int>& predicted, const std::vector<int>& truth,
                   const std::vector<std::string>& class_names) {
  if (predicted.size() != truth.size())
    throw UsageError("f1_report: prediction/label length mismatch (" +
                     std::to_string(predicted.size()) + " vs " + std::to_string(truth.size()) + ")");
  if (predicted.empty()) throw UsageError("f1_report: empty input");
  const size_t k = class_names.size();
  for (size_t i = 0; i < predicted.size(); ++i) {
    if (predicted[i] < 0 || static_cast<size_t>(predicted[i]) >= k || truth[i] < 0 ||
        static_cast<size_t>(truth[i]) >= k)
      throw UsageError("f1_report: class id out of range at item " + std::to_string(i));
  }

  F1Report report;
  report.confusion.assign(k, std::vector<size_t>(k, 0));
  size_t correct = 0;
  for (size_t i = 0; i < predicted.size(); ++i) {
    ++report.confusion[truth[i]][predicted[i]];
    if (predicted[i] == truth[i]) ++correct;
  }
  report.accuracy = static_cast<double>(correct) / static_cast<double>(predicted.size());

  for (size_t c = 0; c < k; ++c) {
    ClassScore score;
    score.name = class_names[c];
    size_t tp = report.confusion[c][c];
    size_t fn = 0, fp = 0;
    for (size_t o = 0; o < k; ++o) {
      if (o == c) continue;
      fn += report.confusion[c][o];
      fp += report.confusion[o][c];
    }
    score.support = tp + fn;
    score.precision = (tp + fp) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fp);
    score.recall = (tp + fn) == 0 ? 0.0 : static_cast<double>(tp) / (tp + fn);
    score.f1 = (score.precision + score.recall) == 0.0
                   ? 0.0
                   : 2.0 * score.precision * score.recall / (score.precision + score.recall);
    report.per_class.push_back(score);
  }
  return report;
}

F1Report f1_report(const std::vector<AffectClass>& predicted,
                   const std::vector<AffectClass>& truth) {
  auto ids = [](const std::vector<AffectClass>& v) {
    std::vector<int> out;
    out.reserve(v.size());
    for (AffectClass c : v) out.push_back(static_cast<int>(c));
    return out;
  };
  return f1_report(ids(predicted), ids(truth), {"frustrated", "neutral", "excited"});
}

double mc_accuracy(const std::vector<std::vector<double>>& scores,
                   const std::vector<size_t>& true_indices) {
  if (scores.size() != true_indices.size())
    throw UsageError("mc_accuracy: scores/labels length mismatch");
  if (scores.empty()) throw UsageError("mc_accuracy: empty input");
  size_t correct = 0;
  for (size_t i = 0; i < scores.size(); ++i) {
    const auto& row = scores[i];
    size_t truth = true_indices[i];
    if (truth >= row.size()) throw UsageError("mc_accuracy: true index out of range");
    bool strict_max = true;
    for (size_t j = 0; j < row.size(); ++j) {
      if (j != truth && row[j] >= row[truth]) {
        strict_max = false;
        break;
      }
    }
    if (strict_max) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(scores.size());
}

}  // namespace mtaf::metrics
