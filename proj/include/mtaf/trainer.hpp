#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mtaf/common.hpp"
#include "mtaf/corpus.hpp"
#include "mtaf/model.hpp"

namespace mtaf::trainer {

struct TrainPhase {
  std::string corpus_id;
  model::AffectMode affect_mode = model::AffectMode::regression;
  int affect_classes = 32;  // arity in classification mode
  int epochs = 1;
};

struct TrainConfig {
  double learning_rate = 3e-4;
  int batch_size = 8;
  uint64_t seed = 0;
  double lambda_affect = 1.0;
  double lambda_choice = 1.0;
  double clip_norm = 1.0;
  double validation_fraction = 0.1;
  std::vector<TrainPhase> phases;
  void validate() const;
};

// Token-ready phase corpus: the examples plus the candidate pool the
// distractor sampler draws from.
struct PhaseData {
  struct Candidate {
    std::string group_id;  // scenario / conversation id
    std::string source_id;
    std::vector<tok::TokenId> response;
  };
  std::vector<corpus::TrainingExample> examples;
  std::vector<Candidate> pool;
};

PhaseData make_phase_data(const corpus::RdgCorpus& corpus, const tok::Vocab& vocab,
                          size_t max_seq_len,
                          const std::vector<const corpus::Utterance*>* subset = nullptr);
PhaseData make_phase_data(const corpus::EdCorpus& corpus, const tok::Vocab& vocab,
                          size_t max_seq_len);

// Uniform over utterances from other scenarios.
const corpus::Utterance& sample_distractor(const corpus::TrainingExample& example,
                                           const corpus::RdgCorpus& corpus, Rng& rng);

// Pool-based equivalent used by the training loop.
const PhaseData::Candidate& sample_distractor(const corpus::TrainingExample& example,
                                              const PhaseData& data, Rng& rng);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename S>
struct AdamState {
  model::ModelParams<S> m;
  model::ModelParams<S> v;
  int64_t t = 0;
};

template <typename S>
struct TensorView {
  std::string name;
  S* data;
  Eigen::Index size;
};

template <typename S>
std::vector<TensorView<S>> tensor_views(model::ModelParams<S>& p) {
  std::vector<TensorView<S>> out;
  model::for_each_tensor(p, [&](const std::string& name, auto& t) {
    out.push_back({name, t.data(), t.size()});
  });
  return out;
}

// One adaptive-moment step with bias correction. Shapes of params, grads and
// both moment sets must agree; tensor order is the fixed visitor order.
template <typename S>
void adam_step(model::ModelParams<S>& params, const model::ModelParams<S>& grads,
               AdamState<S>& state, double learning_rate, const AdamConfig& cfg = {}) {
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  auto pv = tensor_views(params);
  auto gv = tensor_views(const_cast<model::ModelParams<S>&>(grads));
  auto mv = tensor_views(state.m);
  auto vv = tensor_views(state.v);
  if (gv.size() != pv.size() || mv.size() != pv.size() || vv.size() != pv.size())
    throw UsageError("adam_step: tensor layouts disagree");
  for (size_t k = 0; k < pv.size(); ++k) {
    if (gv[k].size != pv[k].size || mv[k].size != pv[k].size || vv[k].size != pv[k].size)
      throw UsageError("adam_step: shape mismatch on tensor " + pv[k].name);
    S* p = pv[k].data;
    const S* g = gv[k].data;
    S* m = mv[k].data;
    S* v = vv[k].data;
    for (Eigen::Index i = 0; i < pv[k].size; ++i) {
      double gi = static_cast<double>(g[i]);
      double mi = cfg.beta1 * static_cast<double>(m[i]) + (1.0 - cfg.beta1) * gi;
      double vi = cfg.beta2 * static_cast<double>(v[i]) + (1.0 - cfg.beta2) * gi * gi;
      m[i] = static_cast<S>(mi);
      v[i] = static_cast<S>(vi);
      double update = learning_rate * (mi / bc1) / (std::sqrt(vi / bc2) + cfg.eps);
      p[i] = static_cast<S>(static_cast<double>(p[i]) - update);
    }
  }
}

// Global gradient norm across every tensor.
template <typename S>
double global_norm(const model::ModelParams<S>& grads) {
  double sq = 0.0;
  model::for_each_tensor(grads, [&](const std::string&, const auto& t) {
    sq += static_cast<double>(t.template cast<double>().squaredNorm());
  });
  return std::sqrt(sq);
}

// Scales grads so the global norm does not exceed the threshold, even after
// float32 rounding of the scaled values.
template <typename S>
void clip_global_norm(model::ModelParams<S>& grads, double threshold) {
  if (threshold <= 0.0) return;
  double norm = global_norm(grads);
  if (norm <= threshold) return;
  const S scale = static_cast<S>(threshold / norm * (1.0 - 1e-6));
  model::for_each_tensor(grads, [&](const std::string&, auto& t) { t *= scale; });
}

struct Checkpoint {
  model::ModelConfig config;
  uint64_t vocab_hash = 0;
  model::ModelParams<float> params;
  AdamState<float> opt;
  int64_t step = 0;
  int64_t phase = 0;
};

// Binary layout: magic "MTAF", one version byte, an 8-byte little-endian
// header length, a JSON header (config, vocab hash, tensor manifest with
// name/shape/byte offset), then raw little-endian IEEE-754 float32 payload
// in manifest order.
std::string checkpoint_bytes(const Checkpoint& ckpt);
void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path,
                           const model::ModelConfig* expected_config = nullptr);
Checkpoint checkpoint_from_bytes(const std::string& bytes,
                                 const model::ModelConfig* expected_config = nullptr);
uint64_t checkpoint_hash(const Checkpoint& ckpt);

struct EpochLog {
  int phase = 0;
  std::string corpus_id;
  int epoch = 0;
  double l_lm = 0.0;
  double l_aff = 0.0;
  double l_mc = 0.0;
  std::optional<double> val_perplexity;
};

struct TrainLog {
  std::vector<EpochLog> epochs;
  std::vector<std::string> events;  // e.g. affect-head re-initializations
  size_t reinit_count() const;
};

// Runs the phase plan in order; re-initializes the affect head whenever a
// phase switches the affect mode or arity. Deterministic for a fixed seed
// (single-threaded, fixed reduction order).
Checkpoint train(const std::map<std::string, PhaseData>& corpora,
                 model::ModelParams<float> params, const TrainConfig& cfg, uint64_t vocab_hash,
                 TrainLog& log);

struct GradCheckResult {
  double max_rel_error = 0.0;
  size_t coords_probed = 0;
  std::string worst_tensor;
};

// Central finite differences against the analytic gradient, 64-bit, dropout
// off. Probes at least min_coords coordinates with every eligible tensor
// covered; under lm_only the auxiliary heads are skipped entirely.
GradCheckResult grad_check(const model::ModelParams<double>& params,
                           const std::vector<corpus::TrainingExample>& batch,
                           const std::vector<corpus::TrainingExample>& distractors,
                           const model::LossWeights& weights, double eps, size_t min_coords,
                           uint64_t seed);

}  // namespace mtaf::trainer
