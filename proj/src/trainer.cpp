#include "mtaf/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include <json.hpp>

#include "mtaf/metrics.hpp"

namespace mtaf::trainer {

using nlohmann::json;

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw UsageError("learning_rate must be positive");
  if (batch_size < 1) throw UsageError("batch_size must be >= 1");
  if (phases.empty()) throw UsageError("phase plan must be non-empty");
  if (validation_fraction < 0.0 || validation_fraction >= 1.0)
    throw UsageError("validation_fraction must lie in [0, 1)");
  for (const auto& ph : phases)
    if (ph.epochs < 0) throw UsageError("phase epochs must be >= 0");
}

PhaseData make_phase_data(const corpus::RdgCorpus& c, const tok::Vocab& vocab, size_t max_seq_len,
                          const std::vector<const corpus::Utterance*>* subset) {
  PhaseData data;
  std::vector<const corpus::Utterance*> all;
  if (subset == nullptr) {
    for (const auto& u : c.utterances) all.push_back(&u);
  } else {
    all = *subset;
  }
  for (const auto* u : all) {
    data.examples.push_back(corpus::build_example(vocab, c.scenario(u->scenario_id), *u, max_seq_len));
    data.pool.push_back({u->scenario_id, u->id, vocab.encode(u->text)});
  }
  return data;
}

PhaseData make_phase_data(const corpus::EdCorpus& c, const tok::Vocab& vocab, size_t max_seq_len) {
  PhaseData data;
  for (const auto& conv : c.conversations) {
    auto examples = corpus::build_examples(vocab, c, conv, max_seq_len);
    for (size_t k = 0; k < examples.size(); ++k) {
      data.pool.push_back({conv.id, examples[k].source_id, vocab.encode(conv.turns[k].text)});
      data.examples.push_back(std::move(examples[k]));
    }
  }
  return data;
}

const corpus::Utterance& sample_distractor(const corpus::TrainingExample& example,
                                           const corpus::RdgCorpus& corpus, Rng& rng) {
  if (corpus.scenarios.size() < 2)
    throw DataError("distractor sampling needs at least 2 scenarios");
  std::vector<const corpus::Utterance*> eligible;
  for (const auto& u : corpus.utterances)
    if (u.scenario_id != example.group_id) eligible.push_back(&u);
  if (eligible.empty())
    throw DataError("no distractor candidates outside scenario " + example.group_id);
  return *eligible[rng.below(eligible.size())];
}

const PhaseData::Candidate& sample_distractor(const corpus::TrainingExample& example,
                                              const PhaseData& data, Rng& rng) {
  std::vector<size_t> eligible;
  for (size_t i = 0; i < data.pool.size(); ++i)
    if (data.pool[i].group_id != example.group_id) eligible.push_back(i);
  if (eligible.empty())
    throw DataError("no distractor candidates outside group " + example.group_id);
  return data.pool[eligible[rng.below(eligible.size())]];
}

namespace {

constexpr char kMagic[4] = {'M', 'T', 'A', 'F'};
constexpr uint8_t kVersion = 1;

void put_u64_le(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const std::string& bytes, size_t offset) {
  uint64_t v = 0;
  for (int i = 0; i < 8; ++i)
    v |= static_cast<uint64_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  return v;
}

void put_f32_le(std::string& out, float f) {
  uint32_t u;
  std::memcpy(&u, &f, 4);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((u >> (8 * i)) & 0xff));
}

float get_f32_le(const std::string& bytes, size_t offset) {
  uint32_t u = 0;
  for (int i = 0; i < 4; ++i)
    u |= static_cast<uint32_t>(static_cast<unsigned char>(bytes[offset + i])) << (8 * i);
  float f;
  std::memcpy(&f, &u, 4);
  return f;
}

json config_to_json(const model::ModelConfig& c) {
  return json{{"d_model", c.d_model},
              {"n_layers", c.n_layers},
              {"n_heads", c.n_heads},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"max_seq_len", c.max_seq_len},
              {"dropout_rate", c.dropout_rate},
              {"variant", model::to_string(c.variant)},
              {"affect_mode", model::to_string(c.affect_mode)},
              {"affect_classes", c.affect_classes}};
}

model::ModelConfig config_from_json(const json& j) {
  model::ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.dropout_rate = j.at("dropout_rate").get<double>();
  c.variant = model::variant_from_string(j.at("variant").get<std::string>());
  c.affect_mode = model::affect_mode_from_string(j.at("affect_mode").get<std::string>());
  c.affect_classes = j.at("affect_classes").get<int>();
  return c;
}

struct NamedTensor {
  std::string name;
  float* data;
  Eigen::Index rows, cols;
};

std::vector<NamedTensor> checkpoint_tensors(Checkpoint& ckpt) {
  std::vector<NamedTensor> out;
  auto add = [&](const std::string& prefix, model::ModelParams<float>& p) {
    model::for_each_tensor(p, [&](const std::string& name, auto& t) {
      out.push_back({prefix + name, t.data(), t.rows(), t.cols()});
    });
  };
  add("", ckpt.params);
  add("adam_m.", ckpt.opt.m);
  add("adam_v.", ckpt.opt.v);
  return out;
}

}  // namespace

std::string checkpoint_bytes(const Checkpoint& ckpt) {
  auto& mutable_ckpt = const_cast<Checkpoint&>(ckpt);
  auto tensors = checkpoint_tensors(mutable_ckpt);

  json manifest = json::array();
  uint64_t offset = 0;
  for (const auto& t : tensors) {
    manifest.push_back(
        {{"name", t.name}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += static_cast<uint64_t>(t.rows) * static_cast<uint64_t>(t.cols) * 4;
  }
  json header{{"config", config_to_json(ckpt.config)},
              {"vocab_hash", to_hex(ckpt.vocab_hash)},
              {"step", ckpt.step},
              {"phase", ckpt.phase},
              {"opt_t", ckpt.opt.t},
              {"tensors", manifest}};
  std::string header_str = header.dump();

  std::string out;
  out.append(kMagic, 4);
  out.push_back(static_cast<char>(kVersion));
  put_u64_le(out, header_str.size());
  out += header_str;
  for (const auto& t : tensors) {
    const Eigen::Index n = t.rows * t.cols;
    for (Eigen::Index i = 0; i < n; ++i) put_f32_le(out, t.data[i]);
  }
  return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint: " + path);
  std::string bytes = checkpoint_bytes(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("short write on checkpoint: " + path);
}

Checkpoint checkpoint_from_bytes(const std::string& bytes,
                                 const model::ModelConfig* expected_config) {
  if (bytes.size() < 13) throw DataError("truncated checkpoint header");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw DataError("bad checkpoint magic bytes (expected MTAF)");
  if (static_cast<uint8_t>(bytes[4]) != kVersion)
    throw DataError("unsupported checkpoint format version " + std::to_string(bytes[4]));
  uint64_t header_len = get_u64_le(bytes, 5);
  if (bytes.size() < 13 + header_len) throw DataError("truncated checkpoint header");

  json header = json::parse(bytes.substr(13, header_len), nullptr, false);
  if (header.is_discarded()) throw DataError("malformed checkpoint header");

  Checkpoint ckpt;
  ckpt.config = config_from_json(header.at("config"));
  ckpt.vocab_hash = std::stoull(header.at("vocab_hash").get<std::string>(), nullptr, 16);
  ckpt.step = header.at("step").get<int64_t>();
  ckpt.phase = header.at("phase").get<int64_t>();
  ckpt.params = model::allocate<float>(ckpt.config);
  ckpt.opt.m = model::allocate<float>(ckpt.config);
  ckpt.opt.v = model::allocate<float>(ckpt.config);
  ckpt.opt.t = header.at("opt_t").get<int64_t>();

  if (expected_config != nullptr) {
    auto mismatch = [&](const std::string& field, auto a, auto b) {
      throw DataError("checkpoint shape mismatch: " + field + " is " + std::to_string(a) +
                      ", expected " + std::to_string(b));
    };
    if (ckpt.config.d_model != expected_config->d_model)
      mismatch("d_model", ckpt.config.d_model, expected_config->d_model);
    if (ckpt.config.n_layers != expected_config->n_layers)
      mismatch("n_layers", ckpt.config.n_layers, expected_config->n_layers);
    if (ckpt.config.n_heads != expected_config->n_heads)
      mismatch("n_heads", ckpt.config.n_heads, expected_config->n_heads);
    if (ckpt.config.d_ff != expected_config->d_ff)
      mismatch("d_ff", ckpt.config.d_ff, expected_config->d_ff);
    if (ckpt.config.vocab_size != expected_config->vocab_size)
      mismatch("vocab_size", ckpt.config.vocab_size, expected_config->vocab_size);
    if (ckpt.config.max_seq_len != expected_config->max_seq_len)
      mismatch("max_seq_len", ckpt.config.max_seq_len, expected_config->max_seq_len);
  }

  auto tensors = checkpoint_tensors(ckpt);
  const json& manifest = header.at("tensors");
  if (manifest.size() != tensors.size())
    throw DataError("checkpoint manifest lists " + std::to_string(manifest.size()) +
                    " tensors, expected " + std::to_string(tensors.size()));
  const size_t payload_start = 13 + header_len;
  for (size_t i = 0; i < tensors.size(); ++i) {
    const json& entry = manifest.at(i);
    if (entry.at("name").get<std::string>() != tensors[i].name)
      throw DataError("checkpoint manifest order mismatch at tensor " + tensors[i].name);
    auto shape = entry.at("shape");
    if (shape.at(0).get<Eigen::Index>() != tensors[i].rows ||
        shape.at(1).get<Eigen::Index>() != tensors[i].cols)
      throw DataError("checkpoint shape mismatch on tensor " + tensors[i].name);
    uint64_t offset = entry.at("offset").get<uint64_t>();
    const Eigen::Index n = tensors[i].rows * tensors[i].cols;
    if (payload_start + offset + static_cast<uint64_t>(n) * 4 > bytes.size())
      throw DataError("truncated payload at tensor " + tensors[i].name);
    for (Eigen::Index k = 0; k < n; ++k)
      tensors[i].data[k] = get_f32_le(bytes, payload_start + offset + static_cast<size_t>(k) * 4);
  }
  return ckpt;
}

Checkpoint load_checkpoint(const std::string& path, const model::ModelConfig* expected_config) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return checkpoint_from_bytes(ss.str(), expected_config);
}

uint64_t checkpoint_hash(const Checkpoint& ckpt) { return fnv1a(checkpoint_bytes(ckpt)); }

size_t TrainLog::reinit_count() const {
  size_t n = 0;
  for (const auto& e : events)
    if (e.find("reinit_affect_head") != std::string::npos) ++n;
  return n;
}

namespace {

// Distractor sequence: the true example's context with the candidate's
// response, left-truncating the context when needed. Resamples candidates
// whose response cannot fit at all.
corpus::TrainingExample build_distractor_example(const corpus::TrainingExample& ex,
                                                 const PhaseData& data, size_t max_seq_len,
                                                 Rng& rng) {
  for (int attempt = 0; attempt < 16; ++attempt) {
    const auto& cand = sample_distractor(ex, data, rng);
    std::vector<tok::TokenId> ctx(ex.input_ids.begin(),
                                  ex.input_ids.begin() + static_cast<long>(ex.context_len));
    size_t need = ctx.size() + cand.response.size() + 1;
    if (need > max_seq_len) {
      size_t overflow = need - max_seq_len;
      if (overflow > ctx.size() - 3) continue;  // keep <bos> <ctx> ... <sep>
      ctx.erase(ctx.begin() + 2, ctx.begin() + 2 + static_cast<long>(overflow));
    }
    corpus::TrainingExample dis;
    dis.context_len = ctx.size();
    dis.input_ids = std::move(ctx);
    dis.input_ids.insert(dis.input_ids.end(), cand.response.begin(), cand.response.end());
    dis.input_ids.push_back(ex.input_ids.back());  // <eos>, same id as the true example's
    dis.target_mask.assign(dis.input_ids.size(), false);
    for (size_t p = dis.context_len; p < dis.input_ids.size(); ++p) dis.target_mask[p] = true;
    dis.group_id = cand.group_id;
    dis.source_id = cand.source_id;
    return dis;
  }
  throw DataError("could not fit any distractor candidate for example " + ex.source_id);
}

}  // namespace

Checkpoint train(const std::map<std::string, PhaseData>& corpora,
                 model::ModelParams<float> params, const TrainConfig& cfg, uint64_t vocab_hash,
                 TrainLog& log) {
  cfg.validate();
  params.config.validate();
  const bool multitask = params.config.variant == model::Variant::multitask;

  AdamState<float> opt;
  opt.m = model::zeros_like(params);
  opt.v = model::zeros_like(params);

  Rng rng(cfg.seed);
  model::LossWeights weights{cfg.lambda_affect, cfg.lambda_choice};
  int64_t step = 0;

  for (size_t phase_idx = 0; phase_idx < cfg.phases.size(); ++phase_idx) {
    const TrainPhase& phase = cfg.phases[phase_idx];
    auto it = corpora.find(phase.corpus_id);
    if (it == corpora.end()) throw UsageError("phase references unknown corpus: " + phase.corpus_id);
    const PhaseData& data = it->second;
    if (data.examples.empty()) throw DataError("phase corpus is empty: " + phase.corpus_id);

    if (multitask && (params.config.affect_mode != phase.affect_mode ||
                      (phase.affect_mode == model::AffectMode::classification &&
                       params.config.affect_classes != phase.affect_classes))) {
      params = model::reinit_affect_head(params, phase.affect_mode, phase.affect_classes,
                                         cfg.seed ^ fnv1a("reinit" + std::to_string(phase_idx)));
      opt.m.config = params.config;
      opt.v.config = params.config;
      opt.m.w_affect = model::Mat<float>::Zero(params.w_affect.rows(), params.w_affect.cols());
      opt.v.w_affect = model::Mat<float>::Zero(params.w_affect.rows(), params.w_affect.cols());
      opt.m.b_affect = model::Vec<float>::Zero(params.b_affect.size());
      opt.v.b_affect = model::Vec<float>::Zero(params.b_affect.size());
      log.events.push_back("reinit_affect_head phase=" + std::to_string(phase_idx) + " mode=" +
                           model::to_string(phase.affect_mode));
    }

    // Fixed validation split: derived from the seed alone, not the stream.
    std::vector<size_t> indices(data.examples.size());
    std::iota(indices.begin(), indices.end(), 0);
    Rng val_rng(cfg.seed ^ fnv1a("val" + phase.corpus_id));
    val_rng.shuffle(indices);
    size_t n_val = static_cast<size_t>(static_cast<double>(indices.size()) * cfg.validation_fraction);
    if (n_val >= indices.size()) n_val = indices.size() - 1;
    std::vector<corpus::TrainingExample> val_examples;
    std::vector<size_t> train_indices;
    for (size_t i = 0; i < indices.size(); ++i) {
      if (i < n_val) val_examples.push_back(data.examples[indices[i]]);
      else train_indices.push_back(indices[i]);
    }

    for (int epoch = 1; epoch <= phase.epochs; ++epoch) {
      rng.shuffle(train_indices);
      double lm_sum = 0.0, aff_sum = 0.0, mc_sum = 0.0;
      size_t n_batches = 0;
      for (size_t start = 0; start < train_indices.size();
           start += static_cast<size_t>(cfg.batch_size)) {
        size_t end = std::min(train_indices.size(), start + static_cast<size_t>(cfg.batch_size));
        std::vector<corpus::TrainingExample> batch;
        std::vector<corpus::TrainingExample> distractors;
        for (size_t i = start; i < end; ++i) {
          const auto& ex = data.examples[train_indices[i]];
          batch.push_back(ex);
          if (multitask)
            distractors.push_back(build_distractor_example(
                ex, data, static_cast<size_t>(params.config.max_seq_len), rng));
        }

        model::ModelParams<float> grads = model::zeros_like(params);
        Rng* dropout_rng = params.config.dropout_rate > 0.0 ? &rng : nullptr;
        model::LossBreakdown loss =
            model::multitask_loss(params, batch, distractors, weights, &grads, dropout_rng);
        if (!std::isfinite(loss.total))
          throw NumericError("non-finite loss in phase " + std::to_string(phase_idx) + " epoch " +
                             std::to_string(epoch) + " batch " + std::to_string(n_batches) +
                             " (first example " + batch.front().source_id + ")");
        clip_global_norm(grads, cfg.clip_norm);
        adam_step(params, grads, opt, cfg.learning_rate);
        ++step;

        lm_sum += loss.lm;
        aff_sum += loss.affect;
        mc_sum += loss.choice;
        ++n_batches;
      }

      EpochLog entry;
      entry.phase = static_cast<int>(phase_idx);
      entry.corpus_id = phase.corpus_id;
      entry.epoch = epoch;
      entry.l_lm = n_batches ? lm_sum / static_cast<double>(n_batches) : 0.0;
      entry.l_aff = n_batches ? aff_sum / static_cast<double>(n_batches) : 0.0;
      entry.l_mc = n_batches ? mc_sum / static_cast<double>(n_batches) : 0.0;
      if (!val_examples.empty())
        entry.val_perplexity = metrics::perplexity(params, val_examples);
      log.epochs.push_back(std::move(entry));
    }
  }

  Checkpoint ckpt;
  ckpt.config = params.config;
  ckpt.vocab_hash = vocab_hash;
  ckpt.params = std::move(params);
  ckpt.opt = std::move(opt);
  ckpt.step = step;
  ckpt.phase = static_cast<int64_t>(cfg.phases.size()) - 1;
  return ckpt;
}

GradCheckResult grad_check(const model::ModelParams<double>& params,
                           const std::vector<corpus::TrainingExample>& batch,
                           const std::vector<corpus::TrainingExample>& distractors,
                           const model::LossWeights& weights, double eps, size_t min_coords,
                           uint64_t seed) {
  if (eps <= 0.0) throw UsageError("grad_check requires eps > 0");
  if (params.config.dropout_rate != 0.0)
    throw UsageError("grad_check requires dropout disabled");

  model::ModelParams<double> grads = model::zeros_like(params);
  model::multitask_loss(params, batch, distractors, weights, &grads);

  auto& mutable_params = const_cast<model::ModelParams<double>&>(params);
  auto pv = tensor_views(mutable_params);
  auto gv = tensor_views(grads);

  const bool lm_only = params.config.variant == model::Variant::lm_only;
  auto skipped = [&](const std::string& name) {
    return lm_only && (name.rfind("affect.", 0) == 0 || name.rfind("choice.", 0) == 0);
  };

  // At least one probe per eligible tensor, then random coordinates until
  // min_coords is reached.
  struct Coord {
    size_t tensor;
    Eigen::Index index;
  };
  Rng rng(seed);
  std::vector<Coord> coords;
  std::vector<size_t> eligible;
  for (size_t k = 0; k < pv.size(); ++k) {
    if (skipped(pv[k].name) || pv[k].size == 0) continue;
    eligible.push_back(k);
    coords.push_back({k, static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(pv[k].size)))});
  }
  while (coords.size() < min_coords) {
    size_t k = eligible[rng.below(eligible.size())];
    coords.push_back({k, static_cast<Eigen::Index>(rng.below(static_cast<uint64_t>(pv[k].size)))});
  }

  GradCheckResult result;
  result.coords_probed = coords.size();
  for (const auto& c : coords) {
    double* slot = pv[c.tensor].data + c.index;
    const double original = *slot;
    *slot = original + eps;
    double plus = model::multitask_loss(params, batch, distractors, weights).total;
    *slot = original - eps;
    double minus = model::multitask_loss(params, batch, distractors, weights).total;
    *slot = original;
    double fd = (plus - minus) / (2.0 * eps);
    double analytic = gv[c.tensor].data[c.index];
    double denom = std::max({std::fabs(fd), std::fabs(analytic), 1.0});
    double rel = std::fabs(fd - analytic) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_tensor = pv[c.tensor].name;
    }
  }
  return result;
}

}  // namespace mtaf::trainer
