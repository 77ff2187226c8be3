#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>

#include "mtaf/trainer.hpp"

using namespace mtaf;
using namespace mtaf::trainer;

namespace {

namespace fs = std::filesystem;

// Tiny synthetic RDG corpus: n_scenarios scenarios, each with a handful of
// distinct utterances built from a small lexicon.
corpus::RdgCorpus synthetic_rdg(int n_scenarios, int utts_per_scenario, uint64_t seed) {
  const char* lexicon[] = {"go",  "left", "right", "map",  "good", "turn",
                           "yes", "no",   "fast",  "slow", "team", "country"};
  Rng rng(seed);
  corpus::RdgCorpus c;
  for (int s = 0; s < n_scenarios; ++s) {
    corpus::Scenario sc;
    sc.id = "s" + std::to_string(s);
    sc.description = "scene " + std::string(lexicon[s % 12]) + " " + std::to_string(s);
    sc.affect_target = corpus::all_affects()[s % 3];
    c.scenario_index.emplace(sc.id, c.scenarios.size());
    c.scenarios.push_back(sc);
    for (int u = 0; u < utts_per_scenario; ++u) {
      corpus::Utterance ut;
      ut.id = sc.id + "_u" + std::to_string(u);
      ut.scenario_id = sc.id;
      ut.affect_target = corpus::all_affects()[u % 3];
      std::string text;
      for (int w = 0; w < 3; ++w) text += std::string(lexicon[rng.below(12)]) + " ";
      text += std::to_string(s) + " " + std::to_string(u);
      ut.text = text;
      ut.aggregated.affect = static_cast<double>(static_cast<int>(rng.below(9))) - 4.0;
      c.utterances.push_back(ut);
    }
  }
  return c;
}

tok::Vocab vocab_for(const corpus::RdgCorpus& c) {
  std::vector<std::string> texts;
  for (const auto& s : c.scenarios) texts.push_back(s.description);
  for (const auto& u : c.utterances) texts.push_back(u.text);
  return tok::Vocab::fit(texts, 512);
}

model::ModelConfig small_config(int vocab, model::Variant variant = model::Variant::multitask) {
  model::ModelConfig cfg;
  cfg.d_model = 32;
  cfg.n_layers = 2;
  cfg.n_heads = 4;
  cfg.d_ff = 64;
  cfg.vocab_size = vocab;
  cfg.max_seq_len = 48;
  cfg.variant = variant;
  cfg.affect_mode = model::AffectMode::regression;
  return cfg;
}

}  // namespace

TEST_CASE("sample_distractor always picks another scenario") {
  auto c = synthetic_rdg(4, 3, 1);
  auto vocab = vocab_for(c);
  auto ex = corpus::build_example(vocab, c.scenarios[0], c.utterances[0], 48);
  Rng rng(5);
  for (int i = 0; i < 200; ++i)
    CHECK(sample_distractor(ex, c, rng).scenario_id != ex.group_id);
}

TEST_CASE("sample_distractor rejects single-scenario corpora") {
  auto c = synthetic_rdg(1, 4, 2);
  auto vocab = vocab_for(c);
  auto ex = corpus::build_example(vocab, c.scenarios[0], c.utterances[0], 48);
  Rng rng(5);
  CHECK_THROWS_AS(sample_distractor(ex, c, rng), DataError);
}

TEST_CASE("sample_distractor is uniform over eligible utterances (chi-square)") {
  // 2 scenarios with 1 + 4 utterances: sampling for scenario 0 has 4 eligible
  auto c = synthetic_rdg(2, 4, 3);
  c.utterances.erase(c.utterances.begin() + 1, c.utterances.begin() + 4);  // s0 keeps 1 utterance
  auto vocab = vocab_for(c);
  auto ex = corpus::build_example(vocab, c.scenarios[0], c.utterances[0], 48);
  Rng rng(17);
  std::map<std::string, size_t> counts;
  const size_t draws = 10000;
  for (size_t i = 0; i < draws; ++i) ++counts[sample_distractor(ex, c, rng).id];
  REQUIRE(counts.size() == 4);
  double expected = draws / 4.0;
  double chi2 = 0.0;
  for (const auto& [id, n] : counts)
    chi2 += (n - expected) * (n - expected) / expected;
  CHECK(chi2 < 11.345);  // chi-square critical value, 3 df, alpha = 0.01
}

TEST_CASE("adam step with zero gradient leaves parameters unchanged") {
  auto params = model::init<float>(small_config(64), 7);
  auto before = params;
  AdamState<float> state;
  state.m = model::zeros_like(params);
  state.v = model::zeros_like(params);
  auto zero_grads = model::zeros_like(params);
  adam_step(params, zero_grads, state, 1e-3);
  bool identical = true;
  model::for_each_tensor(params, [&](const std::string& name, const auto& t) {
    model::for_each_tensor(before, [&](const std::string& n2, const auto& t2) {
      if (n2 == name && (t.array() != t2.array()).any()) identical = false;
    });
  });
  CHECK(identical);
}

TEST_CASE("gradient clipping caps the global norm") {
  auto grads = model::init<float>(small_config(64), 3);  // random 'gradients'
  double norm = global_norm(grads);
  CHECK(norm > 1.0);
  clip_global_norm(grads, 1.0);
  CHECK(global_norm(grads) <= 1.0 + 1e-9);
  // already-small gradients pass through untouched
  auto small = model::zeros_like(grads);
  small.wte(0, 0) = 0.25f;
  clip_global_norm(small, 1.0);
  CHECK(small.wte(0, 0) == 0.25f);
}

TEST_CASE("checkpoint round trip is bitwise exact") {
  Checkpoint ckpt;
  ckpt.config = small_config(96);
  ckpt.vocab_hash = 0xdeadbeefcafef00dull;
  ckpt.params = model::init<float>(ckpt.config, 11);
  ckpt.opt.m = model::init<float>(ckpt.config, 12);
  ckpt.opt.v = model::init<float>(ckpt.config, 13);
  ckpt.opt.t = 42;
  ckpt.step = 1234;
  ckpt.phase = 1;

  auto path = fs::temp_directory_path() / "mtaf_ckpt_test.mtaf";
  save_checkpoint(ckpt, path.string());
  Checkpoint loaded = load_checkpoint(path.string());
  fs::remove(path);

  CHECK(loaded.vocab_hash == ckpt.vocab_hash);
  CHECK(loaded.step == 1234);
  CHECK(loaded.phase == 1);
  CHECK(loaded.opt.t == 42);
  CHECK(checkpoint_hash(loaded) == checkpoint_hash(ckpt));
  bool identical = true;
  model::for_each_tensor(loaded.params, [&](const std::string& name, const auto& t) {
    model::for_each_tensor(ckpt.params, [&](const std::string& n2, const auto& t2) {
      if (n2 != name) return;
      for (Eigen::Index i = 0; i < t.size(); ++i)
        if (std::memcmp(&t.data()[i], &t2.data()[i], sizeof(float)) != 0) identical = false;
    });
  });
  CHECK(identical);
}

TEST_CASE("checkpoint loading rejects bad magic, truncation, and shape drift") {
  Checkpoint ckpt;
  ckpt.config = small_config(64);
  ckpt.params = model::init<float>(ckpt.config, 1);
  ckpt.opt.m = model::zeros_like(ckpt.params);
  ckpt.opt.v = model::zeros_like(ckpt.params);
  std::string bytes = checkpoint_bytes(ckpt);

  std::string bad_magic = bytes;
  bad_magic[0] = 'X';
  CHECK_THROWS_WITH_AS(checkpoint_from_bytes(bad_magic),
                       "bad checkpoint magic bytes (expected MTAF)", DataError);

  std::string truncated = bytes.substr(0, bytes.size() - 17);
  try {
    checkpoint_from_bytes(truncated);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("truncated payload") != std::string::npos);
  }

  model::ModelConfig other = small_config(64);
  other.d_model = 16;
  other.n_heads = 2;
  try {
    checkpoint_from_bytes(bytes, &other);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("shape mismatch") != std::string::npos);
  }
}

TEST_CASE("train overfits a small corpus and is seed-deterministic") {
  auto c = synthetic_rdg(4, 2, 5);
  auto vocab = vocab_for(c);
  auto cfg = small_config(static_cast<int>(vocab.size()), model::Variant::lm_only);
  auto data = make_phase_data(c, vocab, 48);

  TrainConfig tc;
  tc.learning_rate = 3e-3;
  tc.batch_size = 4;
  tc.seed = 9;
  tc.validation_fraction = 0.0;
  tc.phases = {{"rdg", model::AffectMode::regression, 32, 60}};

  TrainLog log1, log2;
  auto params = model::init<float>(cfg, tc.seed);
  Checkpoint a = trainer::train({{"rdg", data}}, params, tc, vocab.hash(), log1);
  Checkpoint b = trainer::train({{"rdg", data}}, params, tc, vocab.hash(), log2);

  CHECK(checkpoint_hash(a) == checkpoint_hash(b));
  REQUIRE(!log1.epochs.empty());
  CHECK(log1.epochs.back().l_lm < log1.epochs.front().l_lm);
  CHECK(log1.epochs.back().l_lm < 0.5);  // 8 short lines memorize quickly
}

TEST_CASE("phase plan switching classification to regression reinits the head once") {
  auto c = synthetic_rdg(4, 3, 6);
  auto vocab = vocab_for(c);
  auto cfg = small_config(static_cast<int>(vocab.size()));
  cfg.affect_mode = model::AffectMode::classification;
  cfg.affect_classes = 8;

  // both phases draw from the same corpus, but in different affect modes;
  // examples need class labels for the classification phase
  auto data = make_phase_data(c, vocab, 48);
  for (auto& ex : data.examples) ex.affect_class = 3;

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.seed = 21;
  tc.validation_fraction = 0.0;
  tc.phases = {{"rdg", model::AffectMode::classification, 8, 1},
               {"rdg", model::AffectMode::regression, 32, 1}};

  TrainLog log;
  auto params = model::init<float>(cfg, tc.seed);
  Checkpoint ckpt = trainer::train({{"rdg", data}}, params, tc, vocab.hash(), log);
  CHECK(log.reinit_count() == 1);
  CHECK(ckpt.config.affect_mode == model::AffectMode::regression);
  CHECK(ckpt.params.w_affect.cols() == 1);
}

TEST_CASE("zero-epoch phase transition alters only the affect head") {
  auto c = synthetic_rdg(3, 2, 7);
  auto vocab = vocab_for(c);
  auto cfg = small_config(static_cast<int>(vocab.size()));
  cfg.affect_mode = model::AffectMode::classification;
  cfg.affect_classes = 8;
  auto data = make_phase_data(c, vocab, 48);

  TrainConfig tc;
  tc.seed = 33;
  tc.validation_fraction = 0.0;
  tc.phases = {{"rdg", model::AffectMode::classification, 8, 0},
               {"rdg", model::AffectMode::regression, 32, 0}};

  auto params = model::init<float>(cfg, tc.seed);
  auto before = params;
  TrainLog log;
  Checkpoint ckpt = trainer::train({{"rdg", data}}, params, tc, vocab.hash(), log);
  CHECK(log.reinit_count() == 1);

  // bitwise identical outside the head
  bool body_same = true;
  model::for_each_tensor(ckpt.params, [&](const std::string& name, const auto& t) {
    if (name.rfind("affect.", 0) == 0) return;
    model::for_each_tensor(before, [&](const std::string& n2, const auto& t2) {
      if (n2 != name) return;
      for (Eigen::Index i = 0; i < t.size(); ++i)
        if (std::memcmp(&t.data()[i], &t2.data()[i], sizeof(float)) != 0) body_same = false;
    });
  });
  CHECK(body_same);
  CHECK(ckpt.params.w_affect.cols() == 1);   // head re-shaped
}

TEST_CASE("train logs per-epoch losses and validation perplexity") {
  auto c = synthetic_rdg(6, 4, 8);
  auto vocab = vocab_for(c);
  auto cfg = small_config(static_cast<int>(vocab.size()));
  auto data = make_phase_data(c, vocab, 48);

  TrainConfig tc;
  tc.learning_rate = 1e-3;
  tc.batch_size = 4;
  tc.seed = 17;
  tc.validation_fraction = 0.2;
  tc.phases = {{"rdg", model::AffectMode::regression, 32, 2}};

  TrainLog log;
  auto params = model::init<float>(cfg, tc.seed);
  trainer::train({{"rdg", data}}, params, tc, vocab.hash(), log);
  REQUIRE(log.epochs.size() == 2);
  for (const auto& e : log.epochs) {
    CHECK(e.l_lm > 0.0);
    CHECK(e.l_aff >= 0.0);
    CHECK(e.l_mc > 0.0);
    REQUIRE(e.val_perplexity.has_value());
    CHECK(*e.val_perplexity > 1.0);
  }
}

TEST_CASE("non-finite loss aborts with a batch-naming diagnostic") {
  auto c = synthetic_rdg(4, 3, 11);
  auto vocab = vocab_for(c);
  auto cfg = small_config(static_cast<int>(vocab.size()), model::Variant::lm_only);
  auto data = make_phase_data(c, vocab, 48);

  TrainConfig tc;
  tc.learning_rate = 1e18;  // divergence by construction
  tc.clip_norm = 0.0;       // clipping off
  tc.batch_size = 4;
  tc.seed = 3;
  tc.validation_fraction = 0.0;
  tc.phases = {{"rdg", model::AffectMode::regression, 32, 50}};

  TrainLog log;
  auto params = model::init<float>(cfg, tc.seed);
  try {
    trainer::train({{"rdg", data}}, params, tc, vocab.hash(), log);
    FAIL("expected NumericError");
  } catch (const NumericError& e) {
    std::string msg = e.what();
    CHECK(msg.find("non-finite loss") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}

TEST_CASE("train config validation") {
  TrainConfig tc;
  tc.phases = {{"rdg", model::AffectMode::regression, 32, 1}};
  CHECK_NOTHROW(tc.validate());
  tc.learning_rate = 0.0;
  CHECK_THROWS_AS(tc.validate(), UsageError);
  tc = TrainConfig{};
  tc.phases.clear();
  CHECK_THROWS_AS(tc.validate(), UsageError);
  tc = TrainConfig{};
  tc.phases = {{"rdg", model::AffectMode::regression, 32, 1}};
  tc.batch_size = 0;
  CHECK_THROWS_AS(tc.validate(), UsageError);
}

TEST_CASE("grad_check responds to epsilon and skips heads under lm_only") {
  auto c = synthetic_rdg(3, 2, 13);
  auto vocab = vocab_for(c);
  model::ModelConfig cfg;
  cfg.d_model = 16;
  cfg.n_layers = 2;
  cfg.n_heads = 2;
  cfg.d_ff = 32;
  cfg.vocab_size = static_cast<int>(vocab.size());
  cfg.max_seq_len = 48;
  cfg.variant = model::Variant::multitask;
  auto params = model::init<double>(cfg, 19);

  auto data = make_phase_data(c, vocab, 48);
  std::vector<corpus::TrainingExample> batch = {data.examples[0]};
  batch[0].affect_scalar = 1.0;
  Rng rng(2);
  std::vector<corpus::TrainingExample> distractors;
  {
    const auto& cand = sample_distractor(batch[0], data, rng);
    std::vector<tok::TokenId> ctx(batch[0].input_ids.begin(),
                                  batch[0].input_ids.begin() +
                                      static_cast<long>(batch[0].context_len));
    distractors.push_back(corpus::assemble_example(vocab, ctx, cand.response, 48));
  }

  auto fine = grad_check(params, batch, distractors, {}, 1e-4, 50, 7);
  auto coarse = grad_check(params, batch, distractors, {}, 1e-2, 50, 7);
  CHECK(fine.max_rel_error < 1e-4);
  CHECK(coarse.max_rel_error > fine.max_rel_error);

  // lm_only: head tensors are not probed
  cfg.variant = model::Variant::lm_only;
  auto lm_params = model::init<double>(cfg, 19);
  auto res = grad_check(lm_params, batch, {}, {}, 1e-4, 50, 7);
  CHECK(res.max_rel_error < 1e-4);
  CHECK(res.worst_tensor.rfind("affect.", 0) != 0);
  CHECK(res.worst_tensor.rfind("choice.", 0) != 0);

  // dropout must be off
  cfg.dropout_rate = 0.5;
  auto dropout_params = model::init<double>(cfg, 19);
  CHECK_THROWS_AS(grad_check(dropout_params, batch, {}, {}, 1e-4, 50, 7), UsageError);
}
