#include "mtaf/cli.hpp"

#include <algorithm>
#include <fcntl.h>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <unistd.h>

#include <CLI11.hpp>
#include <json.hpp>

#include "mtaf/corpus.hpp"
#include "mtaf/evalpipe.hpp"
#include "mtaf/metrics.hpp"
#include "mtaf/stats.hpp"

namespace mtaf::cli {

using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot open config file: " + path);
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw UsageError("malformed JSON in " + path);
  return j;
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path);
  out << content;
}

// Every run drops a manifest next to its outputs: enough to reproduce the
// artifact byte for byte (no timestamps on purpose).
void write_manifest(const std::string& path, const std::string& command,
                    const ExperimentConfig* config, const json& seeds,
                    const std::vector<std::string>& inputs,
                    const std::vector<std::string>& outputs) {
  json j{{"command", command},
         {"version", kVersion},
         {"seeds", seeds},
         {"inputs", inputs},
         {"outputs", outputs}};
  if (config != nullptr) j["config_hash"] = to_hex(config->hash());
  write_text_file(path, j.dump(2) + "\n");
}

// Exclusive ownership of a checkpoint directory while training runs.
class LockFile {
 public:
  explicit LockFile(const std::string& path) : path_(path) {
    int fd = ::open(path.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd < 0)
      throw UsageError("checkpoint directory is locked (remove " + path + " if stale)");
    ::close(fd);
  }
  ~LockFile() { ::unlink(path_.c_str()); }
  LockFile(const LockFile&) = delete;
  LockFile& operator=(const LockFile&) = delete;

 private:
  std::string path_;
};

std::string default_data_label(const trainer::TrainConfig& cfg) {
  std::string label;
  for (const auto& ph : cfg.phases) {
    if (!label.empty()) label += "_";
    label += ph.corpus_id;
  }
  return label.empty() ? "none" : label;
}

}  // namespace

ExperimentConfig ExperimentConfig::from_file(const std::string& path) {
  json j = read_json_file(path);
  ExperimentConfig cfg;
  try {
    if (j.contains("corpus")) {
      const auto& c = j.at("corpus");
      if (c.contains("rdg")) cfg.rdg_path = c.at("rdg").get<std::string>();
      if (c.contains("ed")) cfg.ed_path = c.at("ed").get<std::string>();
      if (c.contains("ed_manifest")) cfg.ed_manifest_path = c.at("ed_manifest").get<std::string>();
    }
    if (j.contains("tokenizer") && j.at("tokenizer").contains("max_vocab"))
      cfg.max_vocab = j.at("tokenizer").at("max_vocab").get<size_t>();
    if (j.contains("model")) {
      const auto& m = j.at("model");
      auto opt_int = [&](const char* k, int& slot) {
        if (m.contains(k)) slot = m.at(k).get<int>();
      };
      opt_int("d_model", cfg.model.d_model);
      opt_int("n_layers", cfg.model.n_layers);
      opt_int("n_heads", cfg.model.n_heads);
      opt_int("d_ff", cfg.model.d_ff);
      opt_int("max_seq_len", cfg.model.max_seq_len);
      opt_int("affect_classes", cfg.model.affect_classes);
      if (m.contains("dropout_rate")) cfg.model.dropout_rate = m.at("dropout_rate").get<double>();
      if (m.contains("variant"))
        cfg.model.variant = model::variant_from_string(m.at("variant").get<std::string>());
      if (m.contains("affect_mode"))
        cfg.model.affect_mode = model::affect_mode_from_string(m.at("affect_mode").get<std::string>());
    }
    if (j.contains("train")) {
      const auto& t = j.at("train");
      if (t.contains("learning_rate")) cfg.train.learning_rate = t.at("learning_rate").get<double>();
      if (t.contains("batch_size")) cfg.train.batch_size = t.at("batch_size").get<int>();
      if (t.contains("seed")) cfg.train.seed = t.at("seed").get<uint64_t>();
      if (t.contains("lambda_affect")) cfg.train.lambda_affect = t.at("lambda_affect").get<double>();
      if (t.contains("lambda_choice")) cfg.train.lambda_choice = t.at("lambda_choice").get<double>();
      if (t.contains("clip_norm")) cfg.train.clip_norm = t.at("clip_norm").get<double>();
      if (t.contains("validation_fraction"))
        cfg.train.validation_fraction = t.at("validation_fraction").get<double>();
      if (t.contains("phases")) {
        for (const auto& p : t.at("phases")) {
          trainer::TrainPhase phase;
          phase.corpus_id = p.at("corpus").get<std::string>();
          if (p.contains("affect_mode"))
            phase.affect_mode = model::affect_mode_from_string(p.at("affect_mode").get<std::string>());
          if (p.contains("affect_classes")) phase.affect_classes = p.at("affect_classes").get<int>();
          if (p.contains("epochs")) phase.epochs = p.at("epochs").get<int>();
          cfg.train.phases.push_back(phase);
        }
      }
    }
    if (j.contains("decode")) {
      const auto& d = j.at("decode");
      if (d.contains("strategy"))
        cfg.decode.strategy = gen::strategy_from_string(d.at("strategy").get<std::string>());
      if (d.contains("k")) cfg.decode.k = d.at("k").get<int>();
      if (d.contains("p")) cfg.decode.p = d.at("p").get<double>();
      if (d.contains("temperature")) cfg.decode.temperature = d.at("temperature").get<double>();
      if (d.contains("max_new_tokens")) cfg.decode.max_new_tokens = d.at("max_new_tokens").get<int>();
      if (d.contains("seed")) cfg.decode.seed = d.at("seed").get<uint64_t>();
    }
    if (j.contains("protocol")) {
      const auto& p = j.at("protocol");
      if (p.contains("scenarios_per_split"))
        cfg.scenarios_per_split = p.at("scenarios_per_split").get<size_t>();
      if (p.contains("samples_per_context"))
        cfg.samples_per_context = p.at("samples_per_context").get<size_t>();
      if (p.contains("split_seed")) cfg.split_seed = p.at("split_seed").get<uint64_t>();
    }
    if (j.contains("labels")) {
      const auto& l = j.at("labels");
      if (l.contains("model")) cfg.model_label = l.at("model").get<std::string>();
      if (l.contains("data")) cfg.data_label = l.at("data").get<std::string>();
    }
  } catch (const json::exception& e) {
    throw UsageError("invalid config " + path + ": " + e.what());
  }
  if (cfg.scenarios_per_split == 0 || cfg.samples_per_context == 0)
    throw UsageError("protocol counts must be positive");
  if (cfg.model_label.empty()) cfg.model_label = model::to_string(cfg.model.variant);
  if (cfg.data_label.empty()) cfg.data_label = default_data_label(cfg.train);
  return cfg;
}

std::string ExperimentConfig::canonical_json() const {
  json phases = json::array();
  for (const auto& p : train.phases)
    phases.push_back({{"corpus", p.corpus_id},
                      {"affect_mode", model::to_string(p.affect_mode)},
                      {"affect_classes", p.affect_classes},
                      {"epochs", p.epochs}});
  json j{
      {"corpus", {{"rdg", rdg_path}, {"ed", ed_path}, {"ed_manifest", ed_manifest_path}}},
      {"tokenizer", {{"max_vocab", max_vocab}}},
      {"model",
       {{"d_model", model.d_model},
        {"n_layers", model.n_layers},
        {"n_heads", model.n_heads},
        {"d_ff", model.d_ff},
        {"max_seq_len", model.max_seq_len},
        {"dropout_rate", model.dropout_rate},
        {"variant", model::to_string(model.variant)},
        {"affect_mode", model::to_string(model.affect_mode)},
        {"affect_classes", model.affect_classes}}},
      {"train",
       {{"learning_rate", train.learning_rate},
        {"batch_size", train.batch_size},
        {"seed", train.seed},
        {"lambda_affect", train.lambda_affect},
        {"lambda_choice", train.lambda_choice},
        {"clip_norm", train.clip_norm},
        {"validation_fraction", train.validation_fraction},
        {"phases", phases}}},
      {"decode",
       {{"strategy", gen::to_string(decode.strategy)},
        {"k", decode.k},
        {"p", decode.p},
        {"temperature", decode.temperature},
        {"max_new_tokens", decode.max_new_tokens},
        {"seed", decode.seed}}},
      {"protocol",
       {{"scenarios_per_split", scenarios_per_split},
        {"samples_per_context", samples_per_context},
        {"split_seed", split_seed}}},
      {"labels", {{"model", model_label}, {"data", data_label}}}};
  return j.dump();
}

uint64_t ExperimentConfig::hash() const { return fnv1a(canonical_json()); }

void ExperimentConfig::validate_paths() const {
  for (const auto& p : {rdg_path, ed_path, ed_manifest_path})
    if (!p.empty() && !fs::exists(p)) throw UsageError("configured path does not exist: " + p);
}

namespace {

// Command-line values that take precedence over the config file.
struct Overrides {
  std::optional<uint64_t> train_seed;
  std::optional<uint64_t> decode_seed;
  std::optional<uint64_t> split_seed;
  std::optional<std::string> variant;
  std::optional<std::string> strategy;
  std::optional<int> max_new_tokens;
  std::optional<std::string> model_label;
  std::optional<std::string> data_label;
};

ExperimentConfig load_config(const std::string& path, const Overrides& ov) {
  ExperimentConfig cfg = ExperimentConfig::from_file(path);
  if (ov.train_seed) cfg.train.seed = *ov.train_seed;
  if (ov.decode_seed) cfg.decode.seed = *ov.decode_seed;
  if (ov.split_seed) cfg.split_seed = *ov.split_seed;
  if (ov.variant) cfg.model.variant = model::variant_from_string(*ov.variant);
  if (ov.strategy) cfg.decode.strategy = gen::strategy_from_string(*ov.strategy);
  if (ov.max_new_tokens) cfg.decode.max_new_tokens = *ov.max_new_tokens;
  if (ov.model_label) cfg.model_label = *ov.model_label;
  if (ov.data_label) cfg.data_label = *ov.data_label;
  return cfg;
}

std::vector<std::string> corpus_texts(const ExperimentConfig& cfg) {
  std::vector<std::string> texts;
  if (!cfg.rdg_path.empty()) {
    auto rdg = corpus::load_rdg(cfg.rdg_path);
    for (const auto& s : rdg.scenarios) texts.push_back(s.description);
    for (const auto& u : rdg.utterances) texts.push_back(u.text);
  }
  if (!cfg.ed_path.empty()) {
    auto ed = corpus::load_ed(cfg.ed_path, cfg.ed_manifest_path);
    for (const auto& c : ed.conversations) {
      texts.push_back(c.situation);
      for (const auto& t : c.turns) texts.push_back(t.text);
    }
  }
  return texts;
}

int cmd_fit_vocab(const std::string& config_path, const std::string& out_path) {
  ExperimentConfig cfg = load_config(config_path, {});
  cfg.validate_paths();
  if (cfg.rdg_path.empty() && cfg.ed_path.empty())
    throw UsageError("fit-vocab needs at least one corpus path in the config");
  tok::Vocab vocab = tok::Vocab::fit(corpus_texts(cfg), cfg.max_vocab);
  vocab.save(out_path);
  write_manifest(out_path + ".manifest.json", "fit-vocab", &cfg, json::object(),
                 {config_path, cfg.rdg_path, cfg.ed_path}, {out_path});
  std::cout << "vocab of " << vocab.size() << " tokens -> " << out_path << "\n";
  return kOk;
}

int cmd_train(const std::string& config_path, const std::string& vocab_path,
              const std::string& out_dir, const Overrides& ov) {
  ExperimentConfig cfg = load_config(config_path, ov);
  cfg.validate_paths();
  tok::Vocab vocab = tok::Vocab::load(vocab_path);

  fs::create_directories(out_dir);
  LockFile lock(out_dir + "/.lock");

  model::ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  mc.validate();

  std::map<std::string, trainer::PhaseData> corpora;
  for (const auto& phase : cfg.train.phases) {
    if (corpora.count(phase.corpus_id)) continue;
    if (phase.corpus_id == "rdg") {
      auto rdg = corpus::load_rdg(cfg.rdg_path);
      auto split = corpus::make_split(rdg, cfg.split_seed, cfg.scenarios_per_split);
      auto subset = corpus::train_utterances(rdg, split);
      corpora.emplace("rdg", trainer::make_phase_data(rdg, vocab,
                                                    static_cast<size_t>(mc.max_seq_len), &subset));
    } else if (phase.corpus_id == "ed") {
      auto ed = corpus::load_ed(cfg.ed_path, cfg.ed_manifest_path);
      if (mc.variant == model::Variant::multitask &&
          (phase.affect_mode != model::AffectMode::classification ||
           phase.affect_classes != static_cast<int>(ed.labels.size())))
        throw UsageError("ed phases need a classification affect head with " +
                         std::to_string(ed.labels.size()) + " classes");
      corpora.emplace("ed", trainer::make_phase_data(ed, vocab, static_cast<size_t>(mc.max_seq_len)));
    } else {
      throw UsageError("unknown phase corpus id: " + phase.corpus_id);
    }
  }

  // Start the head in the first multitask phase's mode so exactly the
  // planned re-initializations occur.
  if (mc.variant == model::Variant::multitask && !cfg.train.phases.empty()) {
    mc.affect_mode = cfg.train.phases.front().affect_mode;
    if (mc.affect_mode == model::AffectMode::classification)
      mc.affect_classes = cfg.train.phases.front().affect_classes;
  }

  auto params = model::init<float>(mc, cfg.train.seed);
  trainer::TrainLog log;
  trainer::Checkpoint ckpt = trainer::train(corpora, std::move(params), cfg.train, vocab.hash(), log);

  std::string ckpt_path = out_dir + "/checkpoint.mtaf";
  trainer::save_checkpoint(ckpt, ckpt_path);

  std::string log_path = out_dir + "/train_log.jsonl";
  {
    std::ofstream out(log_path, std::ios::binary);
    for (const auto& e : log.events) out << json{{"event", e}}.dump() << "\n";
    for (const auto& ep : log.epochs) {
      json j{{"phase", ep.phase}, {"corpus", ep.corpus_id}, {"epoch", ep.epoch},
             {"l_lm", ep.l_lm},   {"l_aff", ep.l_aff},      {"l_mc", ep.l_mc}};
      j["val_perplexity"] = ep.val_perplexity ? json(*ep.val_perplexity) : json();
      out << j.dump() << "\n";
    }
  }
  write_manifest(out_dir + "/manifest.json", "train", &cfg,
                 json{{"train_seed", cfg.train.seed}, {"split_seed", cfg.split_seed}},
                 {config_path, cfg.rdg_path, cfg.ed_path, vocab_path}, {ckpt_path, log_path});
  std::cout << "trained " << ckpt.step << " steps -> " << ckpt_path << "\n";
  return kOk;
}

struct GenerationRecord {
  std::string model, data, scenario_id, affect, utterance_id, text, split;
  int sample_index = 0;
  std::optional<double> bleu;
};

std::vector<GenerationRecord> load_generations(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open generations file: " + path);
  std::vector<GenerationRecord> records;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded())
      throw DataError("malformed generation record at line " + std::to_string(line_no));
    GenerationRecord r;
    r.model = j.at("model").get<std::string>();
    r.data = j.at("data").get<std::string>();
    r.scenario_id = j.at("scenario_id").get<std::string>();
    r.affect = j.at("affect").get<std::string>();
    r.utterance_id = j.at("utterance_id").get<std::string>();
    r.text = j.at("text").get<std::string>();
    if (j.contains("split")) r.split = j.at("split").get<std::string>();
    r.sample_index = j.at("sample_index").get<int>();
    if (j.contains("bleu") && !j.at("bleu").is_null()) r.bleu = j.at("bleu").get<double>();
    records.push_back(std::move(r));
  }
  return records;
}

int cmd_generate(const std::string& config_path, const std::string& vocab_path,
                 const std::string& ckpt_path, const std::string& out_path,
                 const Overrides& ov) {
  ExperimentConfig cfg = load_config(config_path, ov);
  cfg.validate_paths();
  tok::Vocab vocab = tok::Vocab::load(vocab_path);
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  trainer::Checkpoint ckpt = trainer::load_checkpoint(ckpt_path, &mc);
  if (ckpt.vocab_hash != vocab.hash())
    throw DataError("vocab hash mismatch: checkpoint was trained with a different vocabulary");

  auto rdg = corpus::load_rdg(cfg.rdg_path);
  auto split = corpus::make_split(rdg, cfg.split_seed, cfg.scenarios_per_split);

  std::vector<std::pair<std::string, std::string>> contexts;  // (scenario id, split tag)
  for (const auto& sid : split.test_seen) contexts.push_back({sid, "seen"});
  for (const auto& sid : split.test_unseen) contexts.push_back({sid, "unseen"});

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_path);
  size_t count = 0;
  for (const auto& [sid, split_tag] : contexts) {
    const corpus::Scenario& scenario = rdg.scenario(sid);
    for (corpus::Affect affect : corpus::all_affects()) {
      for (size_t k = 0; k < cfg.samples_per_context; ++k) {
        auto context = corpus::build_rdg_context(
            vocab, scenario.description, affect, static_cast<size_t>(mc.max_seq_len),
            static_cast<size_t>(cfg.decode.max_new_tokens));
        gen::DecodeConfig dc = cfg.decode;
        dc.seed = fnv1a(cfg.model_label + "|" + cfg.data_label + "|" + sid + "|" +
                        corpus::to_string(affect) + "|" + std::to_string(k),
                        cfg.decode.seed ^ 0x5u);
        auto ids = gen::generate(ckpt.params, vocab, context, dc);
        std::string uid = cfg.model_label + "-" + cfg.data_label + "-" + sid + "-" +
                          corpus::to_string(affect) + "-" + std::to_string(k);
        json j{{"model", cfg.model_label},
               {"data", cfg.data_label},
               {"scenario_id", sid},
               {"affect", corpus::to_string(affect)},
               {"sample_index", k},
               {"utterance_id", uid},
               {"split", split_tag},
               {"text", vocab.decode(ids)}};
        out << j.dump() << "\n";
        ++count;
      }
    }
  }
  write_manifest(out_path + ".manifest.json", "generate", &cfg,
                 json{{"decode_seed", cfg.decode.seed}, {"split_seed", cfg.split_seed}},
                 {config_path, cfg.rdg_path, vocab_path, ckpt_path}, {out_path});
  std::cout << count << " generation records -> " << out_path << "\n";
  return kOk;
}

int cmd_score(const std::string& config_path, const std::string& vocab_path,
              const std::string& ckpt_path, const std::string& generations_path,
              const std::string& out_path, const Overrides& ov) {
  ExperimentConfig cfg = load_config(config_path, ov);
  cfg.validate_paths();
  tok::Vocab vocab = tok::Vocab::load(vocab_path);
  model::ModelConfig mc = cfg.model;
  mc.vocab_size = static_cast<int>(vocab.size());
  trainer::Checkpoint ckpt = trainer::load_checkpoint(ckpt_path, &mc);
  if (ckpt.vocab_hash != vocab.hash())
    throw DataError("vocab hash mismatch: checkpoint was trained with a different vocabulary");

  auto rdg = corpus::load_rdg(cfg.rdg_path);
  auto split = corpus::make_split(rdg, cfg.split_seed, cfg.scenarios_per_split);
  auto records = load_generations(generations_path);

  // references never cross scenario+affect cells
  auto references = [&](const std::string& sid, const std::string& affect) {
    std::vector<std::vector<std::string>> refs;
    for (const auto& u : rdg.utterances)
      if (u.source == "human" && u.scenario_id == sid &&
          corpus::to_string(u.affect_target) == affect)
        refs.push_back(split_words(u.text));
    return refs;
  };

  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_path);
  double bleu_sum = 0.0;
  size_t bleu_n = 0;
  for (const auto& r : records) {
    json j{{"model", r.model},           {"data", r.data},
           {"scenario_id", r.scenario_id}, {"affect", r.affect},
           {"sample_index", r.sample_index}, {"utterance_id", r.utterance_id},
           {"split", r.split},           {"text", r.text}};
    auto refs = references(r.scenario_id, r.affect);
    auto cand = split_words(r.text);
    if (refs.empty() || cand.empty()) {
      j["bleu"] = json();
    } else {
      double score = metrics::bleu(cand, refs, 4, /*smoothing=*/true).score;
      j["bleu"] = score;
      bleu_sum += score;
      ++bleu_n;
    }
    out << j.dump() << "\n";
  }

  // perplexity on the held-out utterances
  auto ppl_of = [&](bool seen) -> std::optional<double> {
    auto utts = corpus::test_utterances(rdg, split, seen);
    std::vector<corpus::TrainingExample> examples;
    for (const auto* u : utts)
      examples.push_back(corpus::build_example(vocab, rdg.scenario(u->scenario_id), *u,
                                               static_cast<size_t>(mc.max_seq_len)));
    if (examples.empty()) return std::nullopt;
    return metrics::perplexity(ckpt.params, examples);
  };
  json summary{{"model", cfg.model_label},
               {"data", cfg.data_label},
               {"mean_bleu", bleu_n ? json(bleu_sum / static_cast<double>(bleu_n)) : json()},
               {"scored", bleu_n}};
  auto ppl_seen = ppl_of(true);
  auto ppl_unseen = ppl_of(false);
  summary["perplexity_seen"] = ppl_seen ? json(*ppl_seen) : json();
  summary["perplexity_unseen"] = ppl_unseen ? json(*ppl_unseen) : json();
  std::string summary_path = out_path + ".summary.json";
  write_text_file(summary_path, summary.dump(2) + "\n");
  write_manifest(out_path + ".manifest.json", "score", &cfg,
                 json{{"split_seed", cfg.split_seed}},
                 {config_path, cfg.rdg_path, vocab_path, ckpt_path, generations_path},
                 {out_path, summary_path});
  std::cout << "scored " << records.size() << " records -> " << out_path << "\n";
  return kOk;
}

std::set<std::string> load_rater_list(const std::string& path) {
  std::set<std::string> raters;
  if (path.empty()) return raters;
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open rater list: " + path);
  std::string line;
  while (std::getline(in, line)) {
    std::string id = trim(line);
    if (!id.empty()) raters.insert(id);
  }
  return raters;
}

int cmd_aggregate(const std::string& ratings_path, const std::string& exclude_path,
                  const std::string& out_path) {
  auto store = evalpipe::RatingStore::load(ratings_path);
  auto exclusions = load_rater_list(exclude_path);
  auto result = evalpipe::aggregate(store, exclusions);

  // stable output order: aggregated then deficits, each by utterance id
  std::ofstream out(out_path, std::ios::binary);
  if (!out) throw DataError("cannot write " + out_path);
  auto field = [](const evalpipe::FieldMean& f) { return f.mean ? json(*f.mean) : json(); };
  for (const auto& [uid, agg] : result.ratings) {
    json j{{"utterance_id", uid},
           {"typicality", field(agg.typicality)},
           {"offensiveness", field(agg.offensiveness)},
           {"forwardness", field(agg.forwardness)},
           {"affect", field(agg.affect)},
           {"n_valid",
            {{"typicality", agg.typicality.n_valid},
             {"offensiveness", agg.offensiveness.n_valid},
             {"forwardness", agg.forwardness.n_valid},
             {"affect", agg.affect.n_valid}}},
           {"deficit", json()}};
    out << j.dump() << "\n";
  }
  std::map<std::string, json> deficit_rows;
  for (const auto& d : result.deficits) {
    auto& row = deficit_rows[d.utterance_id];
    if (row.is_null())
      row = json{{"utterance_id", d.utterance_id}, {"deficit", json::array()}};
    row["deficit"].push_back({{"stage", d.stage}, {"demand", d.demand}});
  }
  for (const auto& [uid, row] : deficit_rows) out << row.dump() << "\n";

  write_manifest(out_path + ".manifest.json", "aggregate", nullptr, json::object(),
                 {ratings_path, exclude_path}, {out_path});
  std::cout << result.ratings.size() << " aggregated, " << deficit_rows.size()
            << " deficient -> " << out_path << "\n";
  return kOk;
}

int cmd_flag_raters(const std::string& ratings_path, size_t min_tasks,
                    const std::string& out_path) {
  auto store = evalpipe::RatingStore::load(ratings_path);
  evalpipe::FlagPolicy policy;
  policy.min_tasks = min_tasks;
  auto flagged = evalpipe::flag_unreliable(store, policy);
  std::string body;
  for (const auto& r : flagged) body += r + "\n";
  write_text_file(out_path, body);
  write_manifest(out_path + ".manifest.json", "flag-raters", nullptr,
                 json{{"min_tasks", min_tasks}}, {ratings_path}, {out_path});
  std::cout << flagged.size() << " raters flagged -> " << out_path << "\n";
  return kOk;
}

int cmd_simulate_raters(const std::string& truths_path, int noise, size_t n_raters, uint64_t seed,
                        const std::string& out_path) {
  std::ifstream in(truths_path, std::ios::binary);
  if (!in) throw DataError("cannot open truths file: " + truths_path);
  std::vector<evalpipe::UtteranceTruth> truths;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) throw DataError("malformed truth record at line " + std::to_string(line_no));
    evalpipe::UtteranceTruth t;
    t.utterance_id = j.at("utterance_id").get<std::string>();
    t.typicality = j.at("typicality").get<int>();
    t.offensiveness = j.at("offensiveness").get<int>();
    if (j.contains("forwardness") && !j.at("forwardness").is_null())
      t.forwardness = j.at("forwardness").get<int>();
    t.affect = j.at("affect").get<int>();
    truths.push_back(std::move(t));
  }
  evalpipe::NoiseModel nm{noise};
  auto store = evalpipe::simulate_raters(truths, nm, n_raters, seed);
  store.save(out_path);
  write_manifest(out_path + ".manifest.json", "simulate-raters", nullptr,
                 json{{"seed", seed}, {"noise", noise}, {"raters", n_raters}}, {truths_path},
                 {out_path});
  std::cout << store.records.size() << " rating records -> " << out_path << "\n";
  return kOk;
}

// --- analyze -----------------------------------------------------------

struct AnalysisRow {
  std::string model, data;
  std::map<std::string, double> measures;
};

std::vector<AnalysisRow> join_tables(const std::string& table_path,
                                     const std::string& scores_path,
                                     const std::string& ratings_path) {
  std::vector<AnalysisRow> rows;
  auto numeric_fields = [](const json& j, AnalysisRow& row) {
    for (const auto& key : {"bleu", "typicality", "offensiveness", "forwardness", "affect"})
      if (j.contains(key) && j.at(key).is_number()) row.measures[key] = j.at(key).get<double>();
  };

  if (!table_path.empty()) {
    std::ifstream in(table_path, std::ios::binary);
    if (!in) throw DataError("cannot open table: " + table_path);
    std::string line;
    size_t line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (trim(line).empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw DataError("malformed table row at line " + std::to_string(line_no));
      AnalysisRow row;
      row.model = j.value("model", "");
      row.data = j.value("data", "");
      numeric_fields(j, row);
      rows.push_back(std::move(row));
    }
    return rows;
  }

  if (scores_path.empty()) throw UsageError("analyze needs --table or --scores");
  std::map<std::string, json> ratings;
  if (!ratings_path.empty()) {
    std::ifstream in(ratings_path, std::ios::binary);
    if (!in) throw DataError("cannot open ratings: " + ratings_path);
    std::string line;
    while (std::getline(in, line)) {
      if (trim(line).empty()) continue;
      json j = json::parse(line, nullptr, false);
      if (j.is_discarded()) throw DataError("malformed aggregation row in " + ratings_path);
      ratings[j.at("utterance_id").get<std::string>()] = j;
    }
  }
  for (const auto& r : load_generations(scores_path)) {
    AnalysisRow row;
    row.model = r.model;
    row.data = r.data;
    if (r.bleu) row.measures["bleu"] = *r.bleu;
    auto it = ratings.find(r.utterance_id);
    if (it != ratings.end()) numeric_fields(it->second, row);
    rows.push_back(std::move(row));
  }
  return rows;
}

json anova_to_json(const stats::AnovaTable& table) {
  json effects = json::array();
  for (const auto& e : table.effects)
    effects.push_back({{"name", e.name}, {"ss", e.ss}, {"df", e.df}, {"ms", e.ms},
                       {"f", e.f},       {"p", e.p}});
  return json{{"effects", effects}, {"ss_total", table.ss_total}};
}

int cmd_analyze(const std::string& table_path, const std::string& scores_path,
                const std::string& ratings_path, const std::string& out_path) {
  auto rows = join_tables(table_path, scores_path, ratings_path);
  if (rows.empty()) throw DataError("analysis table is empty");

  std::set<std::string> measure_names;
  for (const auto& r : rows)
    for (const auto& [k, v] : r.measures) measure_names.insert(k);

  json report;
  report["n_rows"] = rows.size();

  for (const auto& measure : measure_names) {
    json entry;

    // two-way over model x data, model-generated rows only
    std::vector<double> values;
    std::vector<std::string> fa, fb;
    for (const auto& r : rows) {
      if (r.model == "human") continue;
      auto it = r.measures.find(measure);
      if (it == r.measures.end()) continue;
      values.push_back(it->second);
      fa.push_back(r.model);
      fb.push_back(r.data);
    }
    std::set<std::string> levels_a(fa.begin(), fa.end()), levels_b(fb.begin(), fb.end());
    if (levels_a.size() < 2 || levels_b.size() < 2) {
      entry["two_way"] = json{{"refused", std::string("single-level factor: ") +
                                              (levels_a.size() < 2 ? "model" : "data")}};
    } else {
      try {
        entry["two_way"] = anova_to_json(stats::anova_two_way(values, fa, fb));
      } catch (const std::exception& e) {
        entry["two_way"] = json{{"refused", e.what()}};
      }
    }

    // one-way over the combined model|data factor, humans included
    std::map<std::string, std::vector<double>> groups;
    for (const auto& r : rows) {
      auto it = r.measures.find(measure);
      if (it == r.measures.end()) continue;
      std::string label = r.model == "human" ? "human" : r.model + "|" + r.data;
      groups[label].push_back(it->second);
    }
    std::vector<std::string> group_names;
    std::vector<std::vector<double>> group_values;
    for (const auto& [name, vals] : groups) {
      if (vals.size() < 2) continue;
      group_names.push_back(name);
      group_values.push_back(vals);
    }
    if (group_values.size() >= 2) {
      try {
        json one_way = anova_to_json(stats::anova_one_way(group_values));
        one_way["groups"] = group_names;
        entry["one_way"] = one_way;
      } catch (const std::exception& e) {
        entry["one_way"] = json{{"refused", e.what()}};
      }
      try {
        auto tukey = stats::tukey_hsd(group_values);
        json pairs = json::array();
        for (const auto& p : tukey.pairs)
          pairs.push_back({{"group_i", group_names[p.group_i]},
                           {"group_j", group_names[p.group_j]},
                           {"mean_diff", p.mean_diff},
                           {"q", p.q},
                           {"p", p.p},
                           {"significant", p.significant}});
        entry["tukey"] = pairs;
      } catch (const std::exception& e) {
        entry["tukey"] = json{{"refused", e.what()}};
      }
    } else {
      entry["one_way"] = json{{"refused", "fewer than 2 groups with 2+ observations"}};
    }
    report["measures"][measure] = entry;
  }

  // BLEU against each subjective rating, per-utterance
  json correlations = json::object();
  for (const auto& other : measure_names) {
    if (other == "bleu") continue;
    std::vector<double> x, y;
    for (const auto& r : rows) {
      auto b = r.measures.find("bleu");
      auto o = r.measures.find(other);
      if (b == r.measures.end() || o == r.measures.end()) continue;
      x.push_back(b->second);
      y.push_back(o->second);
    }
    if (x.size() >= 3) {
      try {
        auto sp = stats::spearman(x, y);
        correlations["bleu_vs_" + other] = json{{"rho", sp.rho}, {"p", sp.p}, {"n", x.size()}};
      } catch (const std::exception& e) {
        correlations["bleu_vs_" + other] = json{{"refused", e.what()}};
      }
    }
  }
  report["correlations"] = correlations;

  write_text_file(out_path, report.dump(2) + "\n");
  write_manifest(out_path + ".manifest.json", "analyze", nullptr, json::object(),
                 {table_path, scores_path, ratings_path}, {out_path});
  std::cout << "analysis report -> " << out_path << "\n";
  return kOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"desk-scale multi-task affective NLG toolkit"};
  app.require_subcommand(1);

  std::string config_path, vocab_path, ckpt_path, out_path, out_dir;
  std::string generations_path, ratings_path, exclude_path, truths_path, table_path, scores_path;
  size_t min_tasks = 2;
  int noise = 1;
  size_t n_raters = 5;
  uint64_t seed = 0;
  Overrides ov;

  // flags that override config-file values where they make sense
  auto add_overrides = [&](CLI::App* cmd, bool decoding) {
    cmd->add_option_function<uint64_t>(
        "--split-seed", [&](uint64_t v) { ov.split_seed = v; },
        "override protocol.split_seed");
    cmd->add_option_function<std::string>(
        "--variant", [&](const std::string& v) { ov.variant = v; }, "override model.variant");
    cmd->add_option_function<std::string>(
        "--label-model", [&](const std::string& v) { ov.model_label = v; });
    cmd->add_option_function<std::string>(
        "--label-data", [&](const std::string& v) { ov.data_label = v; });
    if (decoding) {
      cmd->add_option_function<uint64_t>(
          "--decode-seed", [&](uint64_t v) { ov.decode_seed = v; }, "override decode.seed");
      cmd->add_option_function<std::string>(
          "--strategy", [&](const std::string& v) { ov.strategy = v; },
          "override decode.strategy");
      cmd->add_option_function<int>(
          "--max-new-tokens", [&](int v) { ov.max_new_tokens = v; });
    }
  };

  auto* fit = app.add_subcommand("fit-vocab", "fit the tokenizer vocabulary on the corpora");
  fit->add_option("--config", config_path)->required();
  fit->add_option("--out", out_path)->required();

  auto* tr = app.add_subcommand("train", "run the configured phase plan");
  tr->add_option("--config", config_path)->required();
  tr->add_option("--vocab", vocab_path)->required();
  tr->add_option("--out-dir", out_dir)->required();
  tr->add_option_function<uint64_t>(
      "--seed", [&](uint64_t v) { ov.train_seed = v; }, "override train.seed");
  add_overrides(tr, false);

  auto* ge = app.add_subcommand("generate", "sample utterances per scenario and affect");
  ge->add_option("--config", config_path)->required();
  ge->add_option("--vocab", vocab_path)->required();
  ge->add_option("--checkpoint", ckpt_path)->required();
  ge->add_option("--out", out_path)->required();
  add_overrides(ge, true);

  auto* sc = app.add_subcommand("score", "perplexity and BLEU against human references");
  sc->add_option("--config", config_path)->required();
  sc->add_option("--vocab", vocab_path)->required();
  sc->add_option("--checkpoint", ckpt_path)->required();
  sc->add_option("--generations", generations_path)->required();
  sc->add_option("--out", out_path)->required();
  add_overrides(sc, false);

  auto* ag = app.add_subcommand("aggregate", "aggregate ratings into per-utterance means");
  ag->add_option("--ratings", ratings_path)->required();
  ag->add_option("--exclude", exclude_path);
  ag->add_option("--out", out_path)->required();

  auto* fl = app.add_subcommand("flag-raters", "flag repetitive raters");
  fl->add_option("--ratings", ratings_path)->required();
  fl->add_option("--min-tasks", min_tasks);
  fl->add_option("--out", out_path)->required();

  auto* si = app.add_subcommand("simulate-raters", "synthesize ratings around known truths");
  si->add_option("--truths", truths_path)->required();
  si->add_option("--noise", noise);
  si->add_option("--raters", n_raters);
  si->add_option("--seed", seed);
  si->add_option("--out", out_path)->required();

  auto* an = app.add_subcommand("analyze", "ANOVA, Tukey and correlations over a results table");
  an->add_option("--table", table_path);
  an->add_option("--scores", scores_path);
  an->add_option("--ratings", ratings_path);
  an->add_option("--out", out_path)->required();

  try {
    app.parse(argc, argv);
    if (fit->parsed()) return cmd_fit_vocab(config_path, out_path);
    if (tr->parsed()) return cmd_train(config_path, vocab_path, out_dir, ov);
    if (ge->parsed()) return cmd_generate(config_path, vocab_path, ckpt_path, out_path, ov);
    if (sc->parsed())
      return cmd_score(config_path, vocab_path, ckpt_path, generations_path, out_path, ov);
    if (ag->parsed()) return cmd_aggregate(ratings_path, exclude_path, out_path);
    if (fl->parsed()) return cmd_flag_raters(ratings_path, min_tasks, out_path);
    if (si->parsed()) return cmd_simulate_raters(truths_path, noise, n_raters, seed, out_path);
    if (an->parsed()) return cmd_analyze(table_path, scores_path, ratings_path, out_path);
    throw UsageError("no subcommand given");
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? kOk : kUsage;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kUsage;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return kNumeric;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kData;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kData;
  }
  return kOk;
}

}  // namespace mtaf::cli
