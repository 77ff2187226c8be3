#include "mtaf/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace mtaf::corpus {

using nlohmann::json;

Affect affect_from_string(std::string_view s) {
  if (s == "excited") return Affect::excited;
  if (s == "indifferent") return Affect::indifferent;
  if (s == "impatient") return Affect::impatient;
  throw DataError("unknown affect target: " + std::string(s));
}

std::string to_string(Affect a) {
  switch (a) {
    case Affect::excited: return "excited";
    case Affect::indifferent: return "indifferent";
    case Affect::impatient: return "impatient";
  }
  throw UsageError("invalid affect enum value");
}

const Scenario& RdgCorpus::scenario(const std::string& id) const {
  auto it = scenario_index.find(id);
  if (it == scenario_index.end()) throw DataError("unknown scenario id: " + id);
  return scenarios[it->second];
}

std::vector<const Utterance*> RdgCorpus::utterances_of(const std::string& scenario_id) const {
  std::vector<const Utterance*> out;
  for (const auto& u : utterances)
    if (u.scenario_id == scenario_id) out.push_back(&u);
  return out;
}

int EdCorpus::label_index(const std::string& label) const {
  auto it = std::find(labels.begin(), labels.end(), label);
  if (it == labels.end()) throw DataError("emotion label not in manifest: " + label);
  return static_cast<int>(it - labels.begin());
}

bool CorpusSplit::is_held_out(const std::string& utterance_id) const {
  return std::find(held_out_utterances.begin(), held_out_utterances.end(), utterance_id) !=
         held_out_utterances.end();
}

namespace {

json parse_line(const std::string& line, size_t line_no) {
  json j = json::parse(line, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded() || !j.is_object())
    throw DataError("malformed record at line " + std::to_string(line_no));
  return j;
}

std::string need_string(const json& j, const char* key, size_t line_no) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw DataError("missing or non-string field '" + std::string(key) + "' at line " +
                    std::to_string(line_no));
  return j.at(key).get<std::string>();
}

std::optional<double> opt_number(const json& j, const char* key, size_t line_no) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  if (!j.at(key).is_number())
    throw DataError("non-numeric field '" + std::string(key) + "' at line " + std::to_string(line_no));
  return j.at(key).get<double>();
}

}  // namespace

RdgCorpus load_rdg(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file: " + path);

  RdgCorpus corpus;
  std::unordered_map<std::string, size_t> utterance_ids;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = parse_line(line, line_no);
    std::string kind = need_string(j, "kind", line_no);
    if (kind == "scenario") {
      Scenario s;
      s.id = need_string(j, "id", line_no);
      s.description = need_string(j, "description", line_no);
      s.affect_target = affect_from_string(need_string(j, "affect_target", line_no));
      if (trim(s.description).empty())
        throw DataError("empty scenario description at line " + std::to_string(line_no));
      if (corpus.scenario_index.count(s.id))
        throw DataError("duplicate scenario id " + s.id + " at line " + std::to_string(line_no));
      corpus.scenario_index.emplace(s.id, corpus.scenarios.size());
      corpus.scenarios.push_back(std::move(s));
    } else if (kind == "utterance") {
      Utterance u;
      u.id = need_string(j, "id", line_no);
      u.scenario_id = need_string(j, "scenario_id", line_no);
      u.affect_target = affect_from_string(need_string(j, "affect_target", line_no));
      u.text = need_string(j, "text", line_no);
      u.source = j.contains("source") ? need_string(j, "source", line_no) : "human";
      if (trim(u.text).empty())
        throw DataError("empty utterance text at line " + std::to_string(line_no));
      u.aggregated.typicality = opt_number(j, "typicality", line_no);
      u.aggregated.offensiveness = opt_number(j, "offensiveness", line_no);
      u.aggregated.forwardness = opt_number(j, "forwardness", line_no);
      u.aggregated.affect = opt_number(j, "affect", line_no);
      if (!utterance_ids.emplace(u.id, line_no).second)
        throw DataError("duplicate utterance id " + u.id + " at line " + std::to_string(line_no));
      corpus.utterances.push_back(std::move(u));
    } else {
      throw DataError("unknown record kind '" + kind + "' at line " + std::to_string(line_no));
    }
  }

  for (const auto& u : corpus.utterances)
    if (!corpus.scenario_index.count(u.scenario_id))
      throw DataError("dangling reference " + u.scenario_id + " in utterance " + u.id);
  return corpus;
}

void save_rdg(const RdgCorpus& corpus, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file: " + path);
  for (const auto& s : corpus.scenarios) {
    json j{{"kind", "scenario"},
           {"id", s.id},
           {"description", s.description},
           {"affect_target", to_string(s.affect_target)}};
    out << j.dump() << "\n";
  }
  for (const auto& u : corpus.utterances) {
    json j{{"kind", "utterance"}, {"id", u.id},     {"scenario_id", u.scenario_id},
           {"affect_target", to_string(u.affect_target)},
           {"text", u.text},     {"source", u.source}};
    if (u.aggregated.typicality) j["typicality"] = *u.aggregated.typicality;
    if (u.aggregated.offensiveness) j["offensiveness"] = *u.aggregated.offensiveness;
    if (u.aggregated.forwardness) j["forwardness"] = *u.aggregated.forwardness;
    if (u.aggregated.affect) j["affect"] = *u.aggregated.affect;
    out << j.dump() << "\n";
  }
}

EdCorpus load_ed(const std::string& path, const std::string& manifest_path) {
  EdCorpus corpus;
  {
    std::ifstream manifest(manifest_path, std::ios::binary);
    if (!manifest) throw DataError("cannot open label manifest: " + manifest_path);
    std::string line;
    while (std::getline(manifest, line)) {
      std::string label = trim(line);
      if (!label.empty()) corpus.labels.push_back(label);
    }
    if (corpus.labels.size() != 32)
      throw DataError("label manifest has " + std::to_string(corpus.labels.size()) +
                      " entries, expected 32");
  }

  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open corpus file: " + path);
  std::unordered_map<std::string, size_t> ids;
  std::string line;
  size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    json j = parse_line(line, line_no);
    if (need_string(j, "kind", line_no) != "conversation")
      throw DataError("unexpected record kind at line " + std::to_string(line_no));
    EdConversation c;
    c.id = need_string(j, "id", line_no);
    c.situation = need_string(j, "situation", line_no);
    c.emotion_label = need_string(j, "emotion", line_no);
    if (std::find(corpus.labels.begin(), corpus.labels.end(), c.emotion_label) ==
        corpus.labels.end())
      throw DataError("emotion label '" + c.emotion_label + "' not in manifest at line " +
                      std::to_string(line_no));
    if (!j.contains("turns") || !j.at("turns").is_array() || j.at("turns").empty())
      throw DataError("conversation with empty turn list at line " + std::to_string(line_no));
    for (const auto& t : j.at("turns")) {
      EdTurn turn;
      turn.speaker = need_string(t, "speaker", line_no);
      turn.text = need_string(t, "text", line_no);
      if (turn.speaker != "A" && turn.speaker != "B")
        throw DataError("turn speaker must be A or B at line " + std::to_string(line_no));
      c.turns.push_back(std::move(turn));
    }
    if (c.turns.size() > 6)
      throw DataError("conversation exceeds 6 turns at line " + std::to_string(line_no));
    for (size_t i = 1; i < c.turns.size(); ++i)
      if (c.turns[i].speaker == c.turns[i - 1].speaker)
        throw DataError("speakers do not alternate at line " + std::to_string(line_no));
    if (!ids.emplace(c.id, line_no).second)
      throw DataError("duplicate conversation id " + c.id + " at line " + std::to_string(line_no));
    corpus.conversations.push_back(std::move(c));
  }
  return corpus;
}

void save_ed(const EdCorpus& corpus, const std::string& path, const std::string& manifest_path) {
  {
    std::ofstream manifest(manifest_path, std::ios::binary);
    if (!manifest) throw DataError("cannot write label manifest: " + manifest_path);
    for (const auto& l : corpus.labels) manifest << l << "\n";
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write corpus file: " + path);
  for (const auto& c : corpus.conversations) {
    json turns = json::array();
    for (const auto& t : c.turns) turns.push_back({{"speaker", t.speaker}, {"text", t.text}});
    json j{{"kind", "conversation"}, {"id", c.id}, {"situation", c.situation},
           {"emotion", c.emotion_label}, {"turns", turns}};
    out << j.dump() << "\n";
  }
}

CorpusSplit make_split(const RdgCorpus& corpus, uint64_t seed, size_t n_unseen) {
  if (n_unseen >= corpus.scenarios.size())
    throw UsageError("n_unseen (" + std::to_string(n_unseen) + ") must be below the scenario count (" +
                     std::to_string(corpus.scenarios.size()) + ")");

  std::vector<std::string> ids;
  ids.reserve(corpus.scenarios.size());
  for (const auto& s : corpus.scenarios) ids.push_back(s.id);

  Rng rng(seed);
  rng.shuffle(ids);

  CorpusSplit split;
  split.seed = seed;
  size_t i = 0;
  for (; i < n_unseen; ++i) split.test_unseen.push_back(ids[i]);
  size_t n_seen = std::min(n_unseen, ids.size() - n_unseen);
  for (; i < n_unseen + n_seen; ++i) split.test_seen.push_back(ids[i]);
  for (; i < ids.size(); ++i) split.train.push_back(ids[i]);

  // Hold out half of each seen-test scenario's utterances (rounded down).
  for (const auto& sid : split.test_seen) {
    std::vector<std::string> utt_ids;
    for (const auto* u : corpus.utterances_of(sid)) utt_ids.push_back(u->id);
    rng.shuffle(utt_ids);
    size_t n_test = utt_ids.size() / 2;
    for (size_t k = 0; k < n_test; ++k) split.held_out_utterances.push_back(utt_ids[k]);
  }
  return split;
}

std::vector<const Utterance*> train_utterances(const RdgCorpus& corpus, const CorpusSplit& split) {
  std::vector<const Utterance*> out;
  for (const auto& u : corpus.utterances) {
    bool unseen = std::find(split.test_unseen.begin(), split.test_unseen.end(), u.scenario_id) !=
                  split.test_unseen.end();
    if (unseen || split.is_held_out(u.id)) continue;
    out.push_back(&u);
  }
  return out;
}

std::vector<const Utterance*> test_utterances(const RdgCorpus& corpus, const CorpusSplit& split,
                                              bool seen) {
  std::vector<const Utterance*> out;
  for (const auto& u : corpus.utterances) {
    if (seen) {
      if (split.is_held_out(u.id)) out.push_back(&u);
    } else {
      bool unseen = std::find(split.test_unseen.begin(), split.test_unseen.end(), u.scenario_id) !=
                    split.test_unseen.end();
      if (unseen) out.push_back(&u);
    }
  }
  return out;
}

TrainingExample assemble_example(const tok::Vocab& vocab, std::vector<tok::TokenId> context,
                                 const std::vector<tok::TokenId>& response, size_t max_seq_len) {
  if (context.size() < 3 || context.front() != vocab.bos() || context[1] != vocab.ctx() ||
      context.back() != vocab.sep())
    throw UsageError("context must start with <bos> <ctx> and end with <sep>");

  size_t total = context.size() + response.size() + 1;  // + <eos>
  if (total > max_seq_len) {
    // Drop the oldest context content; the <bos> <ctx> prefix and everything
    // from the final conditioning tokens onward survive as long as possible.
    size_t overflow = total - max_seq_len;
    size_t removable = context.size() - 3;  // keep <bos> <ctx> ... <sep>
    if (overflow > removable)
      throw DataError("response alone exceeds max_seq_len (" + std::to_string(response.size()) +
                      " response tokens, limit " + std::to_string(max_seq_len) + ")");
    context.erase(context.begin() + 2, context.begin() + 2 + overflow);
  }

  TrainingExample ex;
  ex.context_len = context.size();
  ex.input_ids = std::move(context);
  ex.input_ids.insert(ex.input_ids.end(), response.begin(), response.end());
  ex.input_ids.push_back(vocab.eos());
  ex.target_mask.assign(ex.input_ids.size(), false);
  for (size_t p = ex.context_len; p < ex.input_ids.size(); ++p) ex.target_mask[p] = true;
  return ex;
}

std::vector<tok::TokenId> build_rdg_context(const tok::Vocab& vocab, const std::string& description,
                                            Affect affect, size_t max_seq_len, size_t response_len) {
  if (max_seq_len < 6) throw UsageError("max_seq_len too small for any context");
  std::vector<tok::TokenId> context;
  context.push_back(vocab.bos());
  context.push_back(vocab.ctx());
  for (tok::TokenId id : vocab.encode(description)) context.push_back(id);
  context.push_back(vocab.affect_token(to_string(affect)));
  context.push_back(vocab.sep());

  // the reserve can never squeeze the context below <bos> <ctx> <aff> <sep>
  response_len = std::min(response_len, max_seq_len - 5);
  size_t total = context.size() + response_len + 1;
  if (total > max_seq_len) {
    size_t overflow = total - max_seq_len;
    size_t removable = context.size() - 4;
    context.erase(context.begin() + 2, context.begin() + 2 + std::min(overflow, removable));
  }
  return context;
}

TrainingExample build_example(const tok::Vocab& vocab, const Scenario& scenario,
                              const Utterance& utterance, size_t max_seq_len) {
  std::vector<tok::TokenId> context;
  context.push_back(vocab.bos());
  context.push_back(vocab.ctx());
  for (tok::TokenId id : vocab.encode(scenario.description)) context.push_back(id);
  context.push_back(vocab.affect_token(to_string(utterance.affect_target)));
  context.push_back(vocab.sep());

  TrainingExample ex =
      assemble_example(vocab, std::move(context), vocab.encode(utterance.text), max_seq_len);
  ex.affect_scalar = utterance.aggregated.affect;
  ex.group_id = scenario.id;
  ex.source_id = utterance.id;
  return ex;
}

std::vector<TrainingExample> build_examples(const tok::Vocab& vocab, const EdCorpus& corpus,
                                            const EdConversation& conversation, size_t max_seq_len) {
  std::vector<TrainingExample> out;
  int label = corpus.label_index(conversation.emotion_label);
  for (size_t k = 0; k < conversation.turns.size(); ++k) {
    std::vector<tok::TokenId> context;
    context.push_back(vocab.bos());
    context.push_back(vocab.ctx());
    for (tok::TokenId id : vocab.encode(conversation.situation)) context.push_back(id);
    for (size_t j = 0; j < k; ++j) {
      context.push_back(vocab.sep());
      for (tok::TokenId id : vocab.encode(conversation.turns[j].text)) context.push_back(id);
    }
    context.push_back(vocab.sep());

    TrainingExample ex = assemble_example(vocab, std::move(context),
                                          vocab.encode(conversation.turns[k].text), max_seq_len);
    ex.affect_class = label;
    ex.group_id = conversation.id;
    ex.source_id = conversation.id + "#" + std::to_string(k);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace mtaf::corpus
