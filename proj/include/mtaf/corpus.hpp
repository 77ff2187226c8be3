#pragma once

#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "mtaf/common.hpp"
#include "mtaf/tokenizer.hpp"

namespace mtaf::corpus {

enum class Affect { excited, indifferent, impatient };

Affect affect_from_string(std::string_view s);
std::string to_string(Affect a);
inline const std::vector<Affect>& all_affects() {
  static const std::vector<Affect> a = {Affect::excited, Affect::indifferent, Affect::impatient};
  return a;
}

enum class SplitTag { train, test, unseen };

struct AggregatedScores {
  std::optional<double> typicality;
  std::optional<double> offensiveness;
  std::optional<double> forwardness;
  std::optional<double> affect;
};

// One scenario-affect context: situation description plus the affect the
// authoring prompt asked for.
struct Scenario {
  std::string id;
  std::string description;
  Affect affect_target = Affect::indifferent;
  SplitTag split_tag = SplitTag::train;
};

struct Utterance {
  std::string id;
  std::string scenario_id;
  Affect affect_target = Affect::indifferent;
  std::string text;
  std::string source = "human";  // "human" | "model"
  AggregatedScores aggregated;
};

struct RdgCorpus {
  std::vector<Scenario> scenarios;   // file order
  std::vector<Utterance> utterances; // file order
  std::unordered_map<std::string, size_t> scenario_index;

  const Scenario& scenario(const std::string& id) const;
  std::vector<const Utterance*> utterances_of(const std::string& scenario_id) const;
};

struct EdTurn {
  std::string speaker;  // "A" | "B"
  std::string text;
};

struct EdConversation {
  std::string id;
  std::string situation;
  std::string emotion_label;
  std::vector<EdTurn> turns;  // 1..6, speakers alternating
};

struct EdCorpus {
  std::vector<EdConversation> conversations;
  std::vector<std::string> labels;  // the 32-entry manifest, file order
  int label_index(const std::string& label) const;
};

// Scenario ids partitioned three ways. Scenarios in test_seen contribute
// utterances to both training and seen-testing (utterance-level split,
// derived from the same seed); unseen scenarios contribute nothing to
// training.
struct CorpusSplit {
  std::vector<std::string> train;
  std::vector<std::string> test_seen;
  std::vector<std::string> test_unseen;
  uint64_t seed = 0;
  // utterance ids of test_seen scenarios held out from training
  std::vector<std::string> held_out_utterances;

  bool is_held_out(const std::string& utterance_id) const;
};

RdgCorpus load_rdg(const std::string& path);
EdCorpus load_ed(const std::string& path, const std::string& manifest_path);

// Round-trip partners of the loaders.
void save_rdg(const RdgCorpus& corpus, const std::string& path);
void save_ed(const EdCorpus& corpus, const std::string& path, const std::string& manifest_path);

CorpusSplit make_split(const RdgCorpus& corpus, uint64_t seed, size_t n_unseen);

// Utterances usable for training under a split: everything in train
// scenarios plus the non-held-out part of test_seen scenarios.
std::vector<const Utterance*> train_utterances(const RdgCorpus& corpus, const CorpusSplit& split);
// Held-out utterances of seen scenarios (test_seen == true) or all
// utterances of unseen scenarios (test_seen == false).
std::vector<const Utterance*> test_utterances(const RdgCorpus& corpus, const CorpusSplit& split,
                                              bool seen);

// One token-ready training item. The target mask selects exactly the
// positions after the final <sep>, up to and including <eos>; loss for a
// masked position p is predicted from position p-1.
struct TrainingExample {
  std::vector<tok::TokenId> input_ids;
  std::vector<bool> target_mask;
  size_t context_len = 0;  // index of the first masked position
  std::optional<double> affect_scalar;  // RDG: crowd-aggregated mean affect
  std::optional<int> affect_class;      // ED: emotion class index
  std::string group_id;   // scenario id (RDG) / conversation id (ED)
  std::string source_id;  // utterance id / "<conversation>#<turn>"
};

// <bos> <ctx> description-tokens <aff:X> <sep>, left-truncated to fit.
std::vector<tok::TokenId> build_rdg_context(const tok::Vocab& vocab, const std::string& description,
                                            Affect affect, size_t max_seq_len, size_t response_len);

TrainingExample build_example(const tok::Vocab& vocab, const Scenario& scenario,
                              const Utterance& utterance, size_t max_seq_len);

// One example per turn: input is the situation plus all prior turns, the
// target is the turn itself. The conversation's emotion label applies to
// every turn example.
std::vector<TrainingExample> build_examples(const tok::Vocab& vocab, const EdCorpus& corpus,
                                            const EdConversation& conversation, size_t max_seq_len);

// Rebuilds an example's input from explicit context/response pieces,
// left-truncating context tokens (never the response). Throws DataError if
// the response cannot fit even with an empty context.
TrainingExample assemble_example(const tok::Vocab& vocab, std::vector<tok::TokenId> context,
                                 const std::vector<tok::TokenId>& response, size_t max_seq_len);

}  // namespace mtaf::corpus
