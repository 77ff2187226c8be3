#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "mtaf/corpus.hpp"

using namespace mtaf;
using namespace mtaf::corpus;

namespace {

namespace fs = std::filesystem;

struct TempFile {
  fs::path path;
  explicit TempFile(const std::string& name, const std::string& content)
      : path(fs::temp_directory_path() / name) {
    std::ofstream out(path, std::ios::binary);
    out << content;
  }
  ~TempFile() { fs::remove(path); }
  std::string str() const { return path.string(); }
};

std::string rdg_fixture() {
  std::string lines;
  const char* affects[] = {"excited", "indifferent", "impatient"};
  int uid = 0;
  for (int s = 0; s < 2; ++s) {
    for (const char* aff : affects) {
      std::string sid = "s" + std::to_string(s) + "_" + aff;
      lines += "{\"kind\":\"scenario\",\"id\":\"" + sid +
               "\",\"description\":\"the robot ponders move " + std::to_string(s) +
               "\",\"affect_target\":\"" + aff + "\"}\n";
      for (int u = 0; u < 2; ++u) {
        ++uid;
        lines += "{\"kind\":\"utterance\",\"id\":\"u" + std::to_string(uid - 1) +
                 "\",\"scenario_id\":\"" + sid + "\",\"affect_target\":\"" + aff +
                 "\",\"text\":\"line " + std::to_string(uid) +
                 " here\",\"source\":\"human\",\"affect\":1.5}\n";
      }
    }
  }
  return lines;
}

std::string ed_manifest_fixture() {
  std::string out;
  for (int i = 0; i < 32; ++i) out += (i == 0 ? "proud" : "label" + std::to_string(i)) + "\n";
  return out;
}

tok::Vocab fixture_vocab() {
  return tok::Vocab::fit({"the robot ponders move", "line here", "a b c d e f g h"}, 128);
}

}  // namespace

TEST_CASE("load_rdg counts scenario-affect contexts and utterances") {
  TempFile f("rdg_ok.jsonl", rdg_fixture());
  RdgCorpus c = load_rdg(f.str());
  CHECK(c.scenarios.size() == 6);
  CHECK(c.utterances.size() == 12);
  CHECK(c.utterances_of("s0_excited").size() == 2);
  CHECK(c.utterances[0].aggregated.affect == 1.5);
}

TEST_CASE("load_rdg empty file gives an empty corpus") {
  TempFile f("rdg_empty.jsonl", "");
  RdgCorpus c = load_rdg(f.str());
  CHECK(c.scenarios.empty());
  CHECK(c.utterances.empty());
}

TEST_CASE("load_rdg dangling scenario reference") {
  TempFile f("rdg_dangling.jsonl",
             "{\"kind\":\"scenario\",\"id\":\"s1\",\"description\":\"d\",\"affect_target\":\"excited\"}\n"
             "{\"kind\":\"utterance\",\"id\":\"u1\",\"scenario_id\":\"s99\",\"affect_target\":"
             "\"excited\",\"text\":\"hi\"}\n");
  CHECK_THROWS_WITH_AS(load_rdg(f.str()), "dangling reference s99 in utterance u1", DataError);
}

TEST_CASE("load_rdg malformed line names the line number") {
  TempFile f("rdg_malformed.jsonl",
             "{\"kind\":\"scenario\",\"id\":\"s1\",\"description\":\"d\",\"affect_target\":\"excited\"}\n"
             "this is not json\n");
  CHECK_THROWS_WITH_AS(load_rdg(f.str()), "malformed record at line 2", DataError);
}

TEST_CASE("load_rdg duplicate ids") {
  TempFile f("rdg_dup.jsonl",
             "{\"kind\":\"scenario\",\"id\":\"s1\",\"description\":\"d\",\"affect_target\":\"excited\"}\n"
             "{\"kind\":\"scenario\",\"id\":\"s1\",\"description\":\"d2\",\"affect_target\":\"impatient\"}\n");
  CHECK_THROWS_AS(load_rdg(f.str()), DataError);
}

TEST_CASE("rdg serializer round trip") {
  TempFile f("rdg_rt_src.jsonl", rdg_fixture());
  RdgCorpus c = load_rdg(f.str());
  TempFile g("rdg_rt_dst.jsonl", "");
  save_rdg(c, g.str());
  RdgCorpus c2 = load_rdg(g.str());
  REQUIRE(c2.scenarios.size() == c.scenarios.size());
  REQUIRE(c2.utterances.size() == c.utterances.size());
  for (size_t i = 0; i < c.scenarios.size(); ++i) {
    CHECK(c2.scenarios[i].id == c.scenarios[i].id);
    CHECK(c2.scenarios[i].description == c.scenarios[i].description);
    CHECK(c2.scenarios[i].affect_target == c.scenarios[i].affect_target);
  }
  for (size_t i = 0; i < c.utterances.size(); ++i) {
    CHECK(c2.utterances[i].id == c.utterances[i].id);
    CHECK(c2.utterances[i].scenario_id == c.utterances[i].scenario_id);
    CHECK(c2.utterances[i].text == c.utterances[i].text);
    CHECK(c2.utterances[i].aggregated.affect == c.utterances[i].aggregated.affect);
    CHECK(c2.utterances[i].aggregated.typicality == c.utterances[i].aggregated.typicality);
  }
}

TEST_CASE("load_ed accepts manifest labels and validates turns") {
  TempFile manifest("ed_manifest.txt", ed_manifest_fixture());
  TempFile f("ed_ok.jsonl",
             "{\"kind\":\"conversation\",\"id\":\"c1\",\"situation\":\"I won a game\","
             "\"emotion\":\"proud\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi there\"},"
             "{\"speaker\":\"B\",\"text\":\"hello\"}]}\n");
  EdCorpus c = load_ed(f.str(), manifest.str());
  CHECK(c.conversations.size() == 1);
  CHECK(c.labels.size() == 32);
  CHECK(c.label_index("proud") == 0);
}

TEST_CASE("ed serializer round trip") {
  TempFile manifest("ed_rt_manifest.txt", ed_manifest_fixture());
  TempFile f("ed_rt_src.jsonl",
             "{\"kind\":\"conversation\",\"id\":\"c1\",\"situation\":\"I won a game\","
             "\"emotion\":\"proud\",\"turns\":[{\"speaker\":\"A\",\"text\":\"hi there\"},"
             "{\"speaker\":\"B\",\"text\":\"hello\"}]}\n");
  EdCorpus c = load_ed(f.str(), manifest.str());
  TempFile g("ed_rt_dst.jsonl", "");
  TempFile gm("ed_rt_dst_manifest.txt", "");
  save_ed(c, g.str(), gm.str());
  EdCorpus c2 = load_ed(g.str(), gm.str());
  REQUIRE(c2.conversations.size() == c.conversations.size());
  CHECK(c2.labels == c.labels);
  for (size_t i = 0; i < c.conversations.size(); ++i) {
    CHECK(c2.conversations[i].id == c.conversations[i].id);
    CHECK(c2.conversations[i].situation == c.conversations[i].situation);
    CHECK(c2.conversations[i].emotion_label == c.conversations[i].emotion_label);
    REQUIRE(c2.conversations[i].turns.size() == c.conversations[i].turns.size());
    for (size_t t = 0; t < c.conversations[i].turns.size(); ++t) {
      CHECK(c2.conversations[i].turns[t].speaker == c.conversations[i].turns[t].speaker);
      CHECK(c2.conversations[i].turns[t].text == c.conversations[i].turns[t].text);
    }
  }
}

TEST_CASE("load_ed rejects unknown labels") {
  TempFile manifest("ed_manifest2.txt", ed_manifest_fixture());
  TempFile f("ed_badlabel.jsonl",
             "{\"kind\":\"conversation\",\"id\":\"c1\",\"situation\":\"s\",\"emotion\":"
             "\"ecstatic2\",\"turns\":[{\"speaker\":\"A\",\"text\":\"x\"}]}\n");
  CHECK_THROWS_AS(load_ed(f.str(), manifest.str()), DataError);
}

TEST_CASE("load_ed rejects a 31-entry manifest") {
  std::string short_manifest;
  for (int i = 0; i < 31; ++i) short_manifest += "label" + std::to_string(i) + "\n";
  TempFile manifest("ed_manifest31.txt", short_manifest);
  TempFile f("ed_any.jsonl", "");
  CHECK_THROWS_WITH_AS(load_ed(f.str(), manifest.str()),
                       "label manifest has 31 entries, expected 32", DataError);
}

TEST_CASE("load_ed rejects empty or malformed turn lists") {
  TempFile manifest("ed_manifest3.txt", ed_manifest_fixture());
  TempFile empty_turns("ed_noturns.jsonl",
                       "{\"kind\":\"conversation\",\"id\":\"c1\",\"situation\":\"s\","
                       "\"emotion\":\"proud\",\"turns\":[]}\n");
  CHECK_THROWS_AS(load_ed(empty_turns.str(), manifest.str()), DataError);

  TempFile same_speaker("ed_samespeaker.jsonl",
                        "{\"kind\":\"conversation\",\"id\":\"c1\",\"situation\":\"s\","
                        "\"emotion\":\"proud\",\"turns\":[{\"speaker\":\"A\",\"text\":\"x\"},"
                        "{\"speaker\":\"A\",\"text\":\"y\"}]}\n");
  CHECK_THROWS_AS(load_ed(same_speaker.str(), manifest.str()), DataError);

  std::string many_turns = "{\"kind\":\"conversation\",\"id\":\"c1\",\"situation\":\"s\","
                           "\"emotion\":\"proud\",\"turns\":[";
  for (int i = 0; i < 7; ++i) {
    if (i) many_turns += ",";
    many_turns += std::string("{\"speaker\":\"") + (i % 2 ? "B" : "A") + "\",\"text\":\"t\"}";
  }
  many_turns += "]}\n";
  TempFile seven("ed_seventurns.jsonl", many_turns);
  CHECK_THROWS_AS(load_ed(seven.str(), manifest.str()), DataError);
}

TEST_CASE("make_split determinism and partition law") {
  std::string lines;
  for (int s = 0; s < 10; ++s) {
    std::string sid = "s" + std::to_string(s);
    lines += "{\"kind\":\"scenario\",\"id\":\"" + sid +
             "\",\"description\":\"d\",\"affect_target\":\"excited\"}\n";
    for (int u = 0; u < 4; ++u)
      lines += "{\"kind\":\"utterance\",\"id\":\"" + sid + "u" + std::to_string(u) +
               "\",\"scenario_id\":\"" + sid + "\",\"affect_target\":\"excited\",\"text\":\"t\"}\n";
  }
  TempFile f("rdg_split.jsonl", lines);
  RdgCorpus c = load_rdg(f.str());

  CorpusSplit a = make_split(c, 7, 3);
  CorpusSplit b = make_split(c, 7, 3);
  CHECK(a.train == b.train);
  CHECK(a.test_seen == b.test_seen);
  CHECK(a.test_unseen == b.test_unseen);
  CHECK(a.held_out_utterances == b.held_out_utterances);

  CHECK(a.test_unseen.size() == 3);
  CHECK(a.test_seen.size() == 3);
  CHECK(a.train.size() == 4);

  std::set<std::string> all;
  for (const auto& v : {a.train, a.test_seen, a.test_unseen})
    for (const auto& id : v) CHECK(all.insert(id).second);  // pairwise disjoint
  CHECK(all.size() == 10);

  CHECK_THROWS_AS(make_split(c, 1, 10), UsageError);

  // unseen scenarios contribute zero utterances to training
  auto train_set = train_utterances(c, a);
  for (const auto* u : train_set) {
    bool unseen = std::find(a.test_unseen.begin(), a.test_unseen.end(), u->scenario_id) !=
                  a.test_unseen.end();
    CHECK_FALSE(unseen);
  }
  // seen-test scenarios keep half their utterances out of training
  auto seen_test = test_utterances(c, a, true);
  CHECK(seen_test.size() == 3 * 2);  // 4 utterances per scenario, half held out
  auto unseen_test = test_utterances(c, a, false);
  CHECK(unseen_test.size() == 3 * 4);
  CHECK(train_set.size() + seen_test.size() == 10 * 4 - unseen_test.size());
}

TEST_CASE("build_example RDG layout and mask") {
  tok::Vocab v = fixture_vocab();
  Scenario s{"s1", "the robot ponders move", Affect::excited, SplitTag::train};
  Utterance u{"u1", "s1", Affect::impatient, "line here", "human", {}};
  u.aggregated.affect = 1.6;

  TrainingExample ex = build_example(v, s, u, 64);
  // <bos> <ctx> d e s c r i p t i o n... <aff:impatient> <sep> r e s p <eos>
  CHECK(ex.input_ids[0] == v.bos());
  CHECK(ex.input_ids[1] == v.ctx());
  CHECK(ex.input_ids[ex.context_len - 2] == v.affect_token("impatient"));
  CHECK(ex.input_ids[ex.context_len - 1] == v.sep());
  CHECK(ex.input_ids.back() == v.eos());
  CHECK(ex.affect_scalar == 1.6);
  CHECK(ex.group_id == "s1");

  // mask selects exactly the positions after the final <sep> through <eos>
  size_t kSep = 0;
  for (size_t p = 0; p < ex.input_ids.size(); ++p)
    if (ex.input_ids[p] == v.sep()) kSep = p;
  for (size_t p = 0; p < ex.input_ids.size(); ++p)
    CHECK(ex.target_mask[p] == (p > kSep));
  // response decodes back to the utterance text
  std::vector<tok::TokenId> resp(ex.input_ids.begin() + static_cast<long>(ex.context_len),
                                 ex.input_ids.end());
  CHECK(v.decode(resp) == "line here");
}

TEST_CASE("build_example truncates context from the left, never the response") {
  tok::Vocab v = tok::Vocab::fit({"w"}, 32);
  std::string long_desc;
  for (int i = 0; i < 500; ++i) long_desc += "w ";
  Scenario s{"s1", long_desc, Affect::excited, SplitTag::train};
  Utterance u{"u1", "s1", Affect::excited, "w w w", "human", {}};

  TrainingExample ex = build_example(v, s, u, 128);
  CHECK(ex.input_ids.size() == 128);
  CHECK(ex.input_ids[0] == v.bos());
  CHECK(ex.input_ids[1] == v.ctx());
  CHECK(ex.input_ids[ex.context_len - 1] == v.sep());
  // response intact: 3 tokens + <eos>
  CHECK(ex.input_ids.size() - ex.context_len == 4);

  // response alone exceeding the window is an error
  std::string long_resp;
  for (int i = 0; i < 200; ++i) long_resp += "w ";
  Utterance too_long{"u2", "s1", Affect::excited, long_resp, "human", {}};
  CHECK_THROWS_AS(build_example(v, s, too_long, 128), DataError);
}

TEST_CASE("ED examples window turns with inherited labels") {
  tok::Vocab v = tok::Vocab::fit({"i won a game hi there hello you did well thanks"}, 64);
  EdCorpus corpus;
  for (int i = 0; i < 32; ++i) corpus.labels.push_back("label" + std::to_string(i));
  EdConversation conv;
  conv.id = "c1";
  conv.situation = "i won a game";
  conv.emotion_label = "label5";
  conv.turns = {{"A", "hi there"}, {"B", "hello you"}, {"A", "did well"}, {"B", "thanks"}};
  corpus.conversations.push_back(conv);

  auto examples = build_examples(v, corpus, conv, 64);
  REQUIRE(examples.size() == 4);
  for (const auto& ex : examples) {
    CHECK(ex.affect_class == 5);
    CHECK(ex.group_id == "c1");
    CHECK(ex.input_ids[0] == v.bos());
    CHECK(ex.input_ids[ex.context_len - 1] == v.sep());
  }
  // turn 3 of 4: input = situation + turns 1-2, target = turn 3
  const auto& third = examples[2];
  std::vector<tok::TokenId> ctx(third.input_ids.begin(),
                                third.input_ids.begin() + static_cast<long>(third.context_len));
  CHECK(v.decode(ctx) == "i won a game hi there hello you");
  std::vector<tok::TokenId> resp(third.input_ids.begin() + static_cast<long>(third.context_len),
                                 third.input_ids.end());
  CHECK(v.decode(resp) == "did well");
  // number of <sep> tokens in the context: one per prior turn plus the final
  size_t seps = 0;
  for (size_t p = 0; p < third.context_len; ++p)
    if (third.input_ids[p] == v.sep()) ++seps;
  CHECK(seps == 3);
}

TEST_CASE("mask property holds over random examples") {
  tok::Vocab v = fixture_vocab();
  Rng rng(9);
  for (int rep = 0; rep < 50; ++rep) {
    std::string desc, resp;
    const char* pool[] = {"the", "robot", "ponders", "move", "line", "here", "a", "b", "c"};
    size_t dn = 1 + rng.below(20), rn = 1 + rng.below(8);
    for (size_t i = 0; i < dn; ++i) desc += std::string(pool[rng.below(9)]) + " ";
    for (size_t i = 0; i < rn; ++i) resp += std::string(pool[rng.below(9)]) + " ";
    Scenario s{"s1", desc, Affect::indifferent, SplitTag::train};
    Utterance u{"u1", "s1", Affect::excited, resp, "human", {}};
    TrainingExample ex = build_example(v, s, u, 32);

    size_t last_sep = 0;
    for (size_t p = 0; p < ex.input_ids.size(); ++p)
      if (ex.input_ids[p] == v.sep()) last_sep = p;
    for (size_t p = 0; p < ex.input_ids.size(); ++p)
      CHECK(ex.target_mask[p] == (p > last_sep));
    CHECK(ex.input_ids.size() <= 32);
    CHECK(ex.input_ids.back() == v.eos());
  }
}
