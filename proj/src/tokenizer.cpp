#include "mtaf/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

namespace mtaf::tok {

const std::vector<std::string>& Vocab::special_tokens() {
  static const std::vector<std::string> specials = {
      kBos, kEos, kSep, kCtx, kUnk, kPad, kAffExcited, kAffIndifferent, kAffImpatient,
  };
  return specials;
}

void Vocab::push_token(const std::string& token) {
  TokenId id = static_cast<TokenId>(id_to_token_.size());
  auto [it, inserted] = token_to_id_.emplace(token, id);
  if (!inserted) throw DataError("duplicate token in vocab: " + token);
  id_to_token_.push_back(token);
}

Vocab Vocab::fit(const std::vector<std::string>& texts, size_t max_vocab) {
  const auto& specials = special_tokens();
  if (max_vocab <= specials.size())
    throw UsageError("max_vocab must exceed the number of special tokens");

  // std::map keeps types sorted, which gives the lexicographic tie-break
  // for free when sorting by (count desc, token asc).
  std::map<std::string, size_t> counts;
  for (const auto& text : texts)
    for (const auto& w : split_words(text)) ++counts[w];

  std::vector<std::pair<std::string, size_t>> ranked(counts.begin(), counts.end());
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });

  Vocab v;
  for (const auto& s : specials) v.push_token(s);
  size_t budget = max_vocab - specials.size();
  for (const auto& [token, count] : ranked) {
    if (budget == 0) break;
    v.push_token(token);
    --budget;
  }
  return v;
}

std::vector<TokenId> Vocab::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  for (const auto& w : split_words(text)) {
    auto it = token_to_id_.find(w);
    ids.push_back(it != token_to_id_.end() ? it->second : token_to_id_.at(kUnk));
  }
  return ids;
}

std::string Vocab::decode(const std::vector<TokenId>& ids) const {
  std::string out;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size())
      throw DataError("decode: token id " + std::to_string(id) + " out of range (vocab size " +
                      std::to_string(id_to_token_.size()) + ")");
    if (is_special(id)) continue;
    if (!out.empty()) out.push_back(' ');
    out += id_to_token_[id];
  }
  return out;
}

TokenId Vocab::id_of(std::string_view token) const {
  auto it = token_to_id_.find(std::string(token));
  if (it == token_to_id_.end()) throw DataError("token not in vocab: " + std::string(token));
  return it->second;
}

const std::string& Vocab::token_of(TokenId id) const {
  if (id < 0 || static_cast<size_t>(id) >= id_to_token_.size())
    throw DataError("token id out of range: " + std::to_string(id));
  return id_to_token_[id];
}

TokenId Vocab::affect_token(std::string_view affect) const {
  return id_of("<aff:" + std::string(affect) + ">");
}

std::string Vocab::serialize() const {
  std::string out;
  for (const auto& t : id_to_token_) {
    out += t;
    out.push_back('\n');
  }
  return out;
}

Vocab Vocab::deserialize(std::string_view text) {
  Vocab v;
  std::istringstream in{std::string(text)};
  std::string line;
  while (std::getline(in, line)) v.push_token(line);
  const auto& specials = special_tokens();
  if (v.size() < specials.size())
    throw DataError("vocab file missing special tokens");
  for (size_t i = 0; i < specials.size(); ++i)
    if (v.id_to_token_[i] != specials[i])
      throw DataError("vocab file special tokens out of order at line " + std::to_string(i + 1));
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write vocab file: " + path);
  out << serialize();
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot read vocab file: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

}  // namespace mtaf::tok
