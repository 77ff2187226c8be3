#pragma once

#include <cstddef>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "mtaf/common.hpp"

namespace mtaf::tok {

using TokenId = int;

// Word-level vocabulary with a fixed block of special tokens at the front.
// Ids are dense in [0, size()); the token<->id mapping is bijective.
class Vocab {
 public:
  static constexpr const char* kBos = "<bos>";
  static constexpr const char* kEos = "<eos>";
  static constexpr const char* kSep = "<sep>";
  static constexpr const char* kCtx = "<ctx>";
  static constexpr const char* kUnk = "<unk>";
  static constexpr const char* kPad = "<pad>";
  static constexpr const char* kAffExcited = "<aff:excited>";
  static constexpr const char* kAffIndifferent = "<aff:indifferent>";
  static constexpr const char* kAffImpatient = "<aff:impatient>";

  // Declared order; serialized vocabs start with exactly these lines.
  static const std::vector<std::string>& special_tokens();

  // Builds a vocabulary from raw texts: lowercased, split on whitespace and
  // punctuation boundaries, keeping the most frequent types up to max_vocab
  // (ties broken lexicographically). Deterministic.
  static Vocab fit(const std::vector<std::string>& texts, size_t max_vocab);

  // Surface text -> ids. Out-of-vocabulary types map to <unk>; no special
  // tokens are inserted.
  std::vector<TokenId> encode(std::string_view text) const;

  // Ids -> surface text, single-space joined; special tokens are omitted.
  // Throws DataError on an id outside [0, size()).
  std::string decode(const std::vector<TokenId>& ids) const;

  TokenId id_of(std::string_view token) const;  // throws DataError if absent
  const std::string& token_of(TokenId id) const;
  bool is_special(TokenId id) const { return id >= 0 && static_cast<size_t>(id) < special_tokens().size(); }

  TokenId bos() const { return id_of(kBos); }
  TokenId eos() const { return id_of(kEos); }
  TokenId sep() const { return id_of(kSep); }
  TokenId ctx() const { return id_of(kCtx); }
  TokenId unk() const { return id_of(kUnk); }
  TokenId pad() const { return id_of(kPad); }
  TokenId affect_token(std::string_view affect) const;  // "excited" | "indifferent" | "impatient"

  size_t size() const { return id_to_token_.size(); }

  // One token per line, line number == id.
  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
  std::string serialize() const;
  static Vocab deserialize(std::string_view text);

  // FNV-1a of the serialized form; checkpoints store this to detect drift.
  uint64_t hash() const { return fnv1a(serialize()); }

  bool operator==(const Vocab& other) const { return id_to_token_ == other.id_to_token_; }

 private:
  Vocab() = default;
  void push_token(const std::string& token);

  std::vector<std::string> id_to_token_;
  std::unordered_map<std::string, TokenId> token_to_id_;
};

}  // namespace mtaf::tok
