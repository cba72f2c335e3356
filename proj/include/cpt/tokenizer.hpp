#pragma once

// Word-level tokenizer. Words are whitespace-delimited; newline runs are
// tokens of their own ("\n\n" greedily, then "\n"), so prompt separators
// survive a text round trip. The bare-space separator " " is a vocabulary
// entry the prompt builder emits directly; text never lexes to it.

#include <algorithm>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpt/common.hpp"

namespace cpt {

using TokenId = std::int32_t;

inline constexpr std::string_view kPad = "<pad>";
inline constexpr std::string_view kUnk = "<unk>";
inline constexpr std::string_view kSlot = "<slot>";

inline const std::vector<std::string>& default_reserved() {
  static const std::vector<std::string> r{std::string(kPad), std::string(kUnk), std::string(kSlot)};
  return r;
}

inline bool is_whitespace_literal(std::string_view s) { return s == " " || s == "\n" || s == "\n\n"; }

/// Splits text into lexemes. Spaces, tabs and carriage returns delimit words.
inline std::vector<std::string> lex(std::string_view text) {
  std::vector<std::string> out;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) out.push_back(std::move(word)), word.clear();
  };
  for (std::size_t i = 0; i < text.size();) {
    const char c = text[i];
    if (c == '\n') {
      flush();
      if (i + 1 < text.size() && text[i + 1] == '\n') {
        out.emplace_back("\n\n");
        i += 2;
      } else {
        out.emplace_back("\n");
        ++i;
      }
    } else if (c == ' ' || c == '\t' || c == '\r') {
      flush();
      ++i;
    } else {
      word.push_back(c);
      ++i;
    }
  }
  flush();
  return out;
}

class Vocabulary {
 public:
  Vocabulary() = default;

  /// Builds from an ordered entry list; the first three entries must be the
  /// default reserved names.
  explicit Vocabulary(std::vector<std::string> entries) : entries_(std::move(entries)) {
    const auto& res = default_reserved();
    if (entries_.size() < res.size()) throw Error("vocabulary missing reserved entries");
    for (std::size_t i = 0; i < res.size(); ++i)
      if (entries_[i] != res[i]) throw Error("vocabulary entry " + std::to_string(i) + " must be " + res[i]);
    index_.reserve(entries_.size());
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (!index_.emplace(entries_[i], static_cast<TokenId>(i)).second)
        throw Error("duplicate vocabulary entry: " + entries_[i]);
    }
  }

  std::size_t size() const { return entries_.size(); }
  const std::vector<std::string>& entries() const { return entries_; }

  TokenId pad() const { return 0; }
  TokenId unk() const { return 1; }
  TokenId slot() const { return 2; }

  bool contains(std::string_view s) const { return index_.count(std::string(s)) != 0; }

  /// Id of an exact entry; throws when absent.
  TokenId id_of(std::string_view s) const {
    auto it = index_.find(std::string(s));
    if (it == index_.end()) throw Error("not in vocabulary: " + std::string(s));
    return it->second;
  }

  const std::string& surface(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= entries_.size()) throw Error("unknown token id");
    return entries_[static_cast<std::size_t>(id)];
  }

  std::vector<TokenId> encode(std::string_view text) const {
    std::vector<TokenId> ids;
    for (const auto& w : lex(text)) {
      auto it = index_.find(w);
      ids.push_back(it == index_.end() ? unk() : it->second);
    }
    return ids;
  }

  /// Renders ids as text. Adjacent word tokens are joined by one space;
  /// whitespace literals are emitted verbatim with no extra spacing.
  std::string decode(std::span<const TokenId> ids) const {
    std::string out;
    bool prev_word = false;
    for (TokenId id : ids) {
      const std::string& s = surface(id);
      const bool word = !is_whitespace_literal(s);
      if (word && prev_word) out.push_back(' ');
      out += s;
      prev_word = word;
    }
    return out;
  }

  nlohmann::json to_json() const { return nlohmann::json(entries_); }
  static Vocabulary from_json(const nlohmann::json& j) {
    if (!j.is_array()) throw Error("vocabulary file must be a JSON array");
    return Vocabulary(j.get<std::vector<std::string>>());
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, to_json().dump(1) + "\n"); }
  static Vocabulary load(const std::filesystem::path& path) {
    return from_json(nlohmann::json::parse(read_file(path)));
  }

  friend bool operator==(const Vocabulary& a, const Vocabulary& b) { return a.entries_ == b.entries_; }

 private:
  std::vector<std::string> entries_;
  std::unordered_map<std::string, TokenId> index_;
};

/// Reserved names first (in order), then corpus lexemes in first-occurrence
/// order. Reserved must start with the default <pad>/<unk>/<slot> triple;
/// extra reserved names (e.g. separator literals) follow it.
inline Vocabulary build_vocabulary(std::span<const std::string> corpus,
                                   std::span<const std::string> reserved = default_reserved()) {
  if (corpus.empty()) throw Error("empty corpus");
  std::vector<std::string> entries(reserved.begin(), reserved.end());
  std::unordered_map<std::string, bool> seen;
  for (const auto& e : entries) seen.emplace(e, true);
  for (const auto& text : corpus)
    for (auto& w : lex(text))
      if (seen.emplace(w, true).second) entries.push_back(std::move(w));
  return Vocabulary(std::move(entries));
}

}  // namespace cpt
