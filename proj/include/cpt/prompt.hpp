#pragma once

// Template rendering and context assembly with a role tag and sub-example
// index on every token.

#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpt/common.hpp"
#include "cpt/tokenizer.hpp"

namespace cpt {

enum class TokenRole : std::uint8_t {
  Input,
  InputTemplate,
  Output,
  OutputTemplate,
  IntraSep,
  InterSep,
  Instruction,
  LearnableSlot,
};

inline const char* role_name(TokenRole r) {
  switch (r) {
    case TokenRole::Input: return "input";
    case TokenRole::InputTemplate: return "input_template";
    case TokenRole::Output: return "output";
    case TokenRole::OutputTemplate: return "output_template";
    case TokenRole::IntraSep: return "intra_sep";
    case TokenRole::InterSep: return "inter_sep";
    case TokenRole::Instruction: return "instruction";
    case TokenRole::LearnableSlot: return "learnable_slot";
  }
  return "?";
}

/// Template literals and separators; these get the "format" radius.
inline bool is_format_role(TokenRole r) {
  return r == TokenRole::InputTemplate || r == TokenRole::OutputTemplate || r == TokenRole::IntraSep ||
         r == TokenRole::InterSep || r == TokenRole::Instruction;
}

inline constexpr std::string_view kPlaceholder = "{}";

struct TemplateSet {
  std::string input_template = "input: {}";
  std::string output_template = "output: {}";
  std::string intra_sep = "\n";
  std::string inter_sep = "\n\n";
  std::string instruction;  // empty: none

  void validate() const {
    for (const auto* t : {&input_template, &output_template}) {
      const auto first = t->find(kPlaceholder);
      if (first == std::string::npos || t->find(kPlaceholder, first + 1) != std::string::npos)
        throw Error("template must contain exactly one placeholder: " + *t);
    }
    if (intra_sep.empty() || inter_sep.empty()) throw Error("separators must be non-empty");
  }

  friend bool operator==(const TemplateSet&, const TemplateSet&) = default;
};

inline void to_json(nlohmann::json& j, const TemplateSet& t) {
  j = {{"input_template", t.input_template},
       {"output_template", t.output_template},
       {"intra_sep", t.intra_sep},
       {"inter_sep", t.inter_sep},
       {"instruction", t.instruction}};
}
inline void from_json(const nlohmann::json& j, TemplateSet& t) {
  j.at("input_template").get_to(t.input_template);
  j.at("output_template").get_to(t.output_template);
  j.at("intra_sep").get_to(t.intra_sep);
  j.at("inter_sep").get_to(t.inter_sep);
  t.instruction = j.value("instruction", std::string{});
  t.validate();
}

inline const std::vector<std::string>& input_template_choices() {
  static const std::vector<std::string> v{"input: {}", "text: {}"};
  return v;
}
inline const std::vector<std::string>& output_template_choices() {
  static const std::vector<std::string> v{"output: {}", "target: {}", "label: {}"};
  return v;
}
inline const std::vector<std::string>& intra_sep_choices() {
  static const std::vector<std::string> v{"\n", " "};
  return v;
}
inline const std::vector<std::string>& inter_sep_choices() {
  static const std::vector<std::string> v{"\n\n", "\n"};
  return v;
}

/// Every input x output x intra x inter combination (24 sets).
inline std::vector<TemplateSet> default_template_pool() {
  std::vector<TemplateSet> pool;
  for (const auto& in : input_template_choices())
    for (const auto& out : output_template_choices())
      for (const auto& intra : intra_sep_choices())
        for (const auto& inter : inter_sep_choices()) pool.push_back({in, out, intra, inter, {}});
  return pool;
}

/// Separator literals that must be single vocabulary entries.
inline std::vector<std::string> format_literals() { return {" ", "\n", "\n\n"}; }

/// Words appearing in the built-in templates.
inline std::vector<std::string> template_words() {
  std::vector<std::string> words;
  for (const auto* choices : {&input_template_choices(), &output_template_choices()})
    for (const auto& t : *choices)
      for (auto& w : lex(t))
        if (w != kPlaceholder) words.push_back(w);
  return words;
}

inline TemplateSet sample_template(std::span<const TemplateSet> pool, std::uint64_t seed) {
  if (pool.empty()) throw Error("empty template pool");
  Rng rng(derive_seed(seed, "template"));
  return pool[uniform_index(rng, pool.size())];
}

inline nlohmann::json template_pool_to_json(std::span<const TemplateSet> pool) {
  return nlohmann::json(std::vector<TemplateSet>(pool.begin(), pool.end()));
}
inline std::vector<TemplateSet> template_pool_from_json(const nlohmann::json& j) {
  return j.get<std::vector<TemplateSet>>();
}

struct RoleTaggedSequence {
  std::vector<TokenId> ids;
  std::vector<TokenRole> roles;
  std::vector<int> sub_example;

  std::size_t size() const { return ids.size(); }

  void push(TokenId id, TokenRole role, int k) {
    ids.push_back(id);
    roles.push_back(role);
    sub_example.push_back(k);
  }
  void append(const RoleTaggedSequence& other) {
    ids.insert(ids.end(), other.ids.begin(), other.ids.end());
    roles.insert(roles.end(), other.roles.begin(), other.roles.end());
    sub_example.insert(sub_example.end(), other.sub_example.begin(), other.sub_example.end());
  }
  /// Highest sub-example index present (the number of context examples for
  /// a context sequence).
  int max_sub_example() const {
    int m = 0;
    for (int k : sub_example) m = std::max(m, k);
    return m;
  }

  friend bool operator==(const RoleTaggedSequence&, const RoleTaggedSequence&) = default;
};

namespace detail {

inline std::pair<std::string, std::string> split_template(const std::string& t) {
  const auto at = t.find(kPlaceholder);
  return {t.substr(0, at), t.substr(at + kPlaceholder.size())};
}

inline void push_text(RoleTaggedSequence& seq, const Vocabulary& v, std::string_view text, TokenRole role, int k) {
  for (const auto& w : lex(text)) {
    if (!v.contains(w)) throw Error("word not in vocabulary: " + w);
    seq.push(v.id_of(w), role, k);
  }
}

/// Separators that are vocabulary entries become one token; anything else
/// is lexed.
inline void push_sep(RoleTaggedSequence& seq, const Vocabulary& v, const std::string& sep, TokenRole role, int k) {
  if (v.contains(sep)) {
    seq.push(v.id_of(sep), role, k);
  } else {
    push_text(seq, v, sep, role, k);
  }
}

inline void push_filled(RoleTaggedSequence& seq, const Vocabulary& v, const std::string& tmpl, std::string_view value,
                        TokenRole tmpl_role, TokenRole value_role, int k) {
  auto [pre, post] = split_template(tmpl);
  push_text(seq, v, pre, tmpl_role, k);
  push_text(seq, v, value, value_role, k);
  push_text(seq, v, post, tmpl_role, k);
}

}  // namespace detail

/// T_i(x) + S_intra + T_o(y) [+ S_inter], tagged with sub-example `k`.
inline RoleTaggedSequence embed_example(std::string_view x, std::string_view y, const TemplateSet& t,
                                        const Vocabulary& v, int k = 1, bool with_inter_sep = true) {
  t.validate();
  RoleTaggedSequence seq;
  detail::push_filled(seq, v, t.input_template, x, TokenRole::InputTemplate, TokenRole::Input, k);
  detail::push_sep(seq, v, t.intra_sep, TokenRole::IntraSep, k);
  detail::push_filled(seq, v, t.output_template, y, TokenRole::OutputTemplate, TokenRole::Output, k);
  if (std::count(seq.roles.begin(), seq.roles.end(), TokenRole::Output) == 0) throw Error("empty label");
  if (with_inter_sep) detail::push_sep(seq, v, t.inter_sep, TokenRole::InterSep, k);
  return seq;
}

/// Instruction tokens (sub-example 0) followed by the inter-separator.
inline RoleTaggedSequence instruction_prefix(const TemplateSet& t, const Vocabulary& v) {
  RoleTaggedSequence seq;
  if (t.instruction.empty()) return seq;
  detail::push_text(seq, v, t.instruction, TokenRole::Instruction, 0);
  detail::push_sep(seq, v, t.inter_sep, TokenRole::Instruction, 0);
  return seq;
}

struct Example {
  std::string x;
  std::string y;
  friend bool operator==(const Example&, const Example&) = default;
};

/// [instruction] + X_Emb_1 + ... + X_Emb_N.
inline RoleTaggedSequence build_context(std::span<const Example> examples, const TemplateSet& t,
                                        const Vocabulary& v, std::size_t max_len = SIZE_MAX) {
  if (examples.empty()) throw Error("context needs at least one example");
  RoleTaggedSequence seq = instruction_prefix(t, v);
  for (std::size_t i = 0; i < examples.size(); ++i)
    seq.append(embed_example(examples[i].x, examples[i].y, t, v, static_cast<int>(i + 1)));
  if (seq.size() > max_len) throw Error("context overflow");
  return seq;
}

/// X_Train_i = X_Context + X_Emb_i, with `i` 1-based. The trailing copy stops
/// after its label tokens and carries sub-example N+1.
inline RoleTaggedSequence build_train_example(const RoleTaggedSequence& context, std::size_t i,
                                              std::span<const Example> examples, const TemplateSet& t,
                                              const Vocabulary& v, std::size_t max_len = SIZE_MAX) {
  const int n = context.max_sub_example();
  if (i < 1 || i > static_cast<std::size_t>(n) || i > examples.size()) throw Error("training index out of range");
  RoleTaggedSequence seq = context;
  seq.append(embed_example(examples[i - 1].x, examples[i - 1].y, t, v, n + 1, false));
  if (seq.size() > max_len) throw Error("context overflow");
  return seq;
}

/// Context + T_i(x) + S_intra + the output template up to its placeholder.
/// The last position is where the label's first token is predicted.
inline RoleTaggedSequence build_query(const RoleTaggedSequence& context, std::string_view x, const TemplateSet& t,
                                      const Vocabulary& v, std::size_t max_len = SIZE_MAX) {
  const int k = context.max_sub_example() + 1;
  RoleTaggedSequence seq = context;
  detail::push_filled(seq, v, t.input_template, x, TokenRole::InputTemplate, TokenRole::Input, k);
  detail::push_sep(seq, v, t.intra_sep, TokenRole::IntraSep, k);
  detail::push_text(seq, v, detail::split_template(t.output_template).first, TokenRole::OutputTemplate, k);
  if (seq.size() > max_len) throw Error("context overflow");
  return seq;
}

struct LabelGroup {
  int k;
  std::vector<std::size_t> positions;  // absolute positions of Output tokens
};

/// Output-role positions grouped by sub-example, in sequence order. The
/// logit that predicts the token at position p lives at p - 1.
inline std::vector<LabelGroup> label_positions(const RoleTaggedSequence& seq) {
  std::vector<LabelGroup> groups;
  for (std::size_t p = 0; p < seq.size(); ++p) {
    if (seq.roles[p] != TokenRole::Output) continue;
    if (groups.empty() || groups.back().k != seq.sub_example[p]) groups.push_back({seq.sub_example[p], {}});
    groups.back().positions.push_back(p);
  }
  return groups;
}

/// Human-readable dump: the prompt text followed by a role line per token.
inline std::string dump_prompt(const RoleTaggedSequence& seq, const Vocabulary& v) {
  std::string out = v.decode(seq.ids);
  out += "\n---\n";
  for (std::size_t p = 0; p < seq.size(); ++p) {
    std::string s = v.surface(seq.ids[p]);
    if (s == "\n") s = "\\n";
    if (s == "\n\n") s = "\\n\\n";
    if (s == " ") s = "\\s";
    out += std::to_string(p) + "\t" + std::to_string(seq.sub_example[p]) + "\t" + role_name(seq.roles[p]) + "\t" + s +
           "\n";
  }
  return out;
}

}  // namespace cpt
