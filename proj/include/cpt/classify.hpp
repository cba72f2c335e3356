#pragma once

// First-token pruned classification: the prediction is the label whose first
// token has the highest logit at the query position, among label tokens only.

#include <algorithm>
#include <span>
#include <vector>

#include "cpt/tinylm.hpp"

namespace cpt {

inline void require_first_token_separable(std::span<const TokenId> label_first_tokens) {
  if (label_first_tokens.empty()) throw Error("no labels");
  std::vector<TokenId> sorted(label_first_tokens.begin(), label_first_tokens.end());
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw Error("labels not first-token separable");
}

/// First token of each label's encoding.
inline std::vector<TokenId> label_first_tokens(const Vocabulary& v, std::span<const std::string> labels) {
  std::vector<TokenId> out;
  for (const auto& l : labels) {
    const auto ids = v.encode(l);
    if (ids.empty()) throw Error("empty label");
    if (ids.front() == v.unk()) throw Error("label not in vocabulary: " + l);
    out.push_back(ids.front());
  }
  return out;
}

/// Index (into `label_first_tokens`) of the largest restricted logit; ties go
/// to the earliest label.
inline std::size_t restricted_argmax(const RowVector& logits, std::span<const TokenId> label_first_tokens) {
  std::size_t best = 0;
  for (std::size_t c = 1; c < label_first_tokens.size(); ++c)
    if (logits(label_first_tokens[c]) > logits(label_first_tokens[best])) best = c;
  return best;
}

/// Classifies from the logits at the last position of `conditioning`.
inline std::size_t classify(const TinyLM& model, const EmbeddedSequence& conditioning,
                            std::span<const TokenId> label_first_tokens) {
  require_first_token_separable(label_first_tokens);
  return restricted_argmax(model.logits_at(conditioning, conditioning.size() - 1), label_first_tokens);
}

/// Cross-entropy (full vocabulary) of `token` at the last position.
inline double query_loss(const TinyLM& model, const EmbeddedSequence& conditioning, TokenId token) {
  const Target t{conditioning.size() - 1, token, 1.0};
  return model.loss(conditioning, std::span<const Target>(&t, 1));
}

}  // namespace cpt
