#pragma once

// Pretraining corpus and loop. The corpus mixes two curricula:
//  - token streams with repeated bigrams (A B ... A -> B), the classic
//    induction-head signal;
//  - in-context classification episodes rendered with the prompt templates,
//    supervised only on labels that an earlier example makes answerable.
// All content words are pseudo-words from a pool disjoint from evaluation
// data. Pseudo-word embedding rows can be kept at their random init so that
// unseen evaluation words are statistically indistinguishable from
// pretraining words.

#include <functional>
#include <string>
#include <unordered_set>
#include <vector>

#include "cpt/common.hpp"
#include "cpt/prompt.hpp"
#include "cpt/setclass_data.hpp"
#include "cpt/tinylm.hpp"

namespace cpt {

/// Fixed words used by instruction prompts.
inline std::string category_instruction(std::span<const std::string> labels) {
  std::string s = "Classify the following text into one of the following categories:";
  for (const auto& l : labels) s += " " + l;
  return s;
}
inline std::string sentiment_instruction(const std::string& first, const std::string& second) {
  return "Classify the sentiment of the following text as " + first + " or " + second;
}
inline std::vector<std::string> instruction_words() {
  return lex(category_instruction({}) + " " + sentiment_instruction("", ""));
}

/// Instruction text for a dataset (categories in label order).
inline std::string instruction_for(const LabeledDataset& ds) {
  if (ds.name == "sentiment" && ds.labels.size() == 2) return sentiment_instruction(ds.labels[0], ds.labels[1]);
  return category_instruction(ds.labels);
}

/// A token sequence and the positions whose logits are supervised to
/// predict the following token.
struct PretrainSequence {
  std::vector<TokenId> ids;
  std::vector<std::size_t> supervised;
};

struct PretrainCorpusSpec {
  std::size_t pool_words = 1800;
  LengthRange word_length{4, 7};
  std::size_t induction_sequences = 2000;
  std::size_t episode_sequences = 6000;
  std::size_t min_stream_len = 24;
  std::size_t max_stream_len = 96;
  std::size_t max_episode_len = 200;
  std::uint64_t seed = 0;
};

/// The pretraining word pool. Generated before any dataset so datasets can
/// exclude it.
inline std::vector<std::string> pretraining_pool(const PretrainCorpusSpec& spec) {
  std::unordered_set<std::string> taken;
  for (const auto& w : template_words()) taken.insert(w);
  for (const auto& w : instruction_words()) taken.insert(w);
  PseudoWordGenerator gen(derive_seed(spec.seed, "pretrain-pool"), spec.word_length);
  return gen.unique_words(spec.pool_words, taken);
}

namespace detail {

inline PretrainSequence induction_stream(std::span<const TokenId> pool, std::size_t len, Rng& rng) {
  PretrainSequence s;
  s.ids.resize(len);
  for (auto& id : s.ids) id = pool[uniform_index(rng, pool.size())];
  if (uniform_index(rng, 3) != 0) {
    // repeated segment: second half copies the first
    const std::size_t half = len / 2;
    for (std::size_t i = 0; i < half; ++i) s.ids[half + i] = s.ids[i];
    for (std::size_t p = half; p + 1 < 2 * half; ++p) s.supervised.push_back(p);
    return s;
  }
  const std::size_t pairs = 1 + len / 12;
  std::vector<bool> used(len, false);
  for (std::size_t r = 0; r < pairs; ++r) {
    const std::size_t i = uniform_index(rng, len / 2);
    const std::size_t j = i + 2 + uniform_index(rng, len - i - 3);
    if (used[i] || used[i + 1] || used[j] || used[j + 1]) continue;
    s.ids[j] = s.ids[i];
    s.ids[j + 1] = s.ids[i + 1];
    used[i] = used[i + 1] = used[j] = used[j + 1] = true;
    s.supervised.push_back(j);
  }
  std::sort(s.supervised.begin(), s.supervised.end());
  return s;
}

inline std::optional<PretrainSequence> classification_episode(const std::vector<std::string>& pool,
                                                               std::span<const TemplateSet> templates,
                                                               const Vocabulary& v, std::size_t max_len, Rng& rng) {
  const std::size_t n_classes = 2 + uniform_index(rng, 4);
  // a third of the episodes are exact single-word recall
  const bool simple = uniform_index(rng, 3) == 0;
  const std::size_t n_members = simple ? 1 : 2 + uniform_index(rng, 5);
  const std::size_t per_input = simple ? 1 : 1 + uniform_index(rng, std::min<std::size_t>(n_members, 5));
  const bool with_filler = !simple && uniform_index(rng, 4) == 0;
  const std::size_t n_filler = with_filler ? 1 + uniform_index(rng, 3) : 0;

  std::vector<std::string> words;
  std::unordered_set<std::size_t> picked;
  const std::size_t need = n_classes * (n_members + 1) + 8;
  while (words.size() < need) {
    const std::size_t i = uniform_index(rng, pool.size());
    if (picked.insert(i).second) words.push_back(pool[i]);
  }
  std::vector<std::string> labels(words.begin(), words.begin() + static_cast<long>(n_classes));
  auto member = [&](std::size_t c, std::size_t j) { return words[n_classes + c * n_members + j]; };
  std::vector<std::string> fillers(words.end() - 8, words.end());

  TemplateSet t = templates[uniform_index(rng, templates.size())];
  if (uniform_index(rng, 4) == 0) {
    auto shown = labels;
    shuffle_in_place(shown, rng);
    t.instruction = n_classes == 2 && uniform_index(rng, 2) == 0 ? sentiment_instruction(shown[0], shown[1])
                                                                  : category_instruction(shown);
  }

  const std::size_t n_examples = 2 * n_classes + uniform_index(rng, 7);
  std::vector<Example> examples;
  std::vector<std::vector<std::string>> evidence;  // member words of each example
  for (std::size_t e = 0; e < n_examples; ++e) {
    const std::size_t c = uniform_index(rng, n_classes);
    std::vector<std::size_t> idx(n_members);
    for (std::size_t j = 0; j < n_members; ++j) idx[j] = j;
    shuffle_in_place(idx, rng);
    std::vector<std::string> x;
    for (std::size_t j = 0; j < per_input; ++j) x.push_back(member(c, idx[j]));
    evidence.push_back(x);
    for (std::size_t f = 0; f < n_filler; ++f) x.push_back(fillers[uniform_index(rng, fillers.size())]);
    shuffle_in_place(x, rng);
    examples.push_back({join_words(x), labels[c]});
  }
  RoleTaggedSequence seq = build_context(examples, t, v);
  while (seq.size() > max_len && examples.size() > n_classes) {
    examples.pop_back();
    seq = build_context(examples, t, v);
  }
  if (seq.size() > max_len) return std::nullopt;

  PretrainSequence out;
  out.ids = seq.ids;
  // supervise a label only when an earlier example of the same class shares
  // one of its member words, so every target is answerable from context
  for (const auto& g : label_positions(seq)) {
    const auto e = static_cast<std::size_t>(g.k - 1);
    bool answerable = false;
    for (std::size_t prev = 0; prev < e && !answerable; ++prev) {
      if (examples[prev].y != examples[e].y) continue;
      for (const auto& w : evidence[e])
        if (std::find(evidence[prev].begin(), evidence[prev].end(), w) != evidence[prev].end()) answerable = true;
    }
    if (answerable)
      for (std::size_t p : g.positions) out.supervised.push_back(p - 1);
  }
  if (out.supervised.empty()) return std::nullopt;
  return out;
}

}  // namespace detail

inline std::vector<PretrainSequence> make_pretraining_corpus(const PretrainCorpusSpec& spec, const Vocabulary& v,
                                                             std::span<const TemplateSet> templates) {
  const auto pool = pretraining_pool(spec);
  std::vector<TokenId> pool_ids;
  for (const auto& w : pool) pool_ids.push_back(v.id_of(w));
  Rng rng(derive_seed(spec.seed, "pretrain-corpus"));
  std::vector<PretrainSequence> corpus;
  for (std::size_t i = 0; i < spec.induction_sequences; ++i) {
    const std::size_t len = spec.min_stream_len + uniform_index(rng, spec.max_stream_len - spec.min_stream_len + 1);
    corpus.push_back(detail::induction_stream(pool_ids, len, rng));
  }
  for (std::size_t made = 0; made < spec.episode_sequences;) {
    if (auto ep = detail::classification_episode(pool, templates, v, spec.max_episode_len, rng)) {
      corpus.push_back(std::move(*ep));
      ++made;
    }
  }
  shuffle_in_place(corpus, rng);
  return corpus;
}

enum class PretrainOptimizer { Sgd, Adam };

struct PretrainOptions {
  std::size_t steps = 3000;
  double lr = 1e-3;
  std::size_t batch_size = 8;
  PretrainOptimizer optimizer = PretrainOptimizer::Adam;
  std::size_t warmup_steps = 100;
  double grad_clip = 1.0;
  std::uint64_t seed = 0;
  /// Token rows that keep their initial values; empty means all trainable.
  std::vector<bool> frozen_token_rows;
  std::size_t log_every = 0;
  std::function<void(std::size_t step, double loss)> on_log;
  std::function<void(std::size_t step, const TinyLM&)> on_model;
};

struct PretrainReport {
  double initial_loss = 0.0;
  double final_loss = 0.0;
  std::vector<double> step_losses;
};

/// Mean per-target cross-entropy over a corpus slice.
inline double corpus_loss(const TinyLM& model, std::span<const PretrainSequence> corpus) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& s : corpus) {
    std::vector<Target> targets;
    for (std::size_t p : s.supervised) targets.push_back({p, s.ids[p + 1], 1.0});
    total += model.loss(EmbeddedSequence(model.embed(s.ids)), targets);
    count += targets.size();
  }
  return count ? total / static_cast<double>(count) : 0.0;
}

/// Trains a freshly initialized model, then freezes it.
inline TinyLM pretrain(const TinyLMConfig& config, std::span<const PretrainSequence> corpus,
                       const PretrainOptions& opt, PretrainReport* report = nullptr) {
  TinyLM model(config);
  for (const auto& s : corpus)
    for (TokenId id : s.ids)
      if (id < 0 || static_cast<std::size_t>(id) >= config.vocab_size) throw Error("corpus token out of range");
  if (!opt.frozen_token_rows.empty() && opt.frozen_token_rows.size() != config.vocab_size)
    throw Error("frozen_token_rows size mismatch");

  const std::size_t probe_n = std::min<std::size_t>(corpus.size(), 64);
  const auto probe = corpus.subspan(0, probe_n);
  if (report) report->initial_loss = corpus_loss(model, probe);

  if (opt.steps > 0 && corpus.empty()) throw Error("empty pretraining corpus");
  Rng rng(derive_seed(opt.seed, "pretrain-batches"));
  ModelParams grad = model.params().zeros_like();
  ModelParams m1 = grad, m2 = grad;
  const double b1 = 0.9, b2 = 0.999, adam_eps = 1e-8;

  for (std::size_t step = 0; step < opt.steps; ++step) {
    grad.for_each([](const std::string&, Matrix& m) { m.setZero(); });
    std::vector<std::size_t> batch(opt.batch_size);
    std::size_t n_targets = 0;
    for (auto& b : batch) {
      b = uniform_index(rng, corpus.size());
      n_targets += corpus[b].supervised.size();
    }
    double loss = 0.0;
    for (std::size_t b : batch) {
      const auto& s = corpus[b];
      std::vector<Target> targets;
      for (std::size_t p : s.supervised)
        targets.push_back({p, s.ids[p + 1], 1.0 / static_cast<double>(n_targets)});
      if (targets.empty()) continue;
      auto lg = model.loss_and_param_grad(EmbeddedSequence(model.embed(s.ids)), targets, grad);
      loss += lg.loss;
      for (std::size_t i = 0; i < s.ids.size(); ++i) grad.tok_emb.row(s.ids[i]) += lg.grad.row(static_cast<Eigen::Index>(i));
    }
    if (!std::isfinite(loss)) throw Error("pretraining diverged");
    for (std::size_t r = 0; r < opt.frozen_token_rows.size(); ++r)
      if (opt.frozen_token_rows[r]) grad.tok_emb.row(static_cast<Eigen::Index>(r)).setZero();

    double sq = 0.0;
    grad.for_each([&](const std::string&, Matrix& g) { sq += g.squaredNorm(); });
    const double gnorm = std::sqrt(sq);
    if (!std::isfinite(gnorm)) throw Error("pretraining diverged");
    const double clip = (opt.grad_clip > 0 && gnorm > opt.grad_clip) ? opt.grad_clip / gnorm : 1.0;

    double lr = opt.lr;
    if (step < opt.warmup_steps) lr *= static_cast<double>(step + 1) / static_cast<double>(opt.warmup_steps);
    else lr *= 1.0 - 0.9 * static_cast<double>(step - opt.warmup_steps) /
                         static_cast<double>(std::max<std::size_t>(1, opt.steps - opt.warmup_steps));

    auto& params = model.mutable_params();
    if (opt.optimizer == PretrainOptimizer::Sgd) {
      std::vector<Matrix*> ps, gs;
      params.for_each([&](const std::string&, Matrix& m) { ps.push_back(&m); });
      grad.for_each([&](const std::string&, Matrix& m) { gs.push_back(&m); });
      for (std::size_t i = 0; i < ps.size(); ++i) *ps[i] -= (lr * clip) * *gs[i];
    } else {
      std::vector<Matrix*> ps, gs, a, b;
      params.for_each([&](const std::string&, Matrix& m) { ps.push_back(&m); });
      grad.for_each([&](const std::string&, Matrix& m) { gs.push_back(&m); });
      m1.for_each([&](const std::string&, Matrix& m) { a.push_back(&m); });
      m2.for_each([&](const std::string&, Matrix& m) { b.push_back(&m); });
      const double c1 = 1.0 - std::pow(b1, static_cast<double>(step + 1));
      const double c2 = 1.0 - std::pow(b2, static_cast<double>(step + 1));
      for (std::size_t i = 0; i < ps.size(); ++i) {
        const Matrix g = clip * *gs[i];
        *a[i] = b1 * *a[i] + (1 - b1) * g;
        *b[i] = b2 * *b[i] + (1 - b2) * g.cwiseProduct(g);
        ps[i]->array() -= lr * (a[i]->array() / c1) / ((b[i]->array() / c2).sqrt() + adam_eps);
      }
    }
    if (report) report->step_losses.push_back(loss);
    if (opt.on_log && opt.log_every && (step + 1) % opt.log_every == 0) opt.on_log(step + 1, loss);
    if (opt.on_model) opt.on_model(step + 1, model);
  }
  if (!model.all_finite()) throw Error("pretraining diverged");
  if (report) report->final_loss = corpus_loss(model, probe);
  model.freeze();
  return model;
}

/// Accuracy of full-vocabulary argmax at the second occurrence of a
/// repeated bigram, on fresh random streams.
inline double induction_probe_accuracy(const TinyLM& model, std::span<const TokenId> pool, std::size_t n_streams,
                                       std::size_t len, std::uint64_t seed) {
  Rng rng(derive_seed(seed, "induction-probe"));
  std::size_t hits = 0, total = 0;
  for (std::size_t s = 0; s < n_streams; ++s) {
    std::vector<TokenId> ids(len);
    for (auto& id : ids) id = pool[uniform_index(rng, pool.size())];
    const std::size_t i = uniform_index(rng, len / 2 - 1);
    const std::size_t j = len / 2 + uniform_index(rng, len / 2 - 1);
    ids[j] = ids[i];
    ids[j + 1] = ids[i + 1];
    const RowVector logits = model.logits_at(EmbeddedSequence(model.embed(ids)), j);
    Eigen::Index best;
    logits.maxCoeff(&best);
    hits += static_cast<TokenId>(best) == ids[j + 1];
    ++total;
  }
  return static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace cpt
