#pragma once

// ICL, prompt tuning (PT) and instruction prompt tuning (IPT) on the same
// frozen model. PT and IPT train a block of soft rows placed in front of the
// sequence; ICL has no trainable state.

#include <functional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpt/classify.hpp"
#include "cpt/common.hpp"
#include "cpt/prompt.hpp"
#include "cpt/tinylm.hpp"

namespace cpt {

inline std::size_t icl_predict(const TinyLM& model, const RoleTaggedSequence& context, std::string_view x,
                               const TemplateSet& t, const Vocabulary& v, std::span<const TokenId> label_tokens) {
  const auto q = build_query(context, x, t, v, model.config().max_seq_len);
  return classify(model, EmbeddedSequence(model.embed(q.ids)), label_tokens);
}

enum class SoftPromptInit { Random, FromInstruction };
NLOHMANN_JSON_SERIALIZE_ENUM(SoftPromptInit,
                             {{SoftPromptInit::Random, "random"}, {SoftPromptInit::FromInstruction, "instruction"}})

struct SoftPrompt {
  Matrix rows;
  SoftPromptInit init = SoftPromptInit::Random;
  std::string instruction;

  std::size_t n_tokens() const { return static_cast<std::size_t>(rows.rows()); }

  static constexpr std::string_view kFormat = "soft-prompt-v1";

  nlohmann::json to_json() const {
    std::vector<std::vector<double>> r(n_tokens());
    for (std::size_t i = 0; i < n_tokens(); ++i)
      r[i].assign(rows.row(static_cast<Eigen::Index>(i)).begin(), rows.row(static_cast<Eigen::Index>(i)).end());
    return {{"format", kFormat}, {"init", init}, {"instruction", instruction}, {"rows", r}};
  }
  static SoftPrompt from_json(const nlohmann::json& j) {
    if (j.at("format") != kFormat) throw Error("unsupported soft prompt format");
    SoftPrompt p;
    p.init = j.at("init").get<SoftPromptInit>();
    p.instruction = j.at("instruction").get<std::string>();
    const auto r = j.at("rows").get<std::vector<std::vector<double>>>();
    p.rows.resize(static_cast<Eigen::Index>(r.size()), r.empty() ? 0 : static_cast<Eigen::Index>(r[0].size()));
    for (std::size_t i = 0; i < r.size(); ++i)
      for (std::size_t c = 0; c < r[i].size(); ++c)
        p.rows(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = r[i][c];
    return p;
  }
};

/// Random rows share the token-embedding init scale. FromInstruction copies
/// the embeddings of the first `n_tokens` instruction tokens and pads with
/// random rows.
inline SoftPrompt init_soft_prompt(const TinyLM& model, const Vocabulary& v, std::size_t n_tokens,
                                   SoftPromptInit init, const std::string& instruction, std::uint64_t seed) {
  if (n_tokens < 1) throw Error("soft prompt needs at least one token");
  SoftPrompt p;
  p.init = init;
  p.instruction = instruction;
  const auto d = static_cast<Eigen::Index>(model.dim());
  p.rows.resize(static_cast<Eigen::Index>(n_tokens), d);
  Rng rng(derive_seed(seed, "soft-prompt"));
  const double std = 1.0 / std::sqrt(static_cast<double>(d));
  for (Eigen::Index r = 0; r < p.rows.rows(); ++r)
    for (Eigen::Index c = 0; c < d; ++c) p.rows(r, c) = std * standard_normal(rng);
  if (init == SoftPromptInit::FromInstruction) {
    if (instruction.empty()) throw Error("instruction init needs an instruction");
    RoleTaggedSequence ins;
    detail::push_text(ins, v, instruction, TokenRole::Instruction, 0);
    const std::size_t k = std::min(n_tokens, ins.size());
    p.rows.topRows(static_cast<Eigen::Index>(k)) = model.embed(std::span<const TokenId>(ins.ids).first(k));
  }
  return p;
}

struct SoftPromptConfig {
  double lr = 0.01;
  std::size_t epochs = 25;
  std::size_t n_tokens = 8;
  std::uint64_t seed = 0;
  std::vector<double> lr_grid;  // non-empty: the evaluator picks lr from it on held-out training examples
  friend bool operator==(const SoftPromptConfig&, const SoftPromptConfig&) = default;
};

/// Soft rows followed by embedded token ids.
inline Matrix soft_layout_rows(const TinyLM& model, const SoftPrompt& p, std::span<const TokenId> ids) {
  Matrix rows(static_cast<Eigen::Index>(p.n_tokens() + ids.size()), static_cast<Eigen::Index>(model.dim()));
  rows.topRows(p.rows.rows()) = p.rows;
  rows.bottomRows(static_cast<Eigen::Index>(ids.size())) = model.embed(ids);
  return rows;
}

struct SoftPromptRun {
  SoftPrompt prompt;
  RoleTaggedSequence context;            // empty for PT
  std::vector<double> epoch_train_loss;  // mean training-label CE per epoch
};

struct SoftPromptHooks {
  std::function<void(std::size_t epoch, const SoftPromptRun&)> on_epoch;
};

namespace detail {

/// Shared loop: each layout is the token part after the soft rows; only the
/// trailing sub-example's label is supervised.
inline void train_soft_rows(const TinyLM& model, SoftPromptRun& run, const std::vector<RoleTaggedSequence>& layouts,
                            const SoftPromptConfig& config, const SoftPromptHooks& hooks) {
  if (model.config().max_seq_len < run.prompt.n_tokens())
    throw Error("context overflow");
  Rng rng(derive_seed(config.seed, "soft-prompt-order"));
  const auto n_soft = static_cast<Eigen::Index>(run.prompt.n_tokens());
  std::vector<std::size_t> order(layouts.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    shuffle_in_place(order, rng);
    double total = 0.0;
    for (std::size_t i : order) {
      const auto& layout = layouts[i];
      if (layout.size() + run.prompt.n_tokens() > model.config().max_seq_len) throw Error("context overflow");
      const auto groups = label_positions(layout);
      std::vector<Target> targets;
      for (std::size_t p : groups.back().positions)
        targets.push_back({p - 1 + run.prompt.n_tokens(), layout.ids[p], 1.0});
      EmbeddedSequence seq(soft_layout_rows(model, run.prompt, layout.ids));
      const auto lg = model.loss_and_input_grad(seq, targets);
      if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) throw Error("optimization diverged");
      total += lg.loss / static_cast<double>(targets.size());
      run.prompt.rows -= config.lr * lg.grad.topRows(n_soft);
    }
    run.epoch_train_loss.push_back(total / static_cast<double>(order.size()));
    if (hooks.on_epoch) hooks.on_epoch(e + 1, run);
  }
}

}  // namespace detail

/// PT: [soft rows] + one training example per step, no context.
inline SoftPromptRun train_pt(const TinyLM& model, std::span<const Example> examples, const TemplateSet& t,
                              const Vocabulary& v, SoftPrompt init, const SoftPromptConfig& config,
                              const SoftPromptHooks& hooks = {}) {
  if (examples.empty()) throw Error("PT needs at least one training example");
  SoftPromptRun run;
  run.prompt = std::move(init);
  std::vector<RoleTaggedSequence> layouts;
  for (const auto& e : examples) layouts.push_back(embed_example(e.x, e.y, t, v, 1, false));
  detail::train_soft_rows(model, run, layouts, config, hooks);
  return run;
}

/// IPT: [soft rows] + frozen context + training sub-example i.
inline SoftPromptRun train_ipt(const TinyLM& model, std::span<const Example> examples, const TemplateSet& t,
                               const Vocabulary& v, SoftPrompt init, const SoftPromptConfig& config,
                               const SoftPromptHooks& hooks = {}) {
  if (examples.empty()) throw Error("IPT needs at least one training example");
  SoftPromptRun run;
  run.prompt = std::move(init);
  run.context = build_context(examples, t, v, model.config().max_seq_len);
  std::vector<RoleTaggedSequence> layouts;
  for (std::size_t i = 1; i <= examples.size(); ++i)
    layouts.push_back(build_train_example(run.context, i, examples, t, v));
  detail::train_soft_rows(model, run, layouts, config, hooks);
  return run;
}

/// Conditioning for a test input: soft rows + context (if any) + query.
inline EmbeddedSequence soft_query(const TinyLM& model, const SoftPromptRun& run, std::string_view x,
                                   const TemplateSet& t, const Vocabulary& v) {
  const auto q = build_query(run.context, x, t, v);
  if (q.size() + run.prompt.n_tokens() > model.config().max_seq_len) throw Error("context overflow");
  return EmbeddedSequence(soft_layout_rows(model, run.prompt, q.ids));
}

inline std::size_t soft_predict(const TinyLM& model, const SoftPromptRun& run, std::string_view x,
                                const TemplateSet& t, const Vocabulary& v, std::span<const TokenId> label_tokens) {
  return classify(model, soft_query(model, run, x, t, v), label_tokens);
}

/// Prefix tuning and LoRA change model internals; they are not provided.
[[noreturn]] inline void train_prefix_tuning() { throw Error("not implemented: out of scope"); }
[[noreturn]] inline void train_lora() { throw Error("not implemented: out of scope"); }

}  // namespace cpt
