#pragma once

// Context-aware prompt tuning: gradient descent on per-token deltas of the
// context embeddings, supervised by the training label plus (optionally) the
// context labels, with label tokens frozen and each delta projected back onto
// an l2 ball after every step.

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpt/classify.hpp"
#include "cpt/common.hpp"
#include "cpt/prompt.hpp"
#include "cpt/tinylm.hpp"

namespace cpt {

enum class LossScope { TrainOnly, TrainPlusOneRandom, TrainPlusAllContext };
enum class Weighting { Decay, Mean, Equal };
enum class ProjectionType { TokenWise, AllTokens };
enum class UpdatedTokens { InputOnly, FormatOnly, InputAndFormat };

NLOHMANN_JSON_SERIALIZE_ENUM(LossScope, {{LossScope::TrainOnly, "train_only"},
                                         {LossScope::TrainPlusOneRandom, "train_plus_one_random"},
                                         {LossScope::TrainPlusAllContext, "train_plus_all_context"}})
NLOHMANN_JSON_SERIALIZE_ENUM(Weighting, {{Weighting::Decay, "decay"}, {Weighting::Mean, "mean"}, {Weighting::Equal, "equal"}})
NLOHMANN_JSON_SERIALIZE_ENUM(ProjectionType,
                             {{ProjectionType::TokenWise, "token_wise"}, {ProjectionType::AllTokens, "all_tokens"}})
NLOHMANN_JSON_SERIALIZE_ENUM(UpdatedTokens, {{UpdatedTokens::InputOnly, "input"},
                                             {UpdatedTokens::FormatOnly, "format"},
                                             {UpdatedTokens::InputAndFormat, "input_and_format"}})

struct LossSpec {
  LossScope scope = LossScope::TrainPlusAllContext;
  Weighting weighting = Weighting::Decay;
  double gamma = 0.95;            // Decay factor, in (0, 1]
  double train_multiplier = 1.0;  // Equal(c)

  void validate() const {
    if (!(gamma > 0.0 && gamma <= 1.0)) throw Error("loss gamma must be in (0, 1]");
    if (!(train_multiplier > 0.0)) throw Error("loss train_multiplier must be positive");
  }
  friend bool operator==(const LossSpec&, const LossSpec&) = default;
};

struct CPTConfig {
  double lr = 0.1;
  std::size_t epochs = 25;
  LossSpec loss;
  ProjectionType projection = ProjectionType::TokenWise;
  double input_eps = 0.1;
  double format_eps = 0.1;
  UpdatedTokens updated_tokens = UpdatedTokens::InputAndFormat;
  bool mask_training_example = false;
  std::uint64_t seed = 0;

  void validate() const {
    loss.validate();
    if (!(input_eps >= 0.0) || !(format_eps >= 0.0)) throw Error("cpt eps radii must be non-negative");
    if (!(lr >= 0.0)) throw Error("cpt lr must be non-negative");
  }
  friend bool operator==(const CPTConfig&, const CPTConfig&) = default;
};

struct LossWeights {
  std::vector<double> context;  // omega_1 .. omega_N
  double train = 1.0;
};

/// Decay(g): omega_k = g^(N+1-k); Mean: all ones; Equal(c): 1/N each and the
/// training label weighted by c.
inline LossWeights compute_weights(std::size_t n, const LossSpec& spec) {
  if (n == 0) throw Error("compute_weights needs at least one context example");
  spec.validate();
  LossWeights w;
  w.context.resize(n);
  for (std::size_t k = 1; k <= n; ++k) {
    switch (spec.weighting) {
      case Weighting::Decay: w.context[k - 1] = std::pow(spec.gamma, static_cast<double>(n + 1 - k)); break;
      case Weighting::Mean: w.context[k - 1] = 1.0; break;
      case Weighting::Equal: w.context[k - 1] = 1.0 / static_cast<double>(n); break;
    }
  }
  w.train = spec.weighting == Weighting::Equal ? spec.train_multiplier : 1.0;
  return w;
}

/// Supervision for an X_Train layout. Positions are logit positions (one
/// before each label token). TrainPlusOneRandom draws its context group from
/// `rng` on every call.
inline std::vector<Target> build_targets(const RoleTaggedSequence& layout, const LossSpec& spec, Rng& rng) {
  const auto groups = label_positions(layout);
  if (groups.size() < 2) throw Error("layout needs context labels and a training label");
  const std::size_t n = groups.size() - 1;
  const auto w = compute_weights(n, spec);
  std::vector<Target> targets;
  auto add = [&](const LabelGroup& g, double weight) {
    for (std::size_t p : g.positions) targets.push_back({p - 1, layout.ids[p], weight});
  };
  switch (spec.scope) {
    case LossScope::TrainOnly: break;
    case LossScope::TrainPlusOneRandom: {
      const std::size_t k = uniform_index(rng, n);
      add(groups[k], w.context[k]);
      break;
    }
    case LossScope::TrainPlusAllContext:
      for (std::size_t k = 0; k < n; ++k) add(groups[k], w.context[k]);
      break;
  }
  add(groups.back(), w.train);
  return targets;
}

/// Per-role l2 radii.
struct RoleEps {
  double input = 0.1;
  double format = 0.1;
  double for_role(TokenRole r) const {
    if (r == TokenRole::Input) return input;
    if (is_format_role(r)) return format;
    return 0.0;
  }
};

struct ContextState {
  Matrix base;   // original token embeddings of the context
  Matrix delta;  // learned offsets, zero where not updatable
  std::vector<TokenRole> roles;
  std::vector<std::uint8_t> update_mask;
  RoleEps eps;

  std::size_t size() const { return roles.size(); }
  Matrix effective() const { return base + delta; }

  static ContextState make(const TinyLM& model, const RoleTaggedSequence& context, UpdatedTokens updated,
                           RoleEps eps) {
    ContextState s;
    s.base = model.embed(context.ids);
    s.delta = Matrix::Zero(s.base.rows(), s.base.cols());
    s.roles = context.roles;
    s.eps = eps;
    s.update_mask.resize(context.size());
    for (std::size_t p = 0; p < context.size(); ++p) {
      const TokenRole r = context.roles[p];
      const bool input_ok = updated != UpdatedTokens::FormatOnly && r == TokenRole::Input;
      const bool format_ok = updated != UpdatedTokens::InputOnly && is_format_role(r);
      s.update_mask[p] = (input_ok || format_ok) ? 1 : 0;
    }
    return s;
  }

  static constexpr std::string_view kFormat = "cpt-context-state-v1";

  nlohmann::json to_json() const {
    auto rows = [](const Matrix& m) {
      std::vector<std::vector<double>> out(static_cast<std::size_t>(m.rows()));
      for (Eigen::Index r = 0; r < m.rows(); ++r) out[static_cast<std::size_t>(r)].assign(m.row(r).begin(), m.row(r).end());
      return out;
    };
    std::vector<std::string> role_names;
    for (auto r : roles) role_names.emplace_back(role_name(r));
    return {{"format", kFormat},
            {"base", rows(base)},
            {"delta", rows(delta)},
            {"roles", role_names},
            {"update_mask", update_mask},
            {"eps", {{"input", eps.input}, {"format", eps.format}}}};
  }

  static ContextState from_json(const nlohmann::json& j) {
    if (j.at("format") != kFormat) throw Error("unsupported context state format");
    auto mat = [](const nlohmann::json& a) {
      const auto rows = a.get<std::vector<std::vector<double>>>();
      Matrix m(static_cast<Eigen::Index>(rows.size()), rows.empty() ? 0 : static_cast<Eigen::Index>(rows[0].size()));
      for (std::size_t r = 0; r < rows.size(); ++r)
        for (std::size_t c = 0; c < rows[r].size(); ++c)
          m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = rows[r][c];
      return m;
    };
    ContextState s;
    s.base = mat(j.at("base"));
    s.delta = mat(j.at("delta"));
    for (const auto& n : j.at("roles").get<std::vector<std::string>>()) {
      bool found = false;
      for (int r = 0; r <= static_cast<int>(TokenRole::LearnableSlot); ++r)
        if (n == role_name(static_cast<TokenRole>(r))) s.roles.push_back(static_cast<TokenRole>(r)), found = true;
      if (!found) throw Error("unknown role in context state: " + n);
    }
    s.update_mask = j.at("update_mask").get<std::vector<std::uint8_t>>();
    s.eps.input = j.at("eps").at("input").get<double>();
    s.eps.format = j.at("eps").at("format").get<double>();
    return s;
  }
};

/// delta_p <- delta_p * min(1, eps_p / |delta_p|) for every updatable p.
inline void project_token_wise(ContextState& s) {
  for (std::size_t p = 0; p < s.size(); ++p) {
    if (!s.update_mask[p]) continue;
    auto row = s.delta.row(static_cast<Eigen::Index>(p));
    const double eps = s.eps.for_role(s.roles[p]);
    if (eps == 0.0) {
      row.setZero();
      continue;
    }
    const double norm = row.norm();
    if (norm > eps) row *= eps / norm;
  }
}

/// Scales the stacked updatable deltas so their Frobenius norm is <= eps.
inline void project_all_tokens(ContextState& s, double eps) {
  double sq = 0.0;
  for (std::size_t p = 0; p < s.size(); ++p)
    if (s.update_mask[p]) sq += s.delta.row(static_cast<Eigen::Index>(p)).squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm <= eps) return;
  const double scale = eps == 0.0 ? 0.0 : eps / norm;
  for (std::size_t p = 0; p < s.size(); ++p)
    if (s.update_mask[p]) {
      if (scale == 0.0) s.delta.row(static_cast<Eigen::Index>(p)).setZero();
      else s.delta.row(static_cast<Eigen::Index>(p)) *= scale;
    }
}

/// Positions of the trailing training sub-example (index N+1) may not attend
/// to context sub-example `i`; everything else stays causal.
inline AttentionMask mask_training_copy(const RoleTaggedSequence& layout, std::size_t i) {
  AttentionMask mask(layout.size());
  const int trailing = layout.max_sub_example();
  for (std::size_t q = 0; q < layout.size(); ++q) {
    if (layout.sub_example[q] != trailing) continue;
    for (std::size_t k = 0; k < q; ++k)
      if (layout.sub_example[k] == static_cast<int>(i)) mask.block(q, k);
  }
  return mask;
}

/// Rows for a layout whose first `state.size()` positions are the context.
inline Matrix layout_rows(const TinyLM& model, const ContextState& state, std::span<const TokenId> layout_ids) {
  if (layout_ids.size() < state.size()) throw Error("layout shorter than context");
  Matrix rows(static_cast<Eigen::Index>(layout_ids.size()), static_cast<Eigen::Index>(model.dim()));
  rows.topRows(static_cast<Eigen::Index>(state.size())) = state.effective();
  rows.bottomRows(static_cast<Eigen::Index>(layout_ids.size() - state.size())) =
      model.embed(layout_ids.subspan(state.size()));
  return rows;
}

struct StepResult {
  double loss = 0.0;        // weighted total before the update
  double mean_loss = 0.0;   // loss / sum of weights
  double train_loss = 0.0;  // unweighted CE of the training label before the update
};

inline void project(ContextState& state, const CPTConfig& config) {
  if (config.projection == ProjectionType::TokenWise) project_token_wise(state);
  else project_all_tokens(state, config.input_eps);
}

/// One optimization step on X_Train_i (1-based `i`).
inline StepResult cpt_step(const TinyLM& model, ContextState& state, const RoleTaggedSequence& layout, std::size_t i,
                           const CPTConfig& config, Rng& rng) {
  EmbeddedSequence seq(layout_rows(model, state, layout.ids));
  if (config.mask_training_example) seq.mask = mask_training_copy(layout, i);
  const auto targets = build_targets(layout, config.loss, rng);
  const auto lg = model.loss_and_input_grad(seq, targets);
  if (!std::isfinite(lg.loss) || !lg.grad.allFinite()) throw Error("optimization diverged");

  StepResult out;
  out.loss = lg.loss;
  double wsum = 0.0;
  for (const auto& t : targets) wsum += t.weight;
  out.mean_loss = wsum > 0.0 ? lg.loss / wsum : 0.0;
  const int trailing = layout.max_sub_example();
  std::size_t n_train = 0;
  for (std::size_t t = 0; t < targets.size(); ++t)
    if (layout.sub_example[targets[t].position + 1] == trailing) out.train_loss += lg.per_target[t], ++n_train;
  if (n_train) out.train_loss /= static_cast<double>(n_train);

  if (config.lr != 0.0) {
    for (std::size_t p = 0; p < state.size(); ++p)
      if (state.update_mask[p])
        state.delta.row(static_cast<Eigen::Index>(p)) -= config.lr * lg.grad.row(static_cast<Eigen::Index>(p));
    project(state, config);
  }
  return out;
}

struct CptRun {
  RoleTaggedSequence context;
  ContextState state;
  std::vector<double> epoch_loss;        // mean of StepResult::mean_loss per epoch
  std::vector<double> epoch_train_loss;  // mean training-label CE per epoch
};

struct CptHooks {
  std::function<void(const ContextState&, const StepResult&)> on_step;
  std::function<void(std::size_t epoch, const CptRun&)> on_epoch;
};

inline CptRun train_cpt(const TinyLM& model, std::span<const Example> examples, const TemplateSet& t,
                        const Vocabulary& v, const CPTConfig& config, const CptHooks& hooks = {}) {
  config.validate();
  if (examples.empty()) throw Error("CPT needs at least one training example");
  CptRun run;
  run.context = build_context(examples, t, v, model.config().max_seq_len);
  run.state = ContextState::make(model, run.context, config.updated_tokens, {config.input_eps, config.format_eps});
  std::vector<RoleTaggedSequence> layouts;
  for (std::size_t i = 1; i <= examples.size(); ++i)
    layouts.push_back(build_train_example(run.context, i, examples, t, v, model.config().max_seq_len));

  Rng rng(derive_seed(config.seed, "cpt"));
  std::vector<std::size_t> order(examples.size());
  for (std::size_t e = 0; e < config.epochs; ++e) {
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i + 1;
    shuffle_in_place(order, rng);
    double loss = 0.0, train = 0.0;
    for (std::size_t i : order) {
      const auto r = cpt_step(model, run.state, layouts[i - 1], i, config, rng);
      loss += r.mean_loss;
      train += r.train_loss;
      if (hooks.on_step) hooks.on_step(run.state, r);
    }
    run.epoch_loss.push_back(loss / static_cast<double>(order.size()));
    run.epoch_train_loss.push_back(train / static_cast<double>(order.size()));
    if (hooks.on_epoch) hooks.on_epoch(e + 1, run);
  }
  return run;
}

/// Conditioning sequence for a test input: optimized context + query.
inline EmbeddedSequence cpt_query(const TinyLM& model, const ContextState& state, const RoleTaggedSequence& context,
                                  std::string_view x, const TemplateSet& t, const Vocabulary& v) {
  const auto q = build_query(context, x, t, v, model.config().max_seq_len);
  return EmbeddedSequence(layout_rows(model, state, q.ids));
}

inline std::size_t cpt_predict(const TinyLM& model, const ContextState& state, const RoleTaggedSequence& context,
                               std::string_view x, const TemplateSet& t, const Vocabulary& v,
                               std::span<const TokenId> label_tokens) {
  return classify(model, cpt_query(model, state, context, x, t, v), label_tokens);
}

/// epoch,loss,train_loss
inline std::string epoch_trace_csv(const CptRun& run) {
  std::string out = "epoch,loss,train_loss\n";
  char buf[128];
  for (std::size_t e = 0; e < run.epoch_loss.size(); ++e) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", e + 1, run.epoch_loss[e], run.epoch_train_loss[e]);
    out += buf;
  }
  return out;
}

}  // namespace cpt
