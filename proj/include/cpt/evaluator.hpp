#pragma once

// Evaluation protocol: (method, shots, template, seed) grid, accuracy on a
// class-scaled test set, per-epoch loss traces, and aggregation with the
// overall / template / seed standard deviations.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <thread>

#include "cpt/baselines.hpp"
#include "cpt/cpt_optimizer.hpp"
#include "cpt/pretrain.hpp"
#include "cpt/setclass_data.hpp"

namespace cpt {

inline std::size_t test_set_size(std::size_t n_classes) {
  if (n_classes < 2) throw Error("test_set_size needs at least 2 classes");
  return 50 * n_classes;
}

enum class MethodKind { ICL, PT, IPT, CPT };

struct Method {
  MethodKind kind = MethodKind::ICL;
  bool instruction = false;  // instruction-prefixed (ICL, CPT) or instruction-initialized (PT, IPT)

  std::string name() const {
    static const char* names[] = {"ICL", "PT", "IPT", "CPT"};
    return std::string(names[static_cast<int>(kind)]) + (instruction ? "-inst" : "");
  }
  bool trainable() const { return kind != MethodKind::ICL; }
  friend auto operator<=>(const Method&, const Method&) = default;
};

inline Method parse_method(std::string_view s) {
  Method m;
  if (s.ends_with("-inst")) {
    m.instruction = true;
    s.remove_suffix(5);
  }
  if (s == "ICL") m.kind = MethodKind::ICL;
  else if (s == "PT") m.kind = MethodKind::PT;
  else if (s == "IPT") m.kind = MethodKind::IPT;
  else if (s == "CPT") m.kind = MethodKind::CPT;
  else throw Error("unknown method: " + std::string(s));
  return m;
}

struct ExperimentGrid {
  std::vector<Method> methods{{MethodKind::ICL}, {MethodKind::PT}, {MethodKind::IPT}, {MethodKind::CPT}};
  std::vector<std::size_t> shots{2, 4, 6};
  std::size_t n_templates = 10;
  std::size_t n_seeds = 3;
  std::uint64_t root_seed = 0;

  void validate() const {
    if (methods.empty()) throw Error("grid.methods must be non-empty");
    if (shots.empty()) throw Error("grid.shots must be non-empty");
    for (auto s : shots)
      if (s < 1) throw Error("grid.shots entries must be at least 1");
    if (n_templates < 1) throw Error("grid.n_templates must be at least 1");
    if (n_seeds < 1) throw Error("grid.n_seeds must be at least 1");
  }
  std::size_t cell_count() const { return methods.size() * shots.size() * n_templates * n_seeds; }
};

struct MethodSettings {
  CPTConfig cpt;
  SoftPromptConfig pt;
  SoftPromptConfig ipt;
  std::size_t loss_trace_examples = 50;  // test examples per epoch for the test-loss trace; 0 disables
  bool check_invariants = false;         // verify ball containment and label freeze after every CPT step
};

/// Throws if any delta leaves its ball or any frozen position moved.
inline void check_projection_invariants(const ContextState& s, const CPTConfig& c) {
  constexpr double tol = 1e-9;
  double sq = 0.0;
  for (std::size_t p = 0; p < s.size(); ++p) {
    const auto row = s.delta.row(static_cast<Eigen::Index>(p));
    if (!s.update_mask[p]) {
      if (!(row.array() == 0.0).all()) throw Error("projection invariant violated: frozen position moved");
      continue;
    }
    const double n = row.norm();
    sq += n * n;
    if (c.projection == ProjectionType::TokenWise && n > s.eps.for_role(s.roles[p]) + tol)
      throw Error("projection invariant violated: token-wise radius exceeded");
  }
  if (c.projection == ProjectionType::AllTokens && std::sqrt(sq) > c.input_eps + tol)
    throw Error("projection invariant violated: all-tokens radius exceeded");
}

struct RunRecord {
  Method method;
  std::size_t shots = 0;
  std::size_t template_id = 0;
  std::size_t seed = 0;
  double accuracy = 0.0;
  std::size_t n_correct = 0;
  std::size_t n_test = 0;
  double lr = 0.0;  // learning rate used; 0 for ICL
  std::vector<double> train_loss_trace;
  std::vector<double> test_loss_trace;
  double wall_time = 0.0;
  std::string error;  // non-empty: the cell failed

  bool ok() const { return error.empty(); }
};

/// The first `n` templates of a seeded shuffle of `pool`.
inline std::vector<TemplateSet> select_templates(std::span<const TemplateSet> pool, std::size_t n,
                                                 std::uint64_t seed) {
  if (n > pool.size()) throw Error("n_templates exceeds the template pool");
  std::vector<TemplateSet> p(pool.begin(), pool.end());
  Rng rng(derive_seed(seed, "template-selection"));
  shuffle_in_place(p, rng);
  p.resize(n);
  return p;
}

/// Class-balanced draw from `pool`: classes in a seeded order, round robin,
/// one unused example per visit; the result is shuffled.
inline std::vector<Example> sample_shots(std::span<const Example> pool, std::size_t shots, std::uint64_t seed) {
  if (shots > pool.size()) throw Error("shots exceeds the training pool");
  Rng rng(derive_seed(seed, "shots"));
  std::map<std::string, std::vector<Example>> by_label;
  for (const auto& e : pool) by_label[e.y].push_back(e);
  std::vector<std::vector<Example>> classes;
  for (auto& [label, ex] : by_label) {
    shuffle_in_place(ex, rng);
    classes.push_back(std::move(ex));
  }
  shuffle_in_place(classes, rng);
  std::vector<Example> out;
  std::vector<std::size_t> next(classes.size(), 0);
  while (out.size() < shots)
    for (std::size_t c = 0; c < classes.size() && out.size() < shots; ++c)
      if (next[c] < classes[c].size()) out.push_back(classes[c][next[c]++]);
  shuffle_in_place(out, rng);
  return out;
}

struct EvalContext {
  const TinyLM& model;
  const Vocabulary& vocab;
  const LabeledDataset& dataset;
  std::vector<TemplateSet> templates;
  MethodSettings settings;
  std::uint64_t root_seed = 0;
};

namespace detail {

inline TemplateSet method_template(const Method& m, const TemplateSet& base, const LabeledDataset& ds) {
  TemplateSet t = base;
  t.instruction = (m.instruction && (m.kind == MethodKind::ICL || m.kind == MethodKind::CPT)) ? instruction_for(ds) : "";
  return t;
}

}  // namespace detail

/// Trains `method` on `shots` examples drawn with `seed` and evaluates it on
/// the test set with template `template_id`. Throws on failure.
inline RunRecord run_cell(const EvalContext& ctx, const Method& method, std::size_t shots, std::size_t template_id,
                          std::size_t seed) {
  const auto start = std::chrono::steady_clock::now();
  RunRecord rec;
  rec.method = method;
  rec.shots = shots;
  rec.template_id = template_id;
  rec.seed = seed;

  const std::uint64_t run_seed = derive_seed(ctx.root_seed, "run-seed", seed);
  const auto examples = sample_shots(ctx.dataset.train, shots, run_seed);
  const TemplateSet t = detail::method_template(method, ctx.templates.at(template_id), ctx.dataset);
  const auto labels = label_first_tokens(ctx.vocab, ctx.dataset.labels);
  const auto& test = ctx.dataset.test;
  const std::size_t n_trace = std::min(ctx.settings.loss_trace_examples, test.size());
  const std::uint64_t opt_seed = derive_seed(run_seed, "optimizer", static_cast<std::uint64_t>(method.kind));

  auto label_token = [&](const Example& e) { return labels[ctx.dataset.class_of(e.y)]; };
  auto mean_test_loss = [&](auto&& conditioning) {
    double s = 0.0;
    for (std::size_t j = 0; j < n_trace; ++j) s += query_loss(ctx.model, conditioning(test[j].x), label_token(test[j]));
    return s / static_cast<double>(n_trace);
  };
  std::function<std::size_t(const std::string&)> predict;

  std::optional<CptRun> cpt_run;
  std::optional<SoftPromptRun> soft_run;
  RoleTaggedSequence icl_context;

  switch (method.kind) {
    case MethodKind::ICL: {
      icl_context = build_context(examples, t, ctx.vocab, ctx.model.config().max_seq_len);
      predict = [&](const std::string& x) { return icl_predict(ctx.model, icl_context, x, t, ctx.vocab, labels); };
      break;
    }
    case MethodKind::CPT: {
      CPTConfig cfg = ctx.settings.cpt;
      cfg.seed = opt_seed;
      CptHooks hooks;
      if (ctx.settings.check_invariants)
        hooks.on_step = [&](const ContextState& s, const StepResult&) { check_projection_invariants(s, cfg); };
      if (n_trace)
        hooks.on_epoch = [&](std::size_t, const CptRun& r) {
          rec.test_loss_trace.push_back(mean_test_loss(
              [&](const std::string& x) { return cpt_query(ctx.model, r.state, r.context, x, t, ctx.vocab); }));
        };
      cpt_run = train_cpt(ctx.model, examples, t, ctx.vocab, cfg, hooks);
      rec.train_loss_trace = cpt_run->epoch_loss;
      rec.lr = cfg.lr;
      predict = [&](const std::string& x) {
        return cpt_predict(ctx.model, cpt_run->state, cpt_run->context, x, t, ctx.vocab, labels);
      };
      break;
    }
    case MethodKind::PT:
    case MethodKind::IPT: {
      SoftPromptConfig cfg = method.kind == MethodKind::PT ? ctx.settings.pt : ctx.settings.ipt;
      cfg.seed = opt_seed;
      const std::string instruction = method.instruction ? instruction_for(ctx.dataset) : "";
      auto init = init_soft_prompt(ctx.model, ctx.vocab, cfg.n_tokens,
                                   method.instruction ? SoftPromptInit::FromInstruction : SoftPromptInit::Random,
                                   instruction, opt_seed);
      auto train = [&](const SoftPromptConfig& c, const SoftPromptHooks& h) {
        return method.kind == MethodKind::PT ? train_pt(ctx.model, examples, t, ctx.vocab, init, c, h)
                                             : train_ipt(ctx.model, examples, t, ctx.vocab, init, c, h);
      };
      // lr selection on the training examples that were not drawn as shots
      std::vector<Example> held_out;
      for (const auto& e : ctx.dataset.train)
        if (std::find(examples.begin(), examples.end(), e) == examples.end()) held_out.push_back(e);
      if (!cfg.lr_grid.empty() && !held_out.empty()) {
        double best = std::numeric_limits<double>::infinity();
        for (double lr : cfg.lr_grid) {
          SoftPromptConfig c = cfg;
          c.lr = lr;
          double loss;
          try {
            const auto r = train(c, {});
            loss = 0.0;
            for (const auto& e : held_out)
              loss += query_loss(ctx.model, soft_query(ctx.model, r, e.x, t, ctx.vocab), label_token(e));
          } catch (const Error&) {
            continue;  // a diverging lr is simply not selected
          }
          if (loss < best) best = loss, cfg.lr = lr;
        }
      }
      rec.lr = cfg.lr;
      SoftPromptHooks hooks;
      if (n_trace)
        hooks.on_epoch = [&](std::size_t, const SoftPromptRun& r) {
          rec.test_loss_trace.push_back(
              mean_test_loss([&](const std::string& x) { return soft_query(ctx.model, r, x, t, ctx.vocab); }));
        };
      soft_run = train(cfg, hooks);
      rec.train_loss_trace = soft_run->epoch_train_loss;
      predict = [&](const std::string& x) { return soft_predict(ctx.model, *soft_run, x, t, ctx.vocab, labels); };
      break;
    }
  }

  for (const auto& e : test)
    if (predict(e.x) == ctx.dataset.class_of(e.y)) ++rec.n_correct;
  rec.n_test = test.size();
  rec.accuracy = test.empty() ? 0.0 : static_cast<double>(rec.n_correct) / static_cast<double>(rec.n_test);
  rec.wall_time = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return rec;
}

/// Every (method, shots, template, seed) cell, in that nesting order. Cells
/// run on up to `workers` threads; a failing cell yields a record with its
/// error message.
inline std::vector<RunRecord> run_grid(const EvalContext& ctx, const ExperimentGrid& grid, std::size_t workers = 1,
                                       const std::function<void(const RunRecord&)>& on_record = {}) {
  grid.validate();
  if (ctx.templates.size() < grid.n_templates) throw Error("fewer templates than grid.n_templates");
  struct Cell {
    Method m;
    std::size_t shots, t, s;
  };
  std::vector<Cell> cells;
  for (const auto& m : grid.methods)
    for (auto shots : grid.shots)
      for (std::size_t t = 0; t < grid.n_templates; ++t)
        for (std::size_t s = 0; s < grid.n_seeds; ++s) cells.push_back({m, shots, t, s});

  std::vector<RunRecord> out(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      const auto& c = cells[i];
      RunRecord r;
      try {
        r = run_cell(ctx, c.m, c.shots, c.t, c.s);
      } catch (const std::exception& e) {
        r = RunRecord{};
        r.method = c.m;
        r.shots = c.shots;
        r.template_id = c.t;
        r.seed = c.s;
        r.error = e.what();
      }
      out[i] = std::move(r);
      if (on_record) {
        std::lock_guard lock(mu);
        on_record(out[i]);
      }
    }
  };
  workers = std::max<std::size_t>(1, std::min(workers, cells.size()));
  if (workers == 1) {
    work();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
    for (auto& th : pool) th.join();
  }
  return out;
}

struct StdBreakdown {
  double overall = 0.0;   // over all template x seed runs
  double templates = 0.0; // mean over seeds of the std across templates
  double seeds = 0.0;     // mean over templates of the std across seeds
};

/// Sample standard deviation (n - 1); zero for fewer than two values.
inline double sample_std(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

/// `acc[t][s]` is the accuracy for template t and seed s.
inline StdBreakdown std_breakdown(const std::vector<std::vector<double>>& acc) {
  if (acc.empty() || acc[0].empty()) throw Error("empty accuracy matrix");
  const std::size_t nt = acc.size(), ns = acc[0].size();
  for (const auto& row : acc)
    if (row.size() != ns) throw Error("ragged accuracy matrix");
  StdBreakdown b;
  std::vector<double> all;
  for (const auto& row : acc) all.insert(all.end(), row.begin(), row.end());
  b.overall = sample_std(all);
  for (std::size_t s = 0; s < ns; ++s) {
    std::vector<double> col(nt);
    for (std::size_t t = 0; t < nt; ++t) col[t] = acc[t][s];
    b.templates += sample_std(col);
  }
  b.templates /= static_cast<double>(ns);
  for (const auto& row : acc) b.seeds += sample_std(row);
  b.seeds /= static_cast<double>(nt);
  return b;
}

struct CellSummary {
  Method method;
  std::size_t shots = 0;
  double mean = 0.0;
  StdBreakdown std;
  std::size_t runs = 0;
};

/// Mean accuracy and std breakdown per (method, shots). Every
/// (template, seed) pair of the grid must be present and successful.
inline std::vector<CellSummary> aggregate(std::span<const RunRecord> records, const ExperimentGrid& grid) {
  std::vector<CellSummary> out;
  for (const auto& m : grid.methods)
    for (auto shots : grid.shots) {
      std::vector<std::vector<std::optional<double>>> acc(grid.n_templates,
                                                          std::vector<std::optional<double>>(grid.n_seeds));
      for (const auto& r : records)
        if (r.ok() && r.method == m && r.shots == shots && r.template_id < grid.n_templates && r.seed < grid.n_seeds)
          acc[r.template_id][r.seed] = r.accuracy;
      std::string missing;
      for (std::size_t t = 0; t < grid.n_templates; ++t)
        for (std::size_t s = 0; s < grid.n_seeds; ++s)
          if (!acc[t][s]) missing += " (" + std::to_string(t) + ", " + std::to_string(s) + ")";
      if (!missing.empty())
        throw Error("incomplete cell " + m.name() + " shots=" + std::to_string(shots) + "; missing (template, seed):" +
                    missing);
      std::vector<std::vector<double>> mat(grid.n_templates, std::vector<double>(grid.n_seeds));
      double sum = 0.0;
      for (std::size_t t = 0; t < grid.n_templates; ++t)
        for (std::size_t s = 0; s < grid.n_seeds; ++s) sum += (mat[t][s] = *acc[t][s]);
      CellSummary c{m, shots, sum / static_cast<double>(grid.n_templates * grid.n_seeds), std_breakdown(mat),
                    grid.n_templates * grid.n_seeds};
      out.push_back(c);
    }
  return out;
}

struct LossGap {
  Method method;
  std::size_t shots = 0;
  bool applicable = false;  // false for methods without traces (ICL)
  double final_train = 0.0;
  double final_test = 0.0;
  double gap = 0.0;
  std::size_t runs = 0;
};

/// Final-epoch train loss, test loss and their gap, averaged per (method, shots).
inline std::vector<LossGap> loss_gap_report(std::span<const RunRecord> records) {
  std::map<std::pair<Method, std::size_t>, LossGap> cells;
  for (const auto& r : records) {
    if (!r.ok()) continue;
    auto& g = cells[{r.method, r.shots}];
    g.method = r.method;
    g.shots = r.shots;
    if (r.train_loss_trace.empty() || r.test_loss_trace.empty()) continue;
    g.applicable = true;
    g.final_train += r.train_loss_trace.back();
    g.final_test += r.test_loss_trace.back();
    ++g.runs;
  }
  std::vector<LossGap> out;
  for (auto& [key, g] : cells) {
    if (g.runs) {
      g.final_train /= static_cast<double>(g.runs);
      g.final_test /= static_cast<double>(g.runs);
      g.gap = g.final_test - g.final_train;
    }
    out.push_back(g);
  }
  return out;
}

// Writers. Numbers use %.17g so files re-read bit-exactly; summaries add
// percentages with two decimals.

namespace detail {
inline std::string num(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", x);
  return buf;
}
inline std::string pct(double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * x);
  return buf;
}
inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string q = "\"";
  for (char c : s) q += (c == '"') ? std::string("\"\"") : std::string(1, c);
  return q + "\"";
}
}  // namespace detail

inline std::string records_csv(std::span<const RunRecord> records, const std::string& config_hash) {
  std::string out = "config_hash,method,shots,template_id,seed,accuracy,n_correct,n_test,lr,error\n";
  for (const auto& r : records)
    out += config_hash + "," + r.method.name() + "," + std::to_string(r.shots) + "," + std::to_string(r.template_id) +
           "," + std::to_string(r.seed) + "," + detail::num(r.accuracy) + "," + std::to_string(r.n_correct) + "," +
           std::to_string(r.n_test) + "," + detail::num(r.lr) + "," + detail::csv_field(r.error) + "\n";
  return out;
}

inline std::string traces_csv(std::span<const RunRecord> records, const std::string& config_hash) {
  std::string out = "config_hash,method,shots,template_id,seed,epoch,train_loss,test_loss\n";
  for (const auto& r : records) {
    const std::size_t n = std::max(r.train_loss_trace.size(), r.test_loss_trace.size());
    for (std::size_t e = 0; e < n; ++e)
      out += config_hash + "," + r.method.name() + "," + std::to_string(r.shots) + "," +
             std::to_string(r.template_id) + "," + std::to_string(r.seed) + "," + std::to_string(e + 1) + "," +
             (e < r.train_loss_trace.size() ? detail::num(r.train_loss_trace[e]) : "") + "," +
             (e < r.test_loss_trace.size() ? detail::num(r.test_loss_trace[e]) : "") + "\n";
  }
  return out;
}

inline std::string timing_csv(std::span<const RunRecord> records, const std::string& config_hash) {
  std::string out = "config_hash,method,shots,template_id,seed,wall_time_s\n";
  for (const auto& r : records)
    out += config_hash + "," + r.method.name() + "," + std::to_string(r.shots) + "," + std::to_string(r.template_id) +
           "," + std::to_string(r.seed) + "," + detail::num(r.wall_time) + "\n";
  return out;
}

inline std::string summary_csv(std::span<const CellSummary> cells, const std::string& config_hash) {
  std::string out = "config_hash,method,shots,runs,mean_acc_pct,std_overall_pct,std_templates_pct,std_seeds_pct\n";
  for (const auto& c : cells)
    out += config_hash + "," + c.method.name() + "," + std::to_string(c.shots) + "," + std::to_string(c.runs) + "," +
           detail::pct(c.mean) + "," + detail::pct(c.std.overall) + "," + detail::pct(c.std.templates) + "," +
           detail::pct(c.std.seeds) + "\n";
  return out;
}

inline std::string loss_gap_csv(std::span<const LossGap> gaps, const std::string& config_hash) {
  std::string out = "config_hash,method,shots,runs,final_train_loss,final_test_loss,gap\n";
  for (const auto& g : gaps) {
    out += config_hash + "," + g.method.name() + "," + std::to_string(g.shots) + "," + std::to_string(g.runs) + ",";
    out += g.applicable ? detail::num(g.final_train) + "," + detail::num(g.final_test) + "," + detail::num(g.gap)
                        : std::string("n/a,n/a,n/a");
    out += "\n";
  }
  return out;
}

inline nlohmann::json summary_json(std::span<const CellSummary> cells, std::span<const LossGap> gaps,
                                   const std::string& config_hash) {
  nlohmann::json j = {{"config_hash", config_hash}, {"cells", nlohmann::json::array()},
                      {"loss_gaps", nlohmann::json::array()}};
  for (const auto& c : cells)
    j["cells"].push_back({{"method", c.method.name()},
                          {"shots", c.shots},
                          {"runs", c.runs},
                          {"mean_accuracy", c.mean},
                          {"std", {{"overall", c.std.overall}, {"templates", c.std.templates}, {"seeds", c.std.seeds}}}});
  for (const auto& g : gaps) {
    nlohmann::json e = {{"method", g.method.name()}, {"shots", g.shots}, {"applicable", g.applicable}};
    if (g.applicable) {
      e["runs"] = g.runs;
      e["final_train_loss"] = g.final_train;
      e["final_test_loss"] = g.final_test;
      e["gap"] = g.gap;
    }
    j["loss_gaps"].push_back(e);
  }
  return j;
}

}  // namespace cpt
