// Acceptance suite: one [PASS]/[FAIL] line per criterion. Expects the
// acceptance config to be pretrained and its data generated (see
// tests/CMakeLists.txt), and the cpt_lab binary for the CLI-level checks.

#include <chrono>
#include <cstdlib>
#include <functional>
#include <iostream>

#include <CLI11.hpp>

#include "cpt/pipeline.hpp"

namespace fs = std::filesystem;
using namespace cpt;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double x) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, x);
  return buf;
}

TinyLM perturbed_model(std::size_t vocab, std::size_t dim, std::size_t layers, std::uint64_t seed) {
  TinyLMConfig c;
  c.vocab_size = vocab;
  c.model_dim = dim;
  c.n_layers = layers;
  c.n_heads = 4;
  c.ff_dim = 4 * dim;
  c.max_seq_len = 64;
  c.seed = seed;
  TinyLM m(c);
  Rng rng(derive_seed(seed, "perturb"));
  m.mutable_params().for_each([&](const std::string&, Matrix& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += 0.2 * standard_normal(rng);
  });
  m.freeze();
  return m;
}

/// Directional check on `n_dirs` random unit directions over `rows`:
/// max |fd - g.u| / max(|fd|, |g.u|, 1e-10).
double directional_fd_error(const TinyLM& m, const EmbeddedSequence& seq, std::span<const Target> targets,
                            const std::vector<std::size_t>& rows, std::size_t n_dirs, Rng& rng, double h = 1e-4) {
  const Matrix g = m.loss_and_input_grad(seq, targets).grad;
  double worst = 0.0;
  for (std::size_t d = 0; d < n_dirs; ++d) {
    Matrix u = Matrix::Zero(g.rows(), g.cols());
    for (std::size_t r : rows)
      for (Eigen::Index c = 0; c < u.cols(); ++c) u(long(r), c) = standard_normal(rng);
    u /= u.norm();
    EmbeddedSequence up = seq, down = seq;
    up.rows += h * u;
    down.rows -= h * u;
    const double fd = (m.loss(up, targets) - m.loss(down, targets)) / (2 * h);
    const double an = g.cwiseProduct(u).sum();
    worst = std::max(worst, std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-10}));
  }
  return worst;
}

double coordinate_fd_error(const TinyLM& m, const EmbeddedSequence& seq, std::span<const Target> targets,
                           double h = 1e-4) {
  const Matrix g = m.loss_and_input_grad(seq, targets).grad;
  Matrix fd(g.rows(), g.cols());
  EmbeddedSequence probe = seq;
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    const double x = probe.rows.data()[i];
    probe.rows.data()[i] = x + h;
    const double up = m.loss(probe, targets);
    probe.rows.data()[i] = x - h;
    const double down = m.loss(probe, targets);
    probe.rows.data()[i] = x;
    fd.data()[i] = (up - down) / (2 * h);
  }
  return (g - fd).norm() / std::max({g.norm(), fd.norm(), 1e-10});
}

double oracle_ce(const Matrix& logits, std::size_t pos, TokenId tok) {
  const auto row = logits.row(long(pos));
  const double mx = row.maxCoeff();
  double s = 0.0;
  for (Eigen::Index j = 0; j < row.size(); ++j) s += std::exp(row(j) - mx);
  return mx + std::log(s) - row(tok);
}

double oracle_std(const std::vector<double>& x) {
  long double mean = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  long double ss = 0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return double(std::sqrt(ss / (x.size() - 1)));
}

const LabeledDataset& dataset(const LoadedArtifacts& a, const std::string& name) {
  for (const auto& d : a.datasets)
    if (d.name == name) return d;
  throw Error("acceptance config has no dataset named " + name);
}

/// Root seeds for the multi-seed trend checks.
constexpr std::size_t kRootSeeds = 5;
std::uint64_t root_seed(std::size_t r) { return derive_seed(0, "acceptance-root", r); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CPT acceptance suite"};
  std::string config_path, out_dir, cli;
  std::vector<int> only;
  app.add_option("--config", config_path, "Acceptance config")->required();
  app.add_option("--out", out_dir, "Output directory holding the pretrained artifacts")->required();
  app.add_option("--cli", cli, "Path to the cpt_lab binary")->required();
  app.add_option("--only", only, "Run only these criteria");
  CLI11_PARSE(app, argc, argv);

  RunConfig cfg = load_config(config_path);
  apply_overrides(cfg, std::nullopt, out_dir, std::nullopt);
  const LoadedArtifacts art = load_artifacts(cfg);
  const TinyLM& model = art.model;
  const Vocabulary& vocab = art.vocab;
  const LabeledDataset& setclass = dataset(art, "setclass");
  const LabeledDataset& sentiment = dataset(art, "sentiment");
  const auto pool = default_template_pool();
  const auto templates = select_templates(pool, 10, derive_seed(cfg.seed, "templates"));
  auto lab = [&](const std::string& sub, const std::string& extra = "") {
    return std::system((cli + " " + sub + " --config " + config_path + " --out " + out_dir + " --quiet" + extra + " > /dev/null").c_str());
  };

  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria;

  criteria.emplace_back("gradient correctness", [&] {
    const auto m = perturbed_model(60, 32, 2, 101);
    Rng rng(1);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t len = 3 + uniform_index(rng, 10);
      Matrix rows(long(len), 32);
      for (Eigen::Index i = 0; i < rows.size(); ++i) rows.data()[i] = 0.5 * standard_normal(rng);
      AttentionMask mask(len);
      if (trial % 2)
        for (int b = 0; b < 3; ++b) {
          const std::size_t q = 1 + uniform_index(rng, len - 1);
          mask.block(q, uniform_index(rng, q));
        }
      std::vector<Target> targets(1 + uniform_index(rng, 4));
      for (auto& t : targets)
        t = {uniform_index(rng, len), TokenId(uniform_index(rng, 60)), 0.05 + 2 * uniform_unit(rng)};
      worst = std::max(worst, coordinate_fd_error(m, EmbeddedSequence(rows, mask), targets));
    }
    return Outcome{worst < 1e-4, "max relative error " + fmt("%.2e", worst) + " over 100 triples (h = 1e-4)"};
  });

  criteria.emplace_back("projection invariants", [&] {
    std::size_t steps = 0, violations = 0;
    double worst_tw = 0.0, worst_all = 0.0;
    for (auto proj : {ProjectionType::TokenWise, ProjectionType::AllTokens})
      for (std::size_t s = 0; s < 3; ++s) {
        CPTConfig c = cfg.settings.cpt;
        c.projection = proj;
        c.lr = 0.5;  // large steps and small radii so the balls are actually hit
        c.input_eps = 0.1;
        c.format_eps = 0.05;
        c.seed = s;
        const auto shots = sample_shots(setclass.train, 4, derive_seed(7, "inv", s));
        CptHooks hooks;
        hooks.on_step = [&](const ContextState& st, const StepResult&) {
          ++steps;
          const Matrix eff = st.effective();
          double sq = 0.0;
          for (std::size_t p = 0; p < st.size(); ++p) {
            const double n = st.delta.row(long(p)).norm();
            sq += n * n;
            if (st.roles[p] == TokenRole::Output && !(eff.row(long(p)) == st.base.row(long(p)))) ++violations;
            if (proj == ProjectionType::TokenWise) {
              worst_tw = std::max(worst_tw, n - st.eps.for_role(st.roles[p]));
              if (n > st.eps.for_role(st.roles[p]) + 1e-9) ++violations;
            }
          }
          if (proj == ProjectionType::AllTokens) {
            worst_all = std::max(worst_all, std::sqrt(sq) - c.input_eps);
            if (std::sqrt(sq) > c.input_eps + 1e-9) ++violations;
          }
        };
        train_cpt(model, shots, templates[s], vocab, c, hooks);
      }
    return Outcome{violations == 0 && steps == 2 * 3 * 25 * 4,
                   std::to_string(steps) + " steps, " + std::to_string(violations) + " violations, max excess " +
                       fmt("%.1e", std::max(worst_tw, worst_all))};
  });

  criteria.emplace_back("ICL degeneracy at zero radius", [&] {
    const auto labels = label_first_tokens(vocab, setclass.labels);
    std::size_t agree = 0, total = 0;
    for (std::size_t s = 0; s < 5; ++s)
      for (std::size_t t = 0; t < 3; ++t) {
        CPTConfig c = cfg.settings.cpt;
        c.input_eps = c.format_eps = 0.0;
        c.seed = s;
        const auto shots = sample_shots(setclass.train, 4, derive_seed(11, "degeneracy", s));
        const auto run = train_cpt(model, shots, templates[t], vocab, c);
        for (const auto& e : setclass.test) {
          agree += cpt_predict(model, run.state, run.context, e.x, templates[t], vocab, labels) ==
                   icl_predict(model, run.context, e.x, templates[t], vocab, labels);
          ++total;
        }
      }
    return Outcome{agree == total, std::to_string(agree) + "/" + std::to_string(total) + " predictions equal"};
  });

  criteria.emplace_back("decay weights", [&] {
    const auto w = compute_weights(4, {LossScope::TrainPlusAllContext, Weighting::Decay, 0.95, 1.0});
    const double g = 0.95;
    const std::vector<double> want{g * g * g * g, g * g * g, g * g, g};
    double err = 0.0;
    for (std::size_t k = 0; k < 4; ++k) err = std::max(err, std::abs(w.context[k] - want[k]));
    bool mean_ok = true;
    for (std::size_t n = 1; n <= 16; ++n) {
      const auto a = compute_weights(n, {LossScope::TrainPlusAllContext, Weighting::Decay, 1.0, 1.0});
      const auto b = compute_weights(n, {LossScope::TrainPlusAllContext, Weighting::Mean, 0.95, 1.0});
      mean_ok = mean_ok && a.context == b.context && a.train == b.train;
    }
    return Outcome{err <= 1e-12 && mean_ok,
                   "max error " + fmt("%.1e", err) + ", gamma = 1 equals Mean: " + (mean_ok ? "yes" : "no")};
  });

  criteria.emplace_back("loss oracle", [&] {
    // three sub-examples assembled token by token: two context examples and
    // the trailing copy of the second one
    const TemplateSet& t = templates[0];
    const auto& ex = setclass.train;
    RoleTaggedSequence seq;
    auto push = [&](const std::string& text, TokenRole role, int k) {
      for (const auto& w : lex(text)) seq.push(vocab.id_of(w), role, k);
    };
    auto push_sep = [&](const std::string& sep, TokenRole role, int k) {
      if (vocab.contains(sep)) seq.push(vocab.id_of(sep), role, k);
      else push(sep, role, k);
    };
    auto [in_pre, in_post] = std::pair{t.input_template.substr(0, t.input_template.find("{}")),
                                       t.input_template.substr(t.input_template.find("{}") + 2)};
    auto out_pre = t.output_template.substr(0, t.output_template.find("{}"));
    auto out_post = t.output_template.substr(t.output_template.find("{}") + 2);
    auto add = [&](const Example& e, int k, bool inter) {
      push(in_pre, TokenRole::InputTemplate, k);
      push(e.x, TokenRole::Input, k);
      push(in_post, TokenRole::InputTemplate, k);
      push_sep(t.intra_sep, TokenRole::IntraSep, k);
      push(out_pre, TokenRole::OutputTemplate, k);
      push(e.y, TokenRole::Output, k);
      push(out_post, TokenRole::OutputTemplate, k);
      if (inter) push_sep(t.inter_sep, TokenRole::InterSep, k);
    };
    add(ex[0], 1, true);
    add(ex[1], 2, true);
    add(ex[1], 3, false);
    if (!(seq == build_train_example(build_context(std::span(ex).first(2), t, vocab), 2, ex, t, vocab)))
      return Outcome{false, "hand-assembled prompt differs from build_train_example"};

    double worst = 0.0;
    for (auto w : {Weighting::Decay, Weighting::Mean, Weighting::Equal}) {
      const LossSpec spec{LossScope::TrainPlusAllContext, w, 0.8, 3.0};
      Rng rng(0);
      const auto targets = build_targets(seq, spec, rng);
      const double module = model.loss(EmbeddedSequence(model.embed(seq.ids)), targets);
      // independent: weights by formula, one CE per label token
      const Matrix logits = model.forward(EmbeddedSequence(model.embed(seq.ids)));
      double oracle = 0.0;
      for (std::size_t p = 0; p < seq.size(); ++p) {
        if (seq.roles[p] != TokenRole::Output) continue;
        const int k = seq.sub_example[p];
        double wk = 1.0;
        if (k == 3) wk = w == Weighting::Equal ? 3.0 : 1.0;
        else if (w == Weighting::Decay) wk = std::pow(0.8, 3 - k);
        else if (w == Weighting::Equal) wk = 0.5;
        oracle += wk * oracle_ce(logits, p - 1, seq.ids[p]);
      }
      worst = std::max(worst, std::abs(module - oracle) / std::abs(oracle));
    }
    return Outcome{worst <= 1e-10, "max relative error " + fmt("%.1e", worst) + " over Decay/Mean/Equal"};
  });

  criteria.emplace_back("evaluation protocol", [&] {
    const bool sizes = test_set_size(2) == 100 && test_set_size(14) == 700;
    Rng rng(3);
    std::vector<std::vector<double>> acc(10, std::vector<double>(3));
    for (auto& row : acc)
      for (auto& a : row) a = uniform_unit(rng);
    const auto b = std_breakdown(acc);
    std::vector<double> all;
    for (const auto& r : acc) all.insert(all.end(), r.begin(), r.end());
    double tmpl = 0, seed = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      std::vector<double> col;
      for (std::size_t t = 0; t < 10; ++t) col.push_back(acc[t][s]);
      tmpl += oracle_std(col) / 3;
    }
    for (const auto& r : acc) seed += oracle_std(r) / 10;
    const double std_err =
        std::max({std::abs(b.overall - oracle_std(all)), std::abs(b.templates - tmpl), std::abs(b.seeds - seed)});

    // full 10 x 3 grid on a small model: the count is what is checked
    const auto small = perturbed_model(vocab.size(), 16, 1, 5);
    ExperimentGrid g;
    g.shots = {2, 4};
    MethodSettings st;
    st.cpt.epochs = st.pt.epochs = st.ipt.epochs = 1;
    st.loss_trace_examples = 0;
    LabeledDataset ds = sentiment;
    ds.test.resize(4);
    const EvalContext ctx{small, vocab, ds, templates, st, 1};
    const auto recs = run_grid(ctx, g, cfg.workers);
    std::size_t ok = 0;
    for (const auto& r : recs) ok += r.ok();
    const std::size_t want = g.methods.size() * g.shots.size() * 10 * 3;
    return Outcome{sizes && std_err <= 1e-12 && recs.size() == want && ok == want,
                   std::string("test sizes ") + (sizes ? "ok" : "wrong") + ", std error " + fmt("%.1e", std_err) +
                       ", " + std::to_string(recs.size()) + "/" + std::to_string(want) + " records (" +
                       std::to_string(ok) + " ok)"};
  });

  criteria.emplace_back("behavioral trend: CPT >= ICL > chance on Set Classification", [&] {
    ExperimentGrid g;
    g.methods = {parse_method("ICL"), parse_method("CPT")};
    g.shots = {4};
    g.n_templates = 2;
    g.n_seeds = 1;
    MethodSettings st = cfg.settings;
    st.loss_trace_examples = 0;
    double icl = 0, cpt = 0;
    std::string per_seed;
    for (std::size_t r = 0; r < kRootSeeds; ++r) {
      const auto tmpl = select_templates(pool, g.n_templates, derive_seed(root_seed(r), "templates"));
      const EvalContext ctx{model, vocab, setclass, tmpl, st, root_seed(r)};
      const auto sum = aggregate(run_grid(ctx, g, cfg.workers), g);
      icl += sum[0].mean / kRootSeeds;
      cpt += sum[1].mean / kRootSeeds;
      per_seed += " " + fmt("%.3f", sum[0].mean) + "/" + fmt("%.3f", sum[1].mean);
    }
    const double chance = 1.0 / double(setclass.labels.size());
    return Outcome{cpt >= icl && icl > chance && cpt > chance,
                   "mean ICL " + fmt("%.3f", icl) + ", CPT " + fmt("%.3f", cpt) + ", chance " + fmt("%.3f", chance) +
                       "; per root seed ICL/CPT:" + per_seed};
  });

  criteria.emplace_back("overfitting trend: CPT train-test gap <= PT gap", [&] {
    ExperimentGrid g;
    g.methods = {parse_method("PT"), parse_method("CPT")};
    g.shots = {4};
    g.n_templates = 2;
    g.n_seeds = 1;
    double gap_pt = 0, gap_cpt = 0, label_gap_cpt = 0;
    std::string per_seed;
    for (std::size_t r = 0; r < kRootSeeds; ++r) {
      const auto tmpl = select_templates(pool, g.n_templates, derive_seed(root_seed(r), "templates"));
      const EvalContext ctx{model, vocab, sentiment, tmpl, cfg.settings, root_seed(r)};
      const auto recs = run_grid(ctx, g, cfg.workers);
      double p = 0, c = 0;
      for (const auto& gap : loss_gap_report(recs))
        (gap.method.kind == MethodKind::PT ? p : c) = gap.gap;
      gap_pt += p / kRootSeeds;
      gap_cpt += c / kRootSeeds;
      per_seed += " " + fmt("%.3f", p) + "/" + fmt("%.3f", c);
      // same runs, CPT measured on its training labels only (informational)
      for (const auto& rec : recs)
        if (rec.method.kind == MethodKind::CPT) {
          const auto shots = sample_shots(sentiment.train, 4, derive_seed(root_seed(r), "run-seed", rec.seed));
          CPTConfig cc = cfg.settings.cpt;
          cc.seed = derive_seed(derive_seed(root_seed(r), "run-seed", rec.seed), "optimizer",
                                static_cast<std::uint64_t>(MethodKind::CPT));
          const auto run = train_cpt(model, shots, tmpl.at(rec.template_id), vocab, cc);
          label_gap_cpt += (rec.test_loss_trace.back() - run.epoch_train_loss.back()) / (kRootSeeds * 2);
        }
    }
    return Outcome{gap_cpt <= gap_pt, "final-epoch gap (test - train), mean over " + std::to_string(kRootSeeds) +
                                          " root seeds x 2 templates: PT " + fmt("%.3f", gap_pt) + ", CPT " +
                                          fmt("%.3f", gap_cpt) + "; per root seed PT/CPT:" + per_seed +
                                          "; CPT gap against its training labels alone " + fmt("%.3f", label_gap_cpt)};
  });

  criteria.emplace_back("ablation machinery", [&] {
    if (lab("ablate") != 0) return Outcome{false, "cpt_lab ablate failed"};
    const auto dir = paths_for(cfg).ablation_dir;
    const auto variants = ablation_variants(cfg.settings.cpt, cfg.ablation.preset);
    std::size_t rows = 0;
    for (const auto& ds : cfg.datasets) {
      const auto text = read_file(dir / ds.name / "ablation.csv");
      rows += std::count(text.begin(), text.end(), '\n') - 1;
    }
    const std::size_t want_rows = variants.size() * cfg.ablation.shots.size() * cfg.datasets.size();
    std::map<std::string, std::size_t> groups;
    for (const auto& v : variants) ++groups[v.group];
    const bool shape = groups["loss_tokens"] == 3 && groups["loss_weighting"] == 6 && groups["all_tokens_eps"] >= 3 &&
                       groups["token_wise_eps"] >= 3 && groups["updated_tokens"] == 3 && groups["mask"] == 1;

    // every variant's objective has a correct gradient
    Rng rng(9);
    double worst = 0.0;
    for (const auto& v : variants) {
      const auto shots = sample_shots(setclass.train, 4, derive_seed(13, "abl"));
      const auto ctx = build_context(shots, templates[0], vocab);
      auto state = ContextState::make(model, ctx, v.cpt.updated_tokens, {v.cpt.input_eps, v.cpt.format_eps});
      std::vector<std::size_t> upd;
      for (std::size_t p = 0; p < state.size(); ++p)
        if (state.update_mask[p]) upd.push_back(p);
      const std::size_t i = 1 + uniform_index(rng, 4);
      const auto layout = build_train_example(ctx, i, shots, templates[0], vocab);
      EmbeddedSequence seq(model.embed(layout.ids));
      if (v.cpt.mask_training_example) seq.mask = mask_training_copy(layout, i);
      const auto targets = build_targets(layout, v.cpt.loss, rng);
      worst = std::max(worst, directional_fd_error(model, seq, targets, upd, 6, rng));
    }
    return Outcome{shape && rows == want_rows && worst < 1e-4,
                   std::to_string(variants.size()) + " variants, " + std::to_string(rows) + "/" +
                       std::to_string(want_rows) + " table rows, per-step invariants checked in every cell, " +
                       "gradient max relative error " + fmt("%.1e", worst)};
  });

  criteria.emplace_back("determinism", [&] {
    std::vector<std::string> diffs;
    auto snapshot = [](const fs::path& root) {
      std::map<std::string, std::string> files;
      if (!fs::exists(root)) return files;
      for (const auto& e : fs::recursive_directory_iterator(root))
        if (e.is_regular_file() && e.path().filename() != "timing.csv")
          files[fs::relative(e.path(), root).string()] = read_file(e.path());
      return files;
    };
    const auto paths = paths_for(cfg);
    struct Cmd {
      std::string sub, extra;
      fs::path root;
    };
    const std::vector<Cmd> cmds{{"gen-data", "", paths.data_dir},
                                {"run", "", paths.run_dir},
                                {"run", " --workers 2", paths.run_dir},
                                {"report", "", fs::path(out_dir) / "reports"}};
    std::map<std::string, std::string> first_run;
    for (const auto& c : cmds) {
      const std::string name = c.sub + c.extra;
      if (lab(c.sub, c.extra) != 0) return Outcome{false, "cpt_lab " + name + " failed"};
      const auto a = snapshot(c.root);
      if (name == "run") first_run = a;
      if (lab(c.sub, c.extra) != 0) return Outcome{false, "cpt_lab " + name + " failed"};
      const auto b = snapshot(c.root);
      if (a != b || a.empty()) diffs.push_back(name);
      if (!c.extra.empty() && b != first_run) diffs.push_back("workers 1 vs 2");
    }
    std::string detail = std::to_string(cmds.size()) + " commands rerun, every output except timing.csv compared";
    for (const auto& d : diffs) detail += "; differs: " + d;
    return Outcome{diffs.empty(), detail};
  });

  std::size_t failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && std::find(only.begin(), only.end(), int(i + 1)) == only.end()) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    failed += !o.pass;
    std::cout << (o.pass ? "[PASS] " : "[FAIL] ") << i + 1 << ". " << criteria[i].first << ": " << o.detail << " ("
              << fmt("%.1f", secs) << " s)" << std::endl;
  }
  return failed ? 1 : 0;
}
