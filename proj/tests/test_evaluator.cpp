#include <gtest/gtest.h>

#include "cpt/evaluator.hpp"
#include "support.hpp"

namespace cpt {
namespace {

TEST(Protocol, TestSetScalesWithClasses) {
  EXPECT_EQ(test_set_size(2), 100u);
  EXPECT_EQ(test_set_size(14), 700u);
  EXPECT_THROW(test_set_size(1), Error);
}

TEST(Protocol, MethodNamesRoundTrip) {
  for (const char* n : {"ICL", "PT", "IPT", "CPT", "ICL-inst", "PT-inst", "IPT-inst", "CPT-inst"})
    EXPECT_EQ(parse_method(n).name(), n);
  EXPECT_THROW(parse_method("LoRA"), Error);
  EXPECT_FALSE(parse_method("ICL").trainable());
}

TEST(Protocol, ShotsAreClassBalancedAndSeeded) {
  std::vector<Example> pool;
  for (int c = 0; c < 5; ++c)
    for (int i = 0; i < 4; ++i) pool.push_back({"x" + std::to_string(c) + std::to_string(i), "y" + std::to_string(c)});
  for (std::size_t shots = 1; shots <= 20; ++shots) {
    const auto s = sample_shots(pool, shots, 77);
    ASSERT_EQ(s.size(), shots);
    std::map<std::string, std::size_t> n;
    for (const auto& e : s) ++n[e.y];
    const std::size_t lo = shots / 5, hi = (shots + 4) / 5;
    for (const auto& [y, k] : n) {
      EXPECT_GE(k, lo);
      EXPECT_LE(k, hi);
    }
    std::set<std::string> xs;
    for (const auto& e : s) EXPECT_TRUE(xs.insert(e.x).second);
    EXPECT_EQ(sample_shots(pool, shots, 77), s);
  }
  EXPECT_NE(sample_shots(pool, 5, 1), sample_shots(pool, 5, 2));
  EXPECT_THROW(sample_shots(pool, 21, 0), Error);
}

TEST(Protocol, TemplateSelectionIsSeededAndDistinct) {
  const auto pool = default_template_pool();
  const auto a = select_templates(pool, 10, 3);
  EXPECT_EQ(a, select_templates(pool, 10, 3));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = i + 1; j < a.size(); ++j) EXPECT_FALSE(a[i] == a[j]);
  EXPECT_THROW(select_templates(pool, 25, 3), Error);
}

// Two-pass population moments, written independently of sample_std.
double oracle_std(const std::vector<double>& x) {
  if (x.size() < 2) return 0.0;
  long double mean = 0;
  for (double v : x) mean += v;
  mean /= x.size();
  long double ss = 0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return double(std::sqrt(ss / (x.size() - 1)));
}

TEST(StdBreakdown, MatchesIndependentOracle) {
  Rng rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<std::vector<double>> acc(10, std::vector<double>(3));
    for (auto& row : acc)
      for (auto& a : row) a = uniform_unit(rng);
    std::vector<double> all;
    for (const auto& row : acc) all.insert(all.end(), row.begin(), row.end());
    double across_templates = 0, across_seeds = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      std::vector<double> col;
      for (std::size_t t = 0; t < 10; ++t) col.push_back(acc[t][s]);
      across_templates += oracle_std(col) / 3;
    }
    for (const auto& row : acc) across_seeds += oracle_std(row) / 10;
    const auto b = std_breakdown(acc);
    EXPECT_NEAR(b.overall, oracle_std(all), 1e-12);
    EXPECT_NEAR(b.templates, across_templates, 1e-12);
    EXPECT_NEAR(b.seeds, across_seeds, 1e-12);
  }
  EXPECT_THROW(std_breakdown({}), Error);
  EXPECT_THROW(std_breakdown({{0.1, 0.2}, {0.3}}), Error);
  EXPECT_EQ(std_breakdown({{0.5}}).overall, 0.0);
}

class GridTest : public ::testing::Test {
 protected:
  Vocabulary v = testing::tiny_vocab();
  TinyLM model = testing::random_model(v.size(), 16, 1, 31, 128);
  LabeledDataset ds = [] {
    LabeledDataset d;
    d.name = "toy";
    d.labels = {"alpha", "beta"};
    d.members = {{"red", "green", "cat", "sun"}, {"blue", "dog", "fox", "moon"}};
    d.train = {{"red cat", "alpha"}, {"green sun", "alpha"}, {"blue dog", "beta"}, {"fox moon", "beta"}};
    d.test = {{"red sun", "alpha"}, {"cat green", "alpha"}, {"dog moon", "beta"}, {"blue fox", "beta"}};
    return d;
  }();
  ExperimentGrid grid = [] {
    ExperimentGrid g;
    g.methods = {parse_method("ICL"), parse_method("PT"), parse_method("IPT-inst"), parse_method("CPT")};
    g.shots = {2, 4};
    g.n_templates = 2;
    g.n_seeds = 2;
    return g;
  }();
  EvalContext ctx() const {
    MethodSettings s;
    s.cpt.epochs = 2;
    s.pt = {0.01, 2, 3, 0, {}};
    s.ipt = {0.01, 2, 3, 0, {}};
    s.loss_trace_examples = 2;
    s.check_invariants = true;
    return {model, v, ds, select_templates(default_template_pool(), 2, 1), s, 5};
  }
};

TEST_F(GridTest, EmitsOneRecordPerCell) {
  const auto recs = run_grid(ctx(), grid);
  ASSERT_EQ(recs.size(), 4u * 2 * 2 * 2);
  EXPECT_EQ(grid.cell_count(), recs.size());
  std::set<std::tuple<std::string, std::size_t, std::size_t, std::size_t>> keys;
  for (const auto& r : recs) {
    EXPECT_TRUE(r.ok()) << r.error;
    EXPECT_EQ(r.n_test, 4u);
    EXPECT_DOUBLE_EQ(r.accuracy, r.n_correct / 4.0);
    keys.insert({r.method.name(), r.shots, r.template_id, r.seed});
    if (r.method.trainable()) {
      EXPECT_EQ(r.train_loss_trace.size(), 2u);
      EXPECT_EQ(r.test_loss_trace.size(), 2u);
    } else {
      EXPECT_TRUE(r.train_loss_trace.empty());
    }
  }
  EXPECT_EQ(keys.size(), recs.size());
  const auto summary = aggregate(recs, grid);
  EXPECT_EQ(summary.size(), 8u);
  for (const auto& s : summary) EXPECT_EQ(s.runs, 4u);
}

TEST_F(GridTest, SoftPromptLrIsPickedOnHeldOutTrainingExamples) {
  auto c = ctx();
  c.settings.pt.lr_grid = {0.001, 0.3};
  const auto rec = run_cell(c, parse_method("PT"), 2, 0, 0);
  ASSERT_TRUE(rec.ok()) << rec.error;

  // recompute the selection by hand
  const auto shots = sample_shots(ds.train, 2, derive_seed(5, "run-seed", 0));
  const std::uint64_t opt_seed = derive_seed(derive_seed(5, "run-seed", 0), "optimizer",
                                             static_cast<std::uint64_t>(MethodKind::PT));
  const auto labels = label_first_tokens(v, ds.labels);
  double best = std::numeric_limits<double>::infinity(), want = 0.0;
  for (double lr : c.settings.pt.lr_grid) {
    SoftPromptConfig sc = c.settings.pt;
    sc.lr = lr;
    sc.seed = opt_seed;
    const auto run = train_pt(model, shots, c.templates[0], v,
                              init_soft_prompt(model, v, sc.n_tokens, SoftPromptInit::Random, "", opt_seed), sc);
    double loss = 0.0;
    for (const auto& e : ds.train)
      if (std::find(shots.begin(), shots.end(), e) == shots.end())
        loss += query_loss(model, soft_query(model, run, e.x, c.templates[0], v), labels[ds.class_of(e.y)]);
    if (loss < best) best = loss, want = lr;
  }
  EXPECT_EQ(rec.lr, want);

  c.settings.pt.lr_grid = {std::numeric_limits<double>::infinity(), 0.01};
  const auto diverging = run_cell(c, parse_method("PT"), 2, 0, 0);
  EXPECT_TRUE(diverging.ok()) << diverging.error;
  EXPECT_EQ(diverging.lr, 0.01);
}

TEST_F(GridTest, WorkerCountDoesNotChangeResults) {
  const auto a = run_grid(ctx(), grid, 1);
  const auto b = run_grid(ctx(), grid, 3);
  EXPECT_EQ(records_csv(a, "h"), records_csv(b, "h"));
  EXPECT_EQ(traces_csv(a, "h"), traces_csv(b, "h"));
}

TEST_F(GridTest, FailingCellsAreRecorded) {
  auto g = grid;
  g.shots = {5};  // more than the training pool
  const auto recs = run_grid(ctx(), g);
  for (const auto& r : recs) EXPECT_FALSE(r.ok());
  EXPECT_THROW(aggregate(recs, g), Error);
  const auto csv = records_csv(recs, "h");
  EXPECT_NE(csv.find("shots exceeds the training pool"), std::string::npos);
}

TEST(LossGap, AveragesFinalEpochs) {
  RunRecord a, b, c;
  a.method = b.method = parse_method("CPT");
  a.shots = b.shots = c.shots = 4;
  a.train_loss_trace = {2.0, 1.0};
  a.test_loss_trace = {3.0, 2.0};
  b.train_loss_trace = {1.0, 0.5};
  b.test_loss_trace = {2.0, 2.5};
  c.method = parse_method("ICL");
  const std::vector<RunRecord> recs{a, b, c};
  const auto gaps = loss_gap_report(recs);
  ASSERT_EQ(gaps.size(), 2u);
  const auto& cpt = gaps[0].method.kind == MethodKind::CPT ? gaps[0] : gaps[1];
  EXPECT_TRUE(cpt.applicable);
  EXPECT_DOUBLE_EQ(cpt.final_train, 0.75);
  EXPECT_DOUBLE_EQ(cpt.final_test, 2.25);
  EXPECT_DOUBLE_EQ(cpt.gap, 1.5);
  EXPECT_NE(loss_gap_csv(gaps, "h").find("n/a"), std::string::npos);
}

TEST(Writers, QuoteFieldsAndKeepFullPrecision) {
  RunRecord r;
  r.method = parse_method("CPT");
  r.accuracy = 1.0 / 3.0;
  r.error = "bad, \"thing\"";
  const auto csv = records_csv(std::vector<RunRecord>{r}, "abc");
  EXPECT_NE(csv.find("\"bad, \"\"thing\"\"\""), std::string::npos);
  EXPECT_NE(csv.find("0.33333333333333331"), std::string::npos);
  EXPECT_EQ(csv.substr(0, csv.find('\n')), "config_hash,method,shots,template_id,seed,accuracy,n_correct,n_test,lr,error");
}

}  // namespace
}  // namespace cpt
