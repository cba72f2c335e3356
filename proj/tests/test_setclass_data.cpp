#include <gtest/gtest.h>

#include <map>

#include "cpt/setclass_data.hpp"
#include "support.hpp"

namespace cpt {
namespace {

std::vector<std::string> words_of(const std::string& s) { return lex(s); }

TEST(PseudoWords, ShapeAndUniqueness) {
  PseudoWordGenerator gen(1, {4, 7});
  std::unordered_set<std::string> taken{"baba"};
  const auto w = gen.unique_words(300, taken);
  std::set<std::string> uniq(w.begin(), w.end());
  EXPECT_EQ(uniq.size(), 300u);
  for (const auto& x : w) {
    EXPECT_GE(x.size(), 4u);
    EXPECT_LE(x.size(), 7u);
    EXPECT_NE(x, "baba");
    for (std::size_t i = 0; i < x.size(); ++i)
      EXPECT_NE((i % 2 ? PseudoWordGenerator::kVowels : PseudoWordGenerator::kConsonants).find(x[i]),
                std::string_view::npos);
  }
  PseudoWordGenerator small(1, {1, 1});
  std::unordered_set<std::string> none;
  EXPECT_THROW(small.unique_words(20, none), Error);
  EXPECT_THROW(PseudoWordGenerator(1, {3, 2}), Error);
}

class SetClassTest : public ::testing::TestWithParam<std::tuple<std::size_t, std::size_t, std::size_t>> {};

TEST_P(SetClassTest, StructureHolds) {
  const auto [c, n, m] = GetParam();
  SetClassSpec spec;
  spec.classes = c;
  spec.words_per_class = n;
  spec.words_per_input = m;
  spec.seed = 42;
  std::unordered_set<std::string> exclude{"kivo", "dalu"};
  const auto ds = generate_dataset(spec, 3 * c, 50 * c, exclude);

  ASSERT_EQ(ds.labels.size(), c);
  std::set<std::string> all;
  for (const auto& w : ds.all_words()) {
    EXPECT_TRUE(all.insert(w).second) << "duplicate word " << w;
    EXPECT_FALSE(exclude.count(w));
  }
  std::map<std::string, std::size_t> counts;
  std::vector<std::set<std::vector<std::string>>> train_sets(c);
  for (const auto& e : ds.train) {
    const std::size_t k = ds.class_of(e.y);
    ++counts[e.y];
    auto w = words_of(e.x);
    ASSERT_EQ(w.size(), m);
    for (const auto& x : w) EXPECT_NE(std::find(ds.members[k].begin(), ds.members[k].end(), x), ds.members[k].end());
    std::sort(w.begin(), w.end());
    EXPECT_EQ(std::unique(w.begin(), w.end()), w.end());
    train_sets[k].insert(w);
  }
  for (const auto& [label, count] : counts) EXPECT_EQ(count, 3u);
  std::map<std::string, std::size_t> test_counts;
  for (const auto& e : ds.test) {
    ++test_counts[e.y];
    auto w = words_of(e.x);
    std::sort(w.begin(), w.end());
    if (m < n) {
      EXPECT_FALSE(train_sets[ds.class_of(e.y)].count(w)) << "test set reuses a train set";
    }
  }
  for (const auto& [label, count] : test_counts) EXPECT_EQ(count, 50u);
}

INSTANTIATE_TEST_SUITE_P(Shapes, SetClassTest,
                         ::testing::Values(std::tuple{2u, 5u, 4u}, std::tuple{5u, 5u, 4u}, std::tuple{10u, 5u, 4u},
                                           std::tuple{4u, 3u, 3u}, std::tuple{3u, 6u, 1u}));

TEST(SetClass, SeededAndDistinctAcrossSeeds) {
  SetClassSpec spec;
  spec.seed = 5;
  const auto a = generate_dataset(spec, 20, 100), b = generate_dataset(spec, 20, 100);
  EXPECT_EQ(a.train, b.train);
  EXPECT_EQ(a.test, b.test);
  spec.seed = 6;
  EXPECT_NE(generate_dataset(spec, 20, 100).labels, a.labels);
}

TEST(SetClass, RejectsInvalidSpecs) {
  SetClassSpec spec;
  spec.classes = 1;
  EXPECT_THROW(generate_dataset(spec, 2, 2), Error);
  spec = {};
  spec.words_per_input = 6;
  EXPECT_THROW(generate_dataset(spec, 2, 2), Error);
}

TEST(Sentiment, SentencesCarryPolarityWords) {
  SentimentSpec spec;
  spec.seed = 3;
  const auto ds = generate_sentiment_dataset(spec, 8, 100);
  ASSERT_EQ(ds.labels.size(), 2u);
  EXPECT_EQ(ds.shared_words.size(), spec.filler_words);
  for (const auto* split : {&ds.train, &ds.test})
    for (const auto& e : *split) {
      const auto w = words_of(e.x);
      ASSERT_EQ(w.size(), spec.sentence_length);
      const auto& own = ds.members[ds.class_of(e.y)];
      const auto& other = ds.members[1 - ds.class_of(e.y)];
      std::size_t polar = 0;
      for (const auto& x : w) {
        polar += std::count(own.begin(), own.end(), x);
        EXPECT_EQ(std::count(other.begin(), other.end(), x), 0);
      }
      EXPECT_EQ(polar, spec.polar_words_per_sentence);
    }
  spec.sentence_length = 1;
  EXPECT_THROW(spec.validate(), Error);
}

TEST(Jsonl, RoundTripAndErrors) {
  const std::vector<Example> ex{{"a b", "c"}, {"quote \" and, comma", "d"}};
  EXPECT_EQ(parse_jsonl(to_jsonl(ex)), ex);
  const auto path = std::filesystem::temp_directory_path() / "cpt_jsonl_test.jsonl";
  write_jsonl(path, ex);
  EXPECT_EQ(read_jsonl(path), ex);
  std::filesystem::remove(path);
  try {
    parse_jsonl("{\"x\": \"a\", \"y\": \"b\"}\n{oops}\n");
    FAIL() << "expected a parse error";
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
  EXPECT_THROW(parse_jsonl("{\"x\": \"a\"}\n"), Error);
}

}  // namespace
}  // namespace cpt
