#pragma once

// Synthetic classification data built from seeded pseudo-words, so no
// evaluation word can have been seen during pretraining.

#include <algorithm>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpt/common.hpp"
#include "cpt/prompt.hpp"

namespace cpt {

struct LengthRange {
  std::size_t min = 4;
  std::size_t max = 7;
  friend bool operator==(const LengthRange&, const LengthRange&) = default;
};

/// Consonant-vowel alternating lowercase words.
class PseudoWordGenerator {
 public:
  static constexpr std::string_view kConsonants = "bcdfghjklmnprstvz";
  static constexpr std::string_view kVowels = "aeiou";

  PseudoWordGenerator(std::uint64_t seed, LengthRange lengths) : rng_(seed), lengths_(lengths) {
    if (lengths_.min == 0 || lengths_.min > lengths_.max) throw Error("invalid word length range");
  }

  /// Number of distinct words the generator can emit.
  double capacity() const {
    double total = 0.0;
    for (std::size_t len = lengths_.min; len <= lengths_.max; ++len) {
      const double c = std::pow(static_cast<double>(kConsonants.size()), static_cast<double>((len + 1) / 2));
      const double v = std::pow(static_cast<double>(kVowels.size()), static_cast<double>(len / 2));
      total += c * v;
    }
    return total;
  }

  std::string next() {
    const std::size_t len = lengths_.min + uniform_index(rng_, lengths_.max - lengths_.min + 1);
    std::string w(len, ' ');
    for (std::size_t i = 0; i < len; ++i) {
      const auto& alphabet = (i % 2 == 0) ? kConsonants : kVowels;
      w[i] = alphabet[uniform_index(rng_, alphabet.size())];
    }
    return w;
  }

  /// `count` fresh words, none in `taken`; all are inserted into `taken`.
  std::vector<std::string> unique_words(std::size_t count, std::unordered_set<std::string>& taken) {
    if (static_cast<double>(count + taken.size()) > 0.5 * capacity()) throw Error("word space too small");
    std::vector<std::string> out;
    std::size_t attempts = 0;
    while (out.size() < count) {
      if (++attempts > 1000 * (count + 10)) throw Error("word space too small");
      auto w = next();
      if (taken.insert(w).second) out.push_back(std::move(w));
    }
    return out;
  }

 private:
  Rng rng_;
  LengthRange lengths_;
};

struct SetClassSpec {
  std::size_t classes = 10;          // C
  std::size_t words_per_class = 5;   // N
  std::size_t words_per_input = 4;   // M
  std::uint64_t seed = 0;
  LengthRange word_length{4, 7};

  void validate() const {
    if (classes < 2) throw Error("setclass.classes must be at least 2");
    if (words_per_input < 1 || words_per_input > words_per_class)
      throw Error("setclass.words_per_input must be in [1, words_per_class]");
  }
  friend bool operator==(const SetClassSpec&, const SetClassSpec&) = default;
};

inline void to_json(nlohmann::json& j, const LengthRange& r) { j = nlohmann::json::array({r.min, r.max}); }
inline void from_json(const nlohmann::json& j, LengthRange& r) {
  if (!j.is_array() || j.size() != 2) throw Error("word_length must be [min, max]");
  r.min = j[0].get<std::size_t>();
  r.max = j[1].get<std::size_t>();
}

inline void to_json(nlohmann::json& j, const SetClassSpec& s) {
  j = {{"classes", s.classes},
       {"words_per_class", s.words_per_class},
       {"words_per_input", s.words_per_input},
       {"seed", s.seed},
       {"word_length", s.word_length}};
}

struct LabeledDataset {
  std::string name;
  std::vector<std::string> labels;                // one single-word label per class
  std::vector<std::vector<std::string>> members;  // per-class evidence words
  std::vector<std::string> shared_words;          // class-neutral words, if any
  std::vector<Example> train;
  std::vector<Example> test;

  std::vector<std::string> all_words() const {
    std::vector<std::string> w = labels;
    for (const auto& m : members) w.insert(w.end(), m.begin(), m.end());
    w.insert(w.end(), shared_words.begin(), shared_words.end());
    return w;
  }
  std::size_t class_of(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) throw Error("unknown label: " + label);
    return static_cast<std::size_t>(it - labels.begin());
  }
};

namespace detail {

/// Class assignment for `n` examples: every class count is floor(n/C) or
/// ceil(n/C), and example order is shuffled.
inline std::vector<std::size_t> balanced_classes(std::size_t n, std::size_t classes, Rng& rng) {
  std::vector<std::size_t> perm(classes);
  for (std::size_t c = 0; c < classes; ++c) perm[c] = c;
  shuffle_in_place(perm, rng);
  std::vector<std::size_t> out(n);
  for (std::size_t j = 0; j < n; ++j) out[j] = perm[j % classes];
  shuffle_in_place(out, rng);
  return out;
}

inline double binomial(std::size_t n, std::size_t k) {
  double r = 1.0;
  for (std::size_t i = 1; i <= k; ++i) r = r * static_cast<double>(n - k + i) / static_cast<double>(i);
  return r;
}

inline std::string join_words(const std::vector<std::string>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) s += (i ? " " : "") + w[i];
  return s;
}

}  // namespace detail

/// Set Classification: C label words, C groups of N member words; each
/// example is M distinct words of one group, labelled with that group's word.
/// Test word-sets avoid every train word-set of the same class unless the
/// class has no unused set left (e.g. M == N).
inline LabeledDataset generate_dataset(const SetClassSpec& spec, std::size_t n_train, std::size_t n_test,
                                       const std::unordered_set<std::string>& exclude = {}) {
  spec.validate();
  std::unordered_set<std::string> taken = exclude;
  PseudoWordGenerator gen(derive_seed(spec.seed, "setclass-words"), spec.word_length);
  LabeledDataset ds;
  ds.name = "setclass";
  ds.labels = gen.unique_words(spec.classes, taken);
  for (std::size_t c = 0; c < spec.classes; ++c) ds.members.push_back(gen.unique_words(spec.words_per_class, taken));

  Rng rng(derive_seed(spec.seed, "setclass-examples"));
  const double sets_per_class = detail::binomial(spec.words_per_class, spec.words_per_input);
  std::vector<std::set<std::vector<std::string>>> train_sets(spec.classes);

  auto draw = [&](std::size_t c) {
    std::vector<std::string> pool = ds.members[c];
    shuffle_in_place(pool, rng);
    pool.resize(spec.words_per_input);
    return pool;
  };
  auto key_of = [](std::vector<std::string> w) {
    std::sort(w.begin(), w.end());
    return w;
  };

  for (std::size_t c : detail::balanced_classes(n_train, spec.classes, rng)) {
    auto words = draw(c);
    // prefer a word-set not yet used in train
    for (int tries = 0; tries < 64 && static_cast<double>(train_sets[c].size()) < sets_per_class &&
                        train_sets[c].count(key_of(words));
         ++tries)
      words = draw(c);
    train_sets[c].insert(key_of(words));
    ds.train.push_back({detail::join_words(words), ds.labels[c]});
  }
  for (std::size_t c : detail::balanced_classes(n_test, spec.classes, rng)) {
    auto words = draw(c);
    if (static_cast<double>(train_sets[c].size()) < sets_per_class) {
      while (train_sets[c].count(key_of(words))) words = draw(c);
    }
    ds.test.push_back({detail::join_words(words), ds.labels[c]});
  }
  return ds;
}

/// Two-class sentiment-style corpus: sentences of filler words plus a few
/// polarity words drawn from a class-specific pool.
struct SentimentSpec {
  std::size_t words_per_polarity = 8;
  std::size_t filler_words = 16;
  std::size_t sentence_length = 6;
  std::size_t polar_words_per_sentence = 2;
  std::uint64_t seed = 0;
  LengthRange word_length{4, 7};

  void validate() const {
    if (polar_words_per_sentence < 1 || polar_words_per_sentence > words_per_polarity)
      throw Error("sentiment.polar_words_per_sentence must be in [1, words_per_polarity]");
    if (sentence_length < polar_words_per_sentence) throw Error("sentiment.sentence_length too small");
    if (sentence_length - polar_words_per_sentence > filler_words)
      throw Error("sentiment.filler_words too small for sentence_length");
  }
  friend bool operator==(const SentimentSpec&, const SentimentSpec&) = default;
};

inline void to_json(nlohmann::json& j, const SentimentSpec& s) {
  j = {{"words_per_polarity", s.words_per_polarity},
       {"filler_words", s.filler_words},
       {"sentence_length", s.sentence_length},
       {"polar_words_per_sentence", s.polar_words_per_sentence},
       {"seed", s.seed},
       {"word_length", s.word_length}};
}

inline LabeledDataset generate_sentiment_dataset(const SentimentSpec& spec, std::size_t n_train, std::size_t n_test,
                                                 const std::unordered_set<std::string>& exclude = {}) {
  spec.validate();
  std::unordered_set<std::string> taken = exclude;
  PseudoWordGenerator gen(derive_seed(spec.seed, "sentiment-words"), spec.word_length);
  LabeledDataset ds;
  ds.name = "sentiment";
  ds.labels = gen.unique_words(2, taken);
  ds.members.push_back(gen.unique_words(spec.words_per_polarity, taken));
  ds.members.push_back(gen.unique_words(spec.words_per_polarity, taken));
  ds.shared_words = gen.unique_words(spec.filler_words, taken);

  Rng rng(derive_seed(spec.seed, "sentiment-examples"));
  std::set<std::vector<std::string>> seen;
  auto sentence = [&](std::size_t c) {
    std::vector<std::string> polar = ds.members[c];
    shuffle_in_place(polar, rng);
    polar.resize(spec.polar_words_per_sentence);
    std::vector<std::string> filler = ds.shared_words;
    shuffle_in_place(filler, rng);
    filler.resize(spec.sentence_length - spec.polar_words_per_sentence);
    polar.insert(polar.end(), filler.begin(), filler.end());
    shuffle_in_place(polar, rng);
    return polar;
  };
  auto key_of = [](std::vector<std::string> w) {
    std::sort(w.begin(), w.end());
    return w;
  };
  for (std::size_t c : detail::balanced_classes(n_train, 2, rng)) {
    auto s = sentence(c);
    seen.insert(key_of(s));
    ds.train.push_back({detail::join_words(s), ds.labels[c]});
  }
  for (std::size_t c : detail::balanced_classes(n_test, 2, rng)) {
    auto s = sentence(c);
    for (int tries = 0; tries < 256 && seen.count(key_of(s)); ++tries) s = sentence(c);
    ds.test.push_back({detail::join_words(s), ds.labels[c]});
  }
  return ds;
}

// JSONL persistence: one {"x": ..., "y": ...} object per line.

inline std::string to_jsonl(std::span<const Example> examples) {
  std::string out;
  for (const auto& e : examples) out += nlohmann::json{{"x", e.x}, {"y", e.y}}.dump() + "\n";
  return out;
}

inline std::vector<Example> parse_jsonl(std::string_view text) {
  std::vector<Example> out;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    ++line_no;
    const auto line = text.substr(start, end - start);
    start = end + 1;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("x").get<std::string>(), j.at("y").get<std::string>()});
    } catch (const std::exception& e) {
      throw Error("malformed JSONL at line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

inline void write_jsonl(const std::filesystem::path& path, std::span<const Example> examples) {
  write_file_atomic(path, to_jsonl(examples));
}

inline std::vector<Example> read_jsonl(const std::filesystem::path& path) { return parse_jsonl(read_file(path)); }

}  // namespace cpt
