#pragma once

// Small fixtures shared by the unit tests: a tiny vocabulary, random models
// whose parameters are all perturbed away from their structured init, and a
// finite-difference gradient check.

#include <gtest/gtest.h>

#include "cpt/pipeline.hpp"

namespace cpt::testing {

inline Vocabulary tiny_vocab() {
  std::vector<std::string> corpus = template_words();
  for (const auto& w : instruction_words()) corpus.push_back(w);
  for (const char* w : {"alpha", "beta", "gamma", "delta", "red", "blue", "green", "cat", "dog", "fox", "sun", "moon"})
    corpus.emplace_back(w);
  auto reserved = default_reserved();
  for (const auto& l : format_literals()) reserved.push_back(l);
  return build_vocabulary(corpus, reserved);
}

/// A model with every tensor randomized, so identity conv taps, zero biases
/// and unit norms do not hide gradient bugs.
inline TinyLM random_model(std::size_t vocab_size, std::size_t dim, std::size_t layers, std::uint64_t seed,
                           std::size_t max_len = 64, std::size_t conv_width = 3) {
  TinyLMConfig c;
  c.vocab_size = vocab_size;
  c.model_dim = dim;
  c.n_layers = layers;
  c.n_heads = 4;
  c.ff_dim = 2 * dim;
  c.max_seq_len = max_len;
  c.conv_width = conv_width;
  c.seed = seed;
  TinyLM m(c);
  Rng rng(derive_seed(seed, "perturb"));
  m.mutable_params().for_each([&](const std::string&, Matrix& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] += 0.2 * standard_normal(rng);
  });
  m.freeze();
  return m;
}

inline Matrix random_rows(std::size_t len, std::size_t dim, Rng& rng) {
  Matrix r(static_cast<Eigen::Index>(len), static_cast<Eigen::Index>(dim));
  for (Eigen::Index i = 0; i < r.size(); ++i) r.data()[i] = 0.5 * standard_normal(rng);
  return r;
}

/// Relative error ||a - b|| / max(||a||, ||b||, floor) between the analytic
/// input gradient and central differences with step h.
inline double fd_relative_error(const TinyLM& m, const EmbeddedSequence& seq, std::span<const Target> targets,
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
  const double scale = std::max({g.norm(), fd.norm(), 1e-8});
  return (g - fd).norm() / scale;
}

/// Independent cross-entropy from raw logits: sum_t w_t (logsumexp - logit).
inline double oracle_loss(const Matrix& logits, std::span<const Target> targets) {
  double total = 0.0;
  for (const auto& t : targets) {
    const auto row = logits.row(static_cast<Eigen::Index>(t.position));
    const double mx = row.maxCoeff();
    double s = 0.0;
    for (Eigen::Index j = 0; j < row.size(); ++j) s += std::exp(row(j) - mx);
    total += t.weight * (mx + std::log(s) - row(t.token));
  }
  return total;
}

inline std::vector<Example> toy_examples() {
  return {{"red cat", "alpha"}, {"blue dog", "beta"}, {"green fox", "alpha"}, {"sun moon", "beta"}};
}

}  // namespace cpt::testing
