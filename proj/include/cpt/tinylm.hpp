#pragma once

// Small pre-LN decoder-only transformer in double precision with a
// hand-written backward pass. The same backward produces gradients with
// respect to the input token-embedding rows (used by every prompt method)
// and, optionally, with respect to all parameters (used by pretraining).
//
// Each head mixes every attention score with the score of the key's previous
// position ("smeared keys"), weighted by a learned per-head sigmoid gate. The
// previous score only counts when that position is visible to the query, so
// extra attention masks stay exact.

#include <algorithm>
#include <cstring>
#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cpt/common.hpp"
#include "cpt/tokenizer.hpp"

namespace cpt {

struct TinyLMConfig {
  std::size_t vocab_size = 0;
  std::size_t model_dim = 64;
  std::size_t n_layers = 4;
  std::size_t n_heads = 4;
  std::size_t max_seq_len = 512;
  std::size_t ff_dim = 256;
  std::size_t conv_width = 3;  // causal depthwise mixing before q/k/v; 1 disables
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size == 0) throw Error("model.vocab_size must be positive");
    if (model_dim == 0 || n_heads == 0 || n_layers == 0 || ff_dim == 0 || max_seq_len == 0)
      throw Error("model dimensions must be positive");
    if (model_dim % n_heads != 0) throw Error("model_dim must be divisible by n_heads");
    if (conv_width == 0) throw Error("conv_width must be at least 1");
  }
  std::size_t head_dim() const { return model_dim / n_heads; }

  friend bool operator==(const TinyLMConfig&, const TinyLMConfig&) = default;
};

inline void to_json(nlohmann::json& j, const TinyLMConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"model_dim", c.model_dim}, {"n_layers", c.n_layers},
       {"n_heads", c.n_heads},       {"max_seq_len", c.max_seq_len}, {"ff_dim", c.ff_dim},
       {"conv_width", c.conv_width}, {"seed", c.seed}};
}
inline void from_json(const nlohmann::json& j, TinyLMConfig& c) {
  j.at("vocab_size").get_to(c.vocab_size);
  j.at("model_dim").get_to(c.model_dim);
  j.at("n_layers").get_to(c.n_layers);
  j.at("n_heads").get_to(c.n_heads);
  j.at("max_seq_len").get_to(c.max_seq_len);
  j.at("ff_dim").get_to(c.ff_dim);
  c.conv_width = j.value("conv_width", std::size_t{1});
  j.at("seed").get_to(c.seed);
}

struct LayerParams {
  Matrix ln1_g, ln1_b;
  Matrix conv;   // conv_width x dim; row s weights the input s positions back
  Matrix w_qkv, b_qkv;
  Matrix smear;  // 1 x heads, logit of the previous-key score mix
  Matrix w_out, b_out;
  Matrix ln2_g, ln2_b;
  Matrix w_fc, b_fc;
  Matrix w_proj, b_proj;
};

/// All trainable tensors. Gradients use the same type.
struct ModelParams {
  Matrix tok_emb;  // vocab x dim; also the (tied) output projection
  Matrix pos_emb;  // max_seq_len x dim
  std::vector<LayerParams> layers;
  Matrix lnf_g, lnf_b;

  template <class F>
  void for_each(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      auto& p = layers[l];
      const std::string pre = "layer" + std::to_string(l) + ".";
      f(pre + "ln1_g", p.ln1_g), f(pre + "ln1_b", p.ln1_b);
      f(pre + "conv", p.conv);
      f(pre + "w_qkv", p.w_qkv), f(pre + "b_qkv", p.b_qkv);
      f(pre + "smear", p.smear);
      f(pre + "w_out", p.w_out), f(pre + "b_out", p.b_out);
      f(pre + "ln2_g", p.ln2_g), f(pre + "ln2_b", p.ln2_b);
      f(pre + "w_fc", p.w_fc), f(pre + "b_fc", p.b_fc);
      f(pre + "w_proj", p.w_proj), f(pre + "b_proj", p.b_proj);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
  }
  template <class F>
  void for_each(F&& f) const {
    const_cast<ModelParams*>(this)->for_each([&](const std::string& n, Matrix& m) { f(n, std::as_const(m)); });
  }

  /// Zero tensors with the same shapes.
  ModelParams zeros_like() const {
    ModelParams z = *this;
    z.for_each([](const std::string&, Matrix& m) { m.setZero(); });
    return z;
  }
};

/// Causal visibility plus optional extra blocked (query, key) pairs.
class AttentionMask {
 public:
  AttentionMask() = default;
  explicit AttentionMask(std::size_t len) : len_(len) {}

  std::size_t size() const { return len_; }
  bool has_extra() const { return !blocked_.empty(); }

  void block(std::size_t query, std::size_t key) {
    if (query >= len_ || key >= len_) throw Error("attention mask index out of range");
    if (query == key) throw Error("a position cannot be masked from itself");
    if (blocked_.empty()) blocked_.assign(len_ * len_, 0);
    blocked_[query * len_ + key] = 1;
  }

  bool visible(std::size_t query, std::size_t key) const {
    if (key > query) return false;
    return blocked_.empty() || blocked_[query * len_ + key] == 0;
  }

  friend bool operator==(const AttentionMask&, const AttentionMask&) = default;

 private:
  std::size_t len_ = 0;
  std::vector<std::uint8_t> blocked_;
};

/// Token-embedding rows fed to the model (positional embeddings are added
/// inside the model) and the attention mask over them.
struct EmbeddedSequence {
  Matrix rows;
  AttentionMask mask;

  EmbeddedSequence() = default;
  explicit EmbeddedSequence(Matrix r) : rows(std::move(r)), mask(static_cast<std::size_t>(rows.rows())) {}
  EmbeddedSequence(Matrix r, AttentionMask m) : rows(std::move(r)), mask(std::move(m)) {
    if (mask.size() != static_cast<std::size_t>(rows.rows())) throw Error("attention mask length mismatch");
  }
  std::size_t size() const { return static_cast<std::size_t>(rows.rows()); }
};

/// One supervised next-token prediction: logits at `position` should
/// predict `token`, contributing `weight` times its cross-entropy.
struct Target {
  std::size_t position;
  TokenId token;
  double weight;
};

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> per_target;  // unweighted cross-entropy of each target
  Matrix grad;                     // seq_len x model_dim, d loss / d rows
};

namespace detail {

inline constexpr double kLnEps = 1e-5;
inline constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

inline Matrix layer_norm(const Matrix& x, const Matrix& g, const Matrix& b, Matrix& xhat, Eigen::VectorXd& rstd) {
  const auto n = x.rows();
  const double d = static_cast<double>(x.cols());
  xhat.resize(n, x.cols());
  rstd.resize(n);
  for (Eigen::Index i = 0; i < n; ++i) {
    const double mean = x.row(i).sum() / d;
    const double var = (x.row(i).array() - mean).square().sum() / d;
    rstd(i) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
  }
  Matrix y = xhat.array().rowwise() * g.row(0).array();
  y.rowwise() += b.row(0);
  return y;
}

inline Matrix layer_norm_backward(const Matrix& dy, const Matrix& xhat, const Eigen::VectorXd& rstd,
                                  const Matrix& g, Matrix* dg, Matrix* db) {
  if (dg) dg->row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  if (db) db->row(0) += dy.colwise().sum();
  Matrix dxhat = dy.array().rowwise() * g.row(0).array();
  const double d = static_cast<double>(dy.cols());
  Matrix dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const double m1 = dxhat.row(i).sum() / d;
    const double m2 = dxhat.row(i).dot(xhat.row(i)) / d;
    dx.row(i) = rstd(i) * (dxhat.row(i).array() - m1 - xhat.row(i).array() * m2);
  }
  return dx;
}

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

inline double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }
inline double gelu_grad(double x) {
  const double u = kGeluC * (x + 0.044715 * x * x * x);
  const double t = std::tanh(u);
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct LayerCache {
  Matrix ln1, ln1_xhat;
  Eigen::VectorXd ln1_rstd;
  Matrix mixed;  // ln1 after the causal depthwise mixing
  Matrix qkv;
  std::vector<Matrix> scores;  // per head, raw scaled q.k
  std::vector<Matrix> probs;   // per head, seq x seq
  Matrix attn;                // concatenated head outputs
  Matrix ln2, ln2_xhat;
  Eigen::VectorXd ln2_rstd;
  Matrix fc_pre, fc_act;
};

struct ForwardCache {
  std::vector<LayerCache> layers;
  Matrix lnf, lnf_xhat;
  Eigen::VectorXd lnf_rstd;
};

inline void init_normal(Matrix& m, Eigen::Index r, Eigen::Index c, double std, Rng& rng) {
  m.resize(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = std * standard_normal(rng);
}

}  // namespace detail

class TinyLM {
 public:
  TinyLM() = default;

  /// Seeded random initialization. Token rows have unit expected norm.
  explicit TinyLM(const TinyLMConfig& config) : config_(config) {
    config_.validate();
    Rng rng(derive_seed(config_.seed, "tinylm-init"));
    const auto d = static_cast<Eigen::Index>(config_.model_dim);
    const auto f = static_cast<Eigen::Index>(config_.ff_dim);
    const double emb_std = 1.0 / std::sqrt(static_cast<double>(d));
    const double resid_scale = 1.0 / std::sqrt(2.0 * static_cast<double>(config_.n_layers));
    detail::init_normal(params_.tok_emb, static_cast<Eigen::Index>(config_.vocab_size), d, emb_std, rng);
    // sinusoidal start (unit row norm) so relative offsets are linearly reachable
    params_.pos_emb.resize(static_cast<Eigen::Index>(config_.max_seq_len), d);
    for (Eigen::Index pos = 0; pos < params_.pos_emb.rows(); ++pos)
      for (Eigen::Index i = 0; i < d; i += 2) {
        const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
        params_.pos_emb(pos, i) = std::sin(static_cast<double>(pos) * freq) * std::sqrt(2.0) * emb_std;
        if (i + 1 < d) params_.pos_emb(pos, i + 1) = std::cos(static_cast<double>(pos) * freq) * std::sqrt(2.0) * emb_std;
      }
    params_.layers.resize(config_.n_layers);
    for (auto& p : params_.layers) {
      p.ln1_g = Matrix::Ones(1, d);
      p.ln1_b = Matrix::Zero(1, d);
      p.conv = Matrix::Zero(static_cast<Eigen::Index>(config_.conv_width), d);
      p.conv.row(0).setOnes();
      detail::init_normal(p.w_qkv, d, 3 * d, emb_std, rng);
      p.b_qkv = Matrix::Zero(1, 3 * d);
      p.smear = Matrix::Constant(1, static_cast<Eigen::Index>(config_.n_heads), -1.0);
      detail::init_normal(p.w_out, d, d, emb_std * resid_scale, rng);
      p.b_out = Matrix::Zero(1, d);
      p.ln2_g = Matrix::Ones(1, d);
      p.ln2_b = Matrix::Zero(1, d);
      detail::init_normal(p.w_fc, d, f, emb_std, rng);
      p.b_fc = Matrix::Zero(1, f);
      detail::init_normal(p.w_proj, f, d, resid_scale / std::sqrt(static_cast<double>(f)), rng);
      p.b_proj = Matrix::Zero(1, d);
    }
    params_.lnf_g = Matrix::Ones(1, d);
    params_.lnf_b = Matrix::Zero(1, d);
  }

  TinyLM(const TinyLMConfig& config, ModelParams params, bool frozen)
      : config_(config), params_(std::move(params)), frozen_(frozen) {
    config_.validate();
    check_shapes();
  }

  const TinyLMConfig& config() const { return config_; }
  const ModelParams& params() const { return params_; }
  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }

  /// Mutable access for training; refused once frozen.
  ModelParams& mutable_params() {
    if (frozen_) throw Error("model is frozen");
    return params_;
  }

  std::size_t dim() const { return config_.model_dim; }

  Matrix embed(std::span<const TokenId> ids) const {
    Matrix rows(static_cast<Eigen::Index>(ids.size()), static_cast<Eigen::Index>(config_.model_dim));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= config_.vocab_size) throw Error("unknown token id");
      rows.row(static_cast<Eigen::Index>(i)) = params_.tok_emb.row(ids[i]);
    }
    return rows;
  }

  /// Full logits (seq_len x vocab_size).
  Matrix forward(const EmbeddedSequence& seq) const {
    detail::ForwardCache cache;
    run_forward(seq, cache);
    return cache.lnf * params_.tok_emb.transpose();
  }

  /// Logits for a single position.
  RowVector logits_at(const EmbeddedSequence& seq, std::size_t position) const {
    if (position >= seq.size()) throw Error("position out of range");
    detail::ForwardCache cache;
    run_forward(seq, cache);
    return cache.lnf.row(static_cast<Eigen::Index>(position)) * params_.tok_emb.transpose();
  }

  /// Weighted cross-entropy over `targets` and its gradient with respect to
  /// the input rows; model parameters are held fixed.
  LossAndGrad loss_and_input_grad(const EmbeddedSequence& seq, std::span<const Target> targets) const {
    return evaluate(seq, targets, true, nullptr);
  }

  double loss(const EmbeddedSequence& seq, std::span<const Target> targets) const {
    return evaluate(seq, targets, false, nullptr).loss;
  }

  /// Loss plus accumulation of parameter gradients into `param_grad`.
  /// Used by pretraining; does not touch the parameters themselves.
  LossAndGrad loss_and_param_grad(const EmbeddedSequence& seq, std::span<const Target> targets,
                                  ModelParams& param_grad) const {
    return evaluate(seq, targets, true, &param_grad);
  }

  /// FNV-1a over the raw bytes of every parameter tensor.
  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    params_.for_each([&](const std::string&, const Matrix& m) {
      h = fnv1a(std::string_view(reinterpret_cast<const char*>(m.data()), sizeof(double) * m.size()), h);
    });
    return h;
  }

  bool all_finite() const {
    bool ok = true;
    params_.for_each([&](const std::string&, const Matrix& m) { ok = ok && m.allFinite(); });
    return ok;
  }

  // Checkpoint: 8-byte magic, u64 header length, JSON header (format tag,
  // config, tensor directory), then little-endian doubles in directory order.
  static constexpr std::string_view kMagic{"TINYLM\0\1", 8};
  static constexpr std::string_view kFormat = "tinylm-checkpoint-v1";

  std::string serialize() const {
    nlohmann::json header;
    header["format"] = kFormat;
    header["config"] = config_;
    header["frozen"] = frozen_;
    nlohmann::json dir = nlohmann::json::array();
    params_.for_each([&](const std::string& n, const Matrix& m) {
      dir.push_back({{"name", n}, {"rows", m.rows()}, {"cols", m.cols()}});
    });
    header["tensors"] = dir;
    const std::string hs = header.dump();
    std::string out(kMagic);
    const std::uint64_t hl = hs.size();
    out.append(reinterpret_cast<const char*>(&hl), sizeof hl);
    out += hs;
    params_.for_each([&](const std::string&, const Matrix& m) {
      out.append(reinterpret_cast<const char*>(m.data()), sizeof(double) * static_cast<std::size_t>(m.size()));
    });
    return out;
  }

  static TinyLM deserialize(std::string_view bytes) {
    if (bytes.size() < 16 || bytes.substr(0, 8) != kMagic) throw Error("not a tinylm checkpoint");
    std::uint64_t hl;
    std::memcpy(&hl, bytes.data() + 8, sizeof hl);
    if (16 + hl > bytes.size()) throw Error("truncated checkpoint header");
    const auto header = nlohmann::json::parse(bytes.substr(16, hl));
    if (header.at("format") != kFormat) throw Error("unsupported checkpoint format");
    TinyLM model(header.at("config").get<TinyLMConfig>());
    std::size_t off = 16 + hl;
    const auto& dir = header.at("tensors");
    std::size_t idx = 0;
    model.params_.for_each([&](const std::string& n, Matrix& m) {
      if (idx >= dir.size() || dir[idx].at("name") != n) throw Error("checkpoint tensor mismatch at " + n);
      const auto r = dir[idx].at("rows").get<Eigen::Index>();
      const auto c = dir[idx].at("cols").get<Eigen::Index>();
      if (r != m.rows() || c != m.cols()) throw Error("checkpoint shape mismatch at " + n);
      const std::size_t nbytes = sizeof(double) * static_cast<std::size_t>(r * c);
      if (off + nbytes > bytes.size()) throw Error("truncated checkpoint data");
      std::memcpy(m.data(), bytes.data() + off, nbytes);
      off += nbytes;
      ++idx;
    });
    if (off != bytes.size()) throw Error("trailing bytes in checkpoint");
    model.frozen_ = header.at("frozen").get<bool>();
    return model;
  }

  void save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }
  static TinyLM load(const std::filesystem::path& path) { return deserialize(read_file(path)); }

 private:
  void check_shapes() const {
    TinyLM ref(config_);
    std::vector<std::pair<Eigen::Index, Eigen::Index>> want, have;
    ref.params_.for_each([&](const std::string&, const Matrix& m) { want.emplace_back(m.rows(), m.cols()); });
    params_.for_each([&](const std::string&, const Matrix& m) { have.emplace_back(m.rows(), m.cols()); });
    if (want != have) throw Error("parameter shapes do not match config");
  }

  void run_forward(const EmbeddedSequence& seq, detail::ForwardCache& cache) const {
    const auto len = static_cast<Eigen::Index>(seq.size());
    if (seq.size() > config_.max_seq_len) throw Error("context overflow");
    if (len == 0) throw Error("empty sequence");
    if (seq.rows.cols() != static_cast<Eigen::Index>(config_.model_dim)) throw Error("row width mismatch");
    if (seq.mask.size() != seq.size()) throw Error("attention mask length mismatch");

    const auto d = static_cast<Eigen::Index>(config_.model_dim);
    const auto hd = static_cast<Eigen::Index>(config_.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    constexpr double kNegInf = -std::numeric_limits<double>::infinity();

    Matrix x = seq.rows + params_.pos_emb.topRows(len);
    cache.layers.resize(config_.n_layers);
    for (std::size_t l = 0; l < config_.n_layers; ++l) {
      const auto& p = params_.layers[l];
      auto& c = cache.layers[l];
      c.ln1 = detail::layer_norm(x, p.ln1_g, p.ln1_b, c.ln1_xhat, c.ln1_rstd);
      // each position mixes only inputs it may attend to
      c.mixed = c.ln1.array().rowwise() * p.conv.row(0).array();
      for (Eigen::Index sft = 1; sft < p.conv.rows(); ++sft)
        for (Eigen::Index i = sft; i < len; ++i)
          if (seq.mask.visible(static_cast<std::size_t>(i), static_cast<std::size_t>(i - sft)))
            c.mixed.row(i).array() += p.conv.row(sft).array() * c.ln1.row(i - sft).array();
      c.qkv = c.mixed * p.w_qkv;
      c.qkv.rowwise() += p.b_qkv.row(0);
      c.attn.resize(len, d);
      c.probs.resize(config_.n_heads);
      c.scores.resize(config_.n_heads);
      for (std::size_t h = 0; h < config_.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * hd;
        auto q = c.qkv.middleCols(off, hd);
        auto k = c.qkv.middleCols(d + off, hd);
        auto v = c.qkv.middleCols(2 * d + off, hd);
        c.scores[h] = (q * k.transpose()) * scale;
        const Matrix& raw = c.scores[h];
        const double mix = detail::sigmoid(p.smear(0, static_cast<Eigen::Index>(h)));
        Matrix s(len, len);
        for (Eigen::Index i = 0; i < len; ++i) {
          for (Eigen::Index j = 0; j < len; ++j) {
            const auto qi = static_cast<std::size_t>(i), kj = static_cast<std::size_t>(j);
            if (!seq.mask.visible(qi, kj)) {
              s(i, j) = kNegInf;
            } else {
              const double prev = (j > 0 && seq.mask.visible(qi, kj - 1)) ? raw(i, j - 1) : raw(i, j);
              s(i, j) = raw(i, j) + mix * (prev - raw(i, j));
            }
          }
          const double m = s.row(i).maxCoeff();
          double z = 0.0;
          for (Eigen::Index j = 0; j < len; ++j) {
            const double e = s(i, j) == kNegInf ? 0.0 : std::exp(s(i, j) - m);
            s(i, j) = e;
            z += e;
          }
          s.row(i) /= z;
        }
        c.attn.middleCols(off, hd).noalias() = s * v;
        c.probs[h] = std::move(s);
      }
      x.noalias() += c.attn * p.w_out;
      x.rowwise() += p.b_out.row(0);
      c.ln2 = detail::layer_norm(x, p.ln2_g, p.ln2_b, c.ln2_xhat, c.ln2_rstd);
      c.fc_pre = c.ln2 * p.w_fc;
      c.fc_pre.rowwise() += p.b_fc.row(0);
      c.fc_act = c.fc_pre.unaryExpr([](double v) { return detail::gelu(v); });
      x.noalias() += c.fc_act * p.w_proj;
      x.rowwise() += p.b_proj.row(0);
    }
    cache.lnf = detail::layer_norm(x, params_.lnf_g, params_.lnf_b, cache.lnf_xhat, cache.lnf_rstd);
  }

  LossAndGrad evaluate(const EmbeddedSequence& seq, std::span<const Target> targets, bool want_grad,
                       ModelParams* pg) const {
    if (targets.empty()) throw Error("no supervision");
    for (const auto& t : targets) {
      if (t.position >= seq.size()) throw Error("target position out of range");
      if (t.token < 0 || static_cast<std::size_t>(t.token) >= config_.vocab_size) throw Error("unknown token id");
      if (!(t.weight >= 0.0)) throw Error("target weight must be non-negative");
    }
    detail::ForwardCache cache;
    run_forward(seq, cache);

    const auto len = static_cast<Eigen::Index>(seq.size());
    const auto d = static_cast<Eigen::Index>(config_.model_dim);
    const auto nt = static_cast<Eigen::Index>(targets.size());

    Matrix h(nt, d);
    for (Eigen::Index t = 0; t < nt; ++t) h.row(t) = cache.lnf.row(static_cast<Eigen::Index>(targets[t].position));
    Matrix logits = h * params_.tok_emb.transpose();

    LossAndGrad out;
    Matrix dlogits(nt, logits.cols());
    for (Eigen::Index t = 0; t < nt; ++t) {
      const double m = logits.row(t).maxCoeff();
      auto e = (logits.row(t).array() - m).exp();
      const double z = e.sum();
      const double w = targets[t].weight;
      const double ce = m + std::log(z) - logits(t, targets[t].token);
      out.per_target.push_back(ce);
      out.loss += w * ce;
      dlogits.row(t) = (w / z) * e.matrix();
      dlogits(t, targets[t].token) -= w;
    }
    if (!want_grad) return out;

    Matrix dx = Matrix::Zero(len, d);
    {
      Matrix dh = dlogits * params_.tok_emb;
      Matrix dlnf = Matrix::Zero(len, d);
      for (Eigen::Index t = 0; t < nt; ++t) dlnf.row(static_cast<Eigen::Index>(targets[t].position)) += dh.row(t);
      if (pg) pg->tok_emb.noalias() += dlogits.transpose() * h;
      dx = detail::layer_norm_backward(dlnf, cache.lnf_xhat, cache.lnf_rstd, params_.lnf_g,
                                       pg ? &pg->lnf_g : nullptr, pg ? &pg->lnf_b : nullptr);
    }

    const auto hd = static_cast<Eigen::Index>(config_.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
    for (std::size_t li = config_.n_layers; li-- > 0;) {
      const auto& p = params_.layers[li];
      const auto& c = cache.layers[li];
      LayerParams* g = pg ? &pg->layers[li] : nullptr;

      // feed-forward block
      Matrix dact = dx * p.w_proj.transpose();
      if (g) {
        g->w_proj.noalias() += c.fc_act.transpose() * dx;
        g->b_proj.row(0) += dx.colwise().sum();
      }
      Matrix dpre = dact.array() * c.fc_pre.unaryExpr([](double v) { return detail::gelu_grad(v); }).array();
      if (g) {
        g->w_fc.noalias() += c.ln2.transpose() * dpre;
        g->b_fc.row(0) += dpre.colwise().sum();
      }
      Matrix dln2 = dpre * p.w_fc.transpose();
      dx += detail::layer_norm_backward(dln2, c.ln2_xhat, c.ln2_rstd, p.ln2_g, g ? &g->ln2_g : nullptr,
                                        g ? &g->ln2_b : nullptr);

      // attention block
      Matrix dattn = dx * p.w_out.transpose();
      if (g) {
        g->w_out.noalias() += c.attn.transpose() * dx;
        g->b_out.row(0) += dx.colwise().sum();
      }
      Matrix dqkv(len, 3 * d);
      for (std::size_t hh = 0; hh < config_.n_heads; ++hh) {
        const auto off = static_cast<Eigen::Index>(hh) * hd;
        const Matrix& prob = c.probs[hh];
        auto q = c.qkv.middleCols(off, hd);
        auto k = c.qkv.middleCols(d + off, hd);
        auto v = c.qkv.middleCols(2 * d + off, hd);
        auto dout = dattn.middleCols(off, hd);
        Matrix dprob = dout * v.transpose();
        dqkv.middleCols(2 * d + off, hd).noalias() = prob.transpose() * dout;
        const Matrix dmixed =
            prob.array() * (dprob.colwise() - (dprob.array() * prob.array()).rowwise().sum().matrix()).array();
        const Matrix& raw = c.scores[hh];
        const auto hi = static_cast<Eigen::Index>(hh);
        const double mix = detail::sigmoid(p.smear(0, hi));
        Matrix ds = Matrix::Zero(len, len);
        double dmix = 0.0;
        for (Eigen::Index i = 0; i < len; ++i)
          for (Eigen::Index j = 0; j <= i; ++j) {
            const double gm = dmixed(i, j);
            if (gm == 0.0) continue;
            const auto qi = static_cast<std::size_t>(i), kj = static_cast<std::size_t>(j);
            if (j > 0 && seq.mask.visible(qi, kj - 1)) {
              ds(i, j) += (1.0 - mix) * gm;
              ds(i, j - 1) += mix * gm;
              dmix += gm * (raw(i, j - 1) - raw(i, j));
            } else {
              ds(i, j) += gm;
            }
          }
        if (g) g->smear(0, hi) += dmix * mix * (1.0 - mix);
        ds *= scale;
        dqkv.middleCols(off, hd).noalias() = ds * k;
        dqkv.middleCols(d + off, hd).noalias() = ds.transpose() * q;
      }
      if (g) {
        g->w_qkv.noalias() += c.mixed.transpose() * dqkv;
        g->b_qkv.row(0) += dqkv.colwise().sum();
      }
      const Matrix dmixed_in = dqkv * p.w_qkv.transpose();
      Matrix dln1 = dmixed_in.array().rowwise() * p.conv.row(0).array();
      if (g) g->conv.row(0) += (dmixed_in.array() * c.ln1.array()).colwise().sum().matrix();
      for (Eigen::Index sft = 1; sft < p.conv.rows(); ++sft)
        for (Eigen::Index i = sft; i < len; ++i)
          if (seq.mask.visible(static_cast<std::size_t>(i), static_cast<std::size_t>(i - sft))) {
            dln1.row(i - sft).array() += p.conv.row(sft).array() * dmixed_in.row(i).array();
            if (g) g->conv.row(sft).array() += c.ln1.row(i - sft).array() * dmixed_in.row(i).array();
          }
      dx += detail::layer_norm_backward(dln1, c.ln1_xhat, c.ln1_rstd, p.ln1_g, g ? &g->ln1_g : nullptr,
                                        g ? &g->ln1_b : nullptr);
    }
    if (pg) pg->pos_emb.topRows(len) += dx;
    out.grad = std::move(dx);
    return out;
  }

  TinyLMConfig config_;
  ModelParams params_;
  bool frozen_ = false;
};

}  // namespace cpt
