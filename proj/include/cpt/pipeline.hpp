#pragma once

// Configuration and the end-to-end commands behind the CLI. Every artifact
// lands under <out>/<kind>/<hash>/ where the hash covers exactly the config
// sections that determine it.

#include <cstdlib>
#include <iostream>
#include <set>

#include <nlohmann/json.hpp>

#include "cpt/evaluator.hpp"

namespace cpt {

using nlohmann::json;

struct DatasetConfig {
  std::string name;
  std::string kind;  // "setclass" | "sentiment"
  SetClassSpec setclass;
  SentimentSpec sentiment;
  std::size_t train_per_class = 2;

  std::size_t n_classes() const { return kind == "sentiment" ? 2 : setclass.classes; }
};

struct AblationConfig {
  std::vector<std::size_t> shots{2, 4, 6};
  std::string preset = "table4";  // "table4" | "base"
};

struct RunConfig {
  std::uint64_t seed = 0;
  std::string out_dir = "cpt_out";
  std::size_t workers = 1;
  TinyLMConfig model;
  PretrainCorpusSpec corpus;
  PretrainOptions pretrain;
  bool freeze_word_rows = true;
  std::vector<DatasetConfig> datasets;
  ExperimentGrid grid;
  MethodSettings settings;
  AblationConfig ablation;
  json raw;  // validated JSON, defaults filled in
};

/// Every accepted key with its default value.
inline json default_config_json() {
  return json::parse(R"({
    "seed": 0,
    "out_dir": "cpt_out",
    "workers": 1,
    "model": {"model_dim": 64, "n_layers": 4, "n_heads": 4, "max_seq_len": 256, "ff_dim": 256,
              "conv_width": 3},
    "pretrain": {
      "steps": 4000, "lr": 0.002, "batch_size": 16, "optimizer": "adam", "warmup_steps": 100,
      "grad_clip": 1.0, "freeze_word_rows": true,
      "corpus": {"pool_words": 1800, "word_length": [4, 7], "induction_sequences": 1500,
                 "episode_sequences": 8000, "min_stream_len": 24, "max_stream_len": 64,
                 "max_episode_len": 200}
    },
    "datasets": [
      {"name": "setclass", "kind": "setclass", "classes": 5, "words_per_class": 5, "words_per_input": 4,
       "word_length": [4, 7], "train_per_class": 2},
      {"name": "sentiment", "kind": "sentiment", "words_per_polarity": 8, "filler_words": 16,
       "sentence_length": 6, "polar_words_per_sentence": 2, "word_length": [4, 7], "train_per_class": 4}
    ],
    "grid": {"methods": ["ICL", "PT", "IPT", "CPT"], "shots": [2, 4, 6], "n_templates": 10, "n_seeds": 3},
    "cpt": {"lr": 0.1, "epochs": 25, "loss_scope": "train_plus_all_context", "weighting": "decay",
            "gamma": 0.95, "train_multiplier": 1.0, "projection": "token_wise", "input_eps": 0.1,
            "format_eps": 0.1, "updated_tokens": "input_and_format", "mask_training_example": false},
    "pt": {"lr": 0.01, "lr_grid": [0.001, 0.01, 0.1], "epochs": 25, "n_tokens": 8},
    "ipt": {"lr": 0.01, "lr_grid": [0.001, 0.01, 0.1], "epochs": 25, "n_tokens": 8},
    "eval": {"loss_trace_examples": 50},
    "ablation": {"shots": [2, 4, 6], "preset": "table4"}
  })");
}

inline json default_dataset_json(const std::string& kind) {
  const auto d = default_config_json()["datasets"];
  for (const auto& e : d)
    if (e["kind"] == kind) return e;
  throw Error("datasets[].kind must be \"setclass\" or \"sentiment\"");
}

inline json cpt_config_json(const CPTConfig& c) {
  return {{"lr", c.lr},
          {"epochs", c.epochs},
          {"loss_scope", c.loss.scope},
          {"weighting", c.loss.weighting},
          {"gamma", c.loss.gamma},
          {"train_multiplier", c.loss.train_multiplier},
          {"projection", c.projection},
          {"input_eps", c.input_eps},
          {"format_eps", c.format_eps},
          {"updated_tokens", c.updated_tokens},
          {"mask_training_example", c.mask_training_example}};
}

namespace detail {

/// Fills defaults into `user` and rejects keys absent from `schema`.
inline json merge_checked(const json& schema, const json& user, const std::string& path) {
  if (!user.is_object()) throw Error("config key " + path + " must be an object");
  json out = schema;
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = path.empty() ? it.key() : path + "." + it.key();
    if (!schema.contains(it.key())) throw Error("unknown config key: " + key);
    const json& def = schema[it.key()];
    if (def.is_object()) {
      out[it.key()] = merge_checked(def, it.value(), key);
    } else if (it.key() == "datasets") {
      if (!it.value().is_array() || it.value().empty()) throw Error("config key datasets must be a non-empty array");
      json arr = json::array();
      for (std::size_t i = 0; i < it.value().size(); ++i) {
        const json& e = it.value()[i];
        const std::string ek = key + "[" + std::to_string(i) + "]";
        if (!e.is_object() || !e.contains("kind")) throw Error("config key " + ek + ".kind is required");
        arr.push_back(merge_checked(default_dataset_json(e["kind"].get<std::string>()), e, ek));
      }
      out[it.key()] = arr;
    } else {
      const bool same = (def.is_number() && it.value().is_number()) || def.type() == it.value().type();
      if (!same) throw Error("config key " + key + " has the wrong type");
      out[it.key()] = it.value();
    }
  }
  return out;
}

template <class T>
T get_key(const json& j, const std::string& key, const std::string& path) {
  try {
    return j.at(key).get<T>();
  } catch (const json::exception&) {
    throw Error("config key " + path + "." + key + " has an invalid value");
  }
}

template <class E>
E get_enum(const json& j, const std::string& key, const std::string& path, std::initializer_list<const char*> allowed) {
  const auto s = get_key<std::string>(j, key, path);
  for (const char* a : allowed)
    if (s == a) return json(s).get<E>();
  throw Error("config key " + path + "." + key + " has an invalid value: " + s);
}

}  // namespace detail

/// Parses and validates a config; `j` may omit any key.
inline RunConfig parse_config(const json& j) {
  RunConfig c;
  c.raw = detail::merge_checked(default_config_json(), j, "");
  const json& r = c.raw;
  using detail::get_key;
  c.seed = get_key<std::uint64_t>(r, "seed", "");
  c.out_dir = get_key<std::string>(r, "out_dir", "");
  c.workers = get_key<std::size_t>(r, "workers", "");
  if (c.workers < 1) throw Error("config key workers must be at least 1");

  const json& m = r["model"];
  c.model.model_dim = get_key<std::size_t>(m, "model_dim", "model");
  c.model.n_layers = get_key<std::size_t>(m, "n_layers", "model");
  c.model.n_heads = get_key<std::size_t>(m, "n_heads", "model");
  c.model.max_seq_len = get_key<std::size_t>(m, "max_seq_len", "model");
  c.model.ff_dim = get_key<std::size_t>(m, "ff_dim", "model");
  c.model.conv_width = get_key<std::size_t>(m, "conv_width", "model");
  c.model.seed = derive_seed(c.seed, "model");
  {
    TinyLMConfig probe = c.model;
    probe.vocab_size = 1;
    probe.validate();
  }

  const json& p = r["pretrain"];
  c.pretrain.steps = get_key<std::size_t>(p, "steps", "pretrain");
  c.pretrain.lr = get_key<double>(p, "lr", "pretrain");
  c.pretrain.batch_size = get_key<std::size_t>(p, "batch_size", "pretrain");
  const auto opt = get_key<std::string>(p, "optimizer", "pretrain");
  if (opt != "adam" && opt != "sgd") throw Error("config key pretrain.optimizer must be \"adam\" or \"sgd\"");
  c.pretrain.optimizer = opt == "adam" ? PretrainOptimizer::Adam : PretrainOptimizer::Sgd;
  c.pretrain.warmup_steps = get_key<std::size_t>(p, "warmup_steps", "pretrain");
  c.pretrain.grad_clip = get_key<double>(p, "grad_clip", "pretrain");
  c.pretrain.seed = derive_seed(c.seed, "pretrain");
  c.freeze_word_rows = get_key<bool>(p, "freeze_word_rows", "pretrain");
  if (c.pretrain.batch_size < 1) throw Error("config key pretrain.batch_size must be at least 1");
  if (!(c.pretrain.lr > 0)) throw Error("config key pretrain.lr must be positive");

  const json& cs = p["corpus"];
  c.corpus.pool_words = get_key<std::size_t>(cs, "pool_words", "pretrain.corpus");
  c.corpus.word_length = get_key<LengthRange>(cs, "word_length", "pretrain.corpus");
  c.corpus.induction_sequences = get_key<std::size_t>(cs, "induction_sequences", "pretrain.corpus");
  c.corpus.episode_sequences = get_key<std::size_t>(cs, "episode_sequences", "pretrain.corpus");
  c.corpus.min_stream_len = get_key<std::size_t>(cs, "min_stream_len", "pretrain.corpus");
  c.corpus.max_stream_len = get_key<std::size_t>(cs, "max_stream_len", "pretrain.corpus");
  c.corpus.max_episode_len = get_key<std::size_t>(cs, "max_episode_len", "pretrain.corpus");
  c.corpus.seed = derive_seed(c.seed, "corpus");
  if (c.corpus.min_stream_len < 8 || c.corpus.min_stream_len > c.corpus.max_stream_len)
    throw Error("config key pretrain.corpus.min_stream_len must be in [8, max_stream_len]");

  std::set<std::string> names;
  for (std::size_t i = 0; i < r["datasets"].size(); ++i) {
    const json& d = r["datasets"][i];
    const std::string path = "datasets[" + std::to_string(i) + "]";
    DatasetConfig dc;
    dc.name = get_key<std::string>(d, "name", path);
    dc.kind = get_key<std::string>(d, "kind", path);
    if (dc.name.empty() || dc.name.find_first_of("/\\. ") != std::string::npos)
      throw Error("config key " + path + ".name must be a plain non-empty name");
    if (!names.insert(dc.name).second) throw Error("config key " + path + ".name is duplicated");
    dc.train_per_class = get_key<std::size_t>(d, "train_per_class", path);
    if (dc.train_per_class < 1) throw Error("config key " + path + ".train_per_class must be at least 1");
    const auto seed = derive_seed(c.seed, "dataset:" + dc.name);
    if (dc.kind == "setclass") {
      dc.setclass.classes = get_key<std::size_t>(d, "classes", path);
      dc.setclass.words_per_class = get_key<std::size_t>(d, "words_per_class", path);
      dc.setclass.words_per_input = get_key<std::size_t>(d, "words_per_input", path);
      dc.setclass.word_length = get_key<LengthRange>(d, "word_length", path);
      dc.setclass.seed = seed;
      dc.setclass.validate();
    } else {
      dc.sentiment.words_per_polarity = get_key<std::size_t>(d, "words_per_polarity", path);
      dc.sentiment.filler_words = get_key<std::size_t>(d, "filler_words", path);
      dc.sentiment.sentence_length = get_key<std::size_t>(d, "sentence_length", path);
      dc.sentiment.polar_words_per_sentence = get_key<std::size_t>(d, "polar_words_per_sentence", path);
      dc.sentiment.word_length = get_key<LengthRange>(d, "word_length", path);
      dc.sentiment.seed = seed;
      dc.sentiment.validate();
    }
    c.datasets.push_back(dc);
  }

  const json& g = r["grid"];
  c.grid.methods.clear();
  for (const auto& s : get_key<std::vector<std::string>>(g, "methods", "grid")) {
    try {
      c.grid.methods.push_back(parse_method(s));
    } catch (const Error&) {
      throw Error("config key grid.methods has an invalid value: " + s);
    }
  }
  c.grid.shots = get_key<std::vector<std::size_t>>(g, "shots", "grid");
  c.grid.n_templates = get_key<std::size_t>(g, "n_templates", "grid");
  c.grid.n_seeds = get_key<std::size_t>(g, "n_seeds", "grid");
  c.grid.root_seed = derive_seed(c.seed, "grid");
  c.grid.validate();
  if (c.grid.n_templates > default_template_pool().size())
    throw Error("config key grid.n_templates exceeds the template pool (" +
                std::to_string(default_template_pool().size()) + ")");

  const json& k = r["cpt"];
  auto& cpt = c.settings.cpt;
  cpt.lr = get_key<double>(k, "lr", "cpt");
  cpt.epochs = get_key<std::size_t>(k, "epochs", "cpt");
  cpt.loss.scope = detail::get_enum<LossScope>(k, "loss_scope", "cpt",
                                              {"train_only", "train_plus_one_random", "train_plus_all_context"});
  cpt.loss.weighting = detail::get_enum<Weighting>(k, "weighting", "cpt", {"decay", "mean", "equal"});
  cpt.loss.gamma = get_key<double>(k, "gamma", "cpt");
  cpt.loss.train_multiplier = get_key<double>(k, "train_multiplier", "cpt");
  cpt.projection = detail::get_enum<ProjectionType>(k, "projection", "cpt", {"token_wise", "all_tokens"});
  cpt.input_eps = get_key<double>(k, "input_eps", "cpt");
  cpt.format_eps = get_key<double>(k, "format_eps", "cpt");
  cpt.updated_tokens =
      detail::get_enum<UpdatedTokens>(k, "updated_tokens", "cpt", {"input", "format", "input_and_format"});
  cpt.mask_training_example = get_key<bool>(k, "mask_training_example", "cpt");
  try {
    cpt.validate();
  } catch (const Error& e) {
    throw Error(std::string("config key cpt: ") + e.what());
  }
  c.raw["cpt"] = cpt_config_json(cpt);

  for (const char* name : {"pt", "ipt"}) {
    auto& sp = std::string(name) == "pt" ? c.settings.pt : c.settings.ipt;
    sp.lr = get_key<double>(r[name], "lr", name);
    sp.lr_grid = get_key<std::vector<double>>(r[name], "lr_grid", name);
    sp.epochs = get_key<std::size_t>(r[name], "epochs", name);
    sp.n_tokens = get_key<std::size_t>(r[name], "n_tokens", name);
    if (sp.n_tokens < 1) throw Error(std::string("config key ") + name + ".n_tokens must be at least 1");
    if (!(sp.lr >= 0)) throw Error(std::string("config key ") + name + ".lr must be non-negative");
    for (double lr : sp.lr_grid)
      if (!(lr >= 0)) throw Error(std::string("config key ") + name + ".lr_grid entries must be non-negative");
  }
  c.settings.loss_trace_examples = get_key<std::size_t>(r["eval"], "loss_trace_examples", "eval");

  c.ablation.shots = get_key<std::vector<std::size_t>>(r["ablation"], "shots", "ablation");
  c.ablation.preset = get_key<std::string>(r["ablation"], "preset", "ablation");
  if (c.ablation.shots.empty()) throw Error("config key ablation.shots must be non-empty");
  if (c.ablation.preset != "table4" && c.ablation.preset != "base")
    throw Error("config key ablation.preset must be \"table4\" or \"base\"");

  for (const auto& d : c.datasets)
    for (std::size_t s : c.grid.shots)
      if (s > d.train_per_class * d.n_classes())
        throw Error("config key grid.shots: " + std::to_string(s) + " exceeds the training pool of " + d.name);
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error("config " + path.string() + " is not valid JSON: " + e.what());
  }
  return parse_config(j);
}

/// Root seed, output dir and worker overrides (flags beat environment).
inline void apply_overrides(RunConfig& c, std::optional<std::uint64_t> seed, std::optional<std::string> out,
                            std::optional<std::size_t> workers) {
  json j = c.raw;
  if (const char* env = std::getenv("CPT_OUT_DIR"); env && *env) j["out_dir"] = env;
  if (const char* env = std::getenv("CPT_WORKERS"); env && *env) {
    try {
      j["workers"] = std::stoul(env);
    } catch (const std::exception&) {
      throw Error("CPT_WORKERS must be a positive integer");
    }
  }
  if (seed) j["seed"] = *seed;
  if (out) j["out_dir"] = *out;
  if (workers) j["workers"] = *workers;
  c = parse_config(j);
}

// ---- hashing and paths ----

inline std::string hash_json(const json& j) { return hex64(fnv1a(j.dump())); }

inline json data_key_json(const RunConfig& c) {
  return {{"seed", c.raw["seed"]}, {"corpus", c.raw["pretrain"]["corpus"]}, {"datasets", c.raw["datasets"]}};
}
inline json model_key_json(const RunConfig& c) {
  return {{"seed", c.raw["seed"]}, {"model", c.raw["model"]}, {"pretrain", c.raw["pretrain"]},
          {"datasets", c.raw["datasets"]}};
}
inline json run_key_json(const RunConfig& c) {
  json j = c.raw;
  j.erase("out_dir");
  j.erase("workers");
  j.erase("ablation");
  return j;
}
inline json ablation_key_json(const RunConfig& c) {
  json j = c.raw;
  j.erase("out_dir");
  j.erase("workers");
  return j;
}

struct Paths {
  std::filesystem::path model_dir, data_dir, run_dir, ablation_dir;
  std::string model_key, data_key, run_key, ablation_key;
};

inline Paths paths_for(const RunConfig& c) {
  Paths p;
  p.model_key = hash_json(model_key_json(c));
  p.data_key = hash_json(data_key_json(c));
  p.run_key = hash_json(run_key_json(c));
  p.ablation_key = hash_json(ablation_key_json(c));
  const std::filesystem::path out(c.out_dir);
  p.model_dir = out / "models" / p.model_key;
  p.data_dir = out / "data" / p.data_key;
  p.run_dir = out / "runs" / p.run_key;
  p.ablation_dir = out / "ablations" / p.ablation_key;
  return p;
}

// ---- datasets and vocabulary ----

/// All configured datasets, pairwise word-disjoint and disjoint from the
/// pretraining pool.
inline std::vector<LabeledDataset> generate_datasets(const RunConfig& c) {
  const auto pool = pretraining_pool(c.corpus);
  std::unordered_set<std::string> taken(pool.begin(), pool.end());
  for (const auto& w : template_words()) taken.insert(w);
  for (const auto& w : instruction_words()) taken.insert(w);
  std::vector<LabeledDataset> out;
  for (const auto& d : c.datasets) {
    const std::size_t n_train = d.train_per_class * d.n_classes();
    const std::size_t n_test = test_set_size(d.n_classes());
    LabeledDataset ds = d.kind == "setclass" ? generate_dataset(d.setclass, n_train, n_test, taken)
                                             : generate_sentiment_dataset(d.sentiment, n_train, n_test, taken);
    ds.name = d.name;
    for (const auto& w : ds.all_words()) taken.insert(w);
    out.push_back(std::move(ds));
  }
  return out;
}

inline Vocabulary build_pipeline_vocabulary(const RunConfig& c, const std::vector<LabeledDataset>& datasets) {
  std::vector<std::string> corpus = instruction_words();
  for (const auto& w : template_words()) corpus.push_back(w);
  for (const auto& w : pretraining_pool(c.corpus)) corpus.push_back(w);
  for (const auto& ds : datasets)
    for (const auto& w : ds.all_words()) corpus.push_back(w);
  auto reserved = default_reserved();
  for (const auto& l : format_literals()) reserved.push_back(l);
  return build_vocabulary(corpus, reserved);
}

// ---- commands ----

struct Log {
  std::ostream* out = &std::cerr;
  template <class... A>
  void operator()(const A&... a) const {
    if (!out) return;
    ((*out) << ... << a);
    (*out) << "\n";
  }
};

inline std::string file_digest(const std::filesystem::path& p) { return hex64(fnv1a(read_file(p))); }

/// Pretrains (or reuses) the model for this config.
inline std::filesystem::path cmd_pretrain(const RunConfig& c, const Log& log = {}) {
  const auto paths = paths_for(c);
  const auto model_path = paths.model_dir / "model.bin";
  const auto manifest_path = paths.model_dir / "manifest.json";
  if (std::filesystem::exists(model_path) && std::filesystem::exists(manifest_path)) {
    const auto m = json::parse(read_file(manifest_path));
    if (m.value("model_key", "") == paths.model_key && m.value("model_digest", "") == file_digest(model_path)) {
      log("pretrain: up to date ", model_path.string());
      return model_path;
    }
  }
  std::filesystem::create_directories(paths.model_dir);
  const auto datasets = generate_datasets(c);
  const auto vocab = build_pipeline_vocabulary(c, datasets);
  TinyLMConfig mc = c.model;
  mc.vocab_size = vocab.size();
  const auto templates = default_template_pool();
  const auto corpus = make_pretraining_corpus(c.corpus, vocab, templates);

  PretrainOptions opt = c.pretrain;
  if (c.freeze_word_rows) {
    opt.frozen_token_rows.assign(vocab.size(), false);
    for (const auto& w : pretraining_pool(c.corpus)) opt.frozen_token_rows[static_cast<std::size_t>(vocab.id_of(w))] = true;
    for (const auto& ds : datasets)
      for (const auto& w : ds.all_words()) opt.frozen_token_rows[static_cast<std::size_t>(vocab.id_of(w))] = true;
  }
  std::string loss_log = "step,loss\n";
  opt.log_every = 50;
  opt.on_log = [&](std::size_t step, double loss) {
    loss_log += std::to_string(step) + "," + detail::num(loss) + "\n";
    if (step % 500 == 0) log("pretrain: step ", step, "/", opt.steps, " loss ", loss);
  };
  log("pretrain: vocab ", vocab.size(), ", corpus ", corpus.size(), " sequences, ", opt.steps, " steps");
  PretrainReport report;
  const TinyLM model = pretrain(mc, corpus, opt, &report);

  std::vector<TokenId> pool_ids;
  for (const auto& w : pretraining_pool(c.corpus)) pool_ids.push_back(vocab.id_of(w));
  const double probe = induction_probe_accuracy(model, pool_ids, 200, 48, derive_seed(c.seed, "probe"));
  log("pretrain: loss ", report.initial_loss, " -> ", report.final_loss, ", induction probe ", probe);

  vocab.save(paths.model_dir / "vocab.json");
  write_file_atomic(paths.model_dir / "pretrain_log.csv", loss_log);
  model.save(model_path);
  const json manifest = {{"model_key", paths.model_key},
                         {"config", model_key_json(c)},
                         {"model_config", mc},
                         {"model_checksum", hex64(model.checksum())},
                         {"model_digest", file_digest(model_path)},
                         {"vocab_digest", file_digest(paths.model_dir / "vocab.json")},
                         {"initial_loss", report.initial_loss},
                         {"final_loss", report.final_loss},
                         {"induction_probe_accuracy", probe}};
  write_file_atomic(manifest_path, manifest.dump(2) + "\n");
  return model_path;
}

/// Writes train/test JSONL per dataset plus a manifest.
inline std::filesystem::path cmd_gen_data(const RunConfig& c, const Log& log = {}) {
  const auto paths = paths_for(c);
  const auto datasets = generate_datasets(c);
  json manifest = {{"data_key", paths.data_key}, {"config", data_key_json(c)}, {"datasets", json::array()}};
  for (std::size_t i = 0; i < datasets.size(); ++i) {
    const auto& ds = datasets[i];
    const auto dir = paths.data_dir / ds.name;
    std::filesystem::create_directories(dir);
    write_jsonl(dir / "train.jsonl", ds.train);
    write_jsonl(dir / "test.jsonl", ds.test);
    manifest["datasets"].push_back({{"name", ds.name},
                                    {"kind", c.datasets[i].kind},
                                    {"labels", ds.labels},
                                    {"members", ds.members},
                                    {"shared_words", ds.shared_words},
                                    {"n_train", ds.train.size()},
                                    {"n_test", ds.test.size()},
                                    {"train_digest", file_digest(dir / "train.jsonl")},
                                    {"test_digest", file_digest(dir / "test.jsonl")}});
    log("gen-data: ", ds.name, " ", ds.train.size(), " train / ", ds.test.size(), " test -> ", dir.string());
  }
  write_file_atomic(paths.data_dir / "manifest.json", manifest.dump(2) + "\n");
  return paths.data_dir;
}

struct LoadedArtifacts {
  TinyLM model;
  Vocabulary vocab;
  std::vector<LabeledDataset> datasets;
};

inline LoadedArtifacts load_artifacts(const RunConfig& c) {
  const auto paths = paths_for(c);
  const auto model_path = paths.model_dir / "model.bin";
  if (!std::filesystem::exists(model_path))
    throw Error("missing model checkpoint " + model_path.string() + " (run `pretrain` with this config first)");
  const auto manifest_path = paths.data_dir / "manifest.json";
  if (!std::filesystem::exists(manifest_path))
    throw Error("missing dataset manifest " + manifest_path.string() + " (run `gen-data` with this config first)");
  LoadedArtifacts a{TinyLM::load(model_path), Vocabulary::load(paths.model_dir / "vocab.json"), {}};
  const auto manifest = json::parse(read_file(manifest_path));
  for (const auto& d : manifest.at("datasets")) {
    LabeledDataset ds;
    ds.name = d.at("name").get<std::string>();
    ds.labels = d.at("labels").get<std::vector<std::string>>();
    ds.members = d.at("members").get<std::vector<std::vector<std::string>>>();
    ds.shared_words = d.at("shared_words").get<std::vector<std::string>>();
    const auto dir = paths.data_dir / ds.name;
    for (const char* f : {"train", "test"}) {
      const auto file = dir / (std::string(f) + ".jsonl");
      if (!std::filesystem::exists(file)) throw Error("missing dataset file " + file.string());
      if (file_digest(file) != d.at(std::string(f) + "_digest").get<std::string>())
        throw Error("dataset file " + file.string() + " does not match its manifest");
    }
    ds.train = read_jsonl(dir / "train.jsonl");
    ds.test = read_jsonl(dir / "test.jsonl");
    a.datasets.push_back(std::move(ds));
  }
  return a;
}

struct GridOutput {
  std::vector<RunRecord> records;
  std::vector<CellSummary> summary;
  std::vector<LossGap> gaps;
};

/// Runs the grid on one dataset and writes its files into `dir`.
inline GridOutput run_and_write(const LoadedArtifacts& a, const LabeledDataset& ds, const RunConfig& c,
                                const ExperimentGrid& grid, const MethodSettings& settings,
                                const std::filesystem::path& dir, const std::string& key, const Log& log) {
  EvalContext ctx{a.model, a.vocab, ds,
                  select_templates(default_template_pool(), grid.n_templates, derive_seed(c.seed, "templates")),
                  settings, grid.root_seed};
  std::size_t done = 0;
  GridOutput out;
  out.records = run_grid(ctx, grid, c.workers, [&](const RunRecord& r) {
    ++done;
    if (!r.ok()) log("  cell ", r.method.name(), " shots=", r.shots, " t=", r.template_id, " s=", r.seed, " failed: ", r.error);
    if (done % 10 == 0 || done == grid.cell_count()) log("  ", ds.name, ": ", done, "/", grid.cell_count(), " cells");
  });
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "records.csv", records_csv(out.records, key));
  write_file_atomic(dir / "traces.csv", traces_csv(out.records, key));
  write_file_atomic(dir / "timing.csv", timing_csv(out.records, key));
  out.gaps = loss_gap_report(out.records);
  write_file_atomic(dir / "loss_gap.csv", loss_gap_csv(out.gaps, key));
  try {
    out.summary = aggregate(out.records, grid);
  } catch (const Error& e) {
    write_file_atomic(dir / "summary.json", json({{"config_hash", key}, {"error", e.what()}}).dump(2) + "\n");
    throw;
  }
  write_file_atomic(dir / "summary.csv", summary_csv(out.summary, key));
  write_file_atomic(dir / "summary.json", summary_json(out.summary, out.gaps, key).dump(2) + "\n");
  return out;
}

inline std::filesystem::path cmd_run(const RunConfig& c, const Log& log = {}) {
  const auto paths = paths_for(c);
  const auto a = load_artifacts(c);
  std::filesystem::create_directories(paths.run_dir);
  write_file_atomic(paths.run_dir / "config.json", run_key_json(c).dump(2) + "\n");
  bool failed = false;
  for (const auto& ds : a.datasets) {
    log("run: ", ds.name, " (", c.grid.cell_count(), " cells)");
    try {
      const auto out = run_and_write(a, ds, c, c.grid, c.settings, paths.run_dir / ds.name, paths.run_key, log);
      for (const auto& s : out.summary)
        log("  ", s.method.name(), " shots=", s.shots, " acc ", detail::pct(s.mean), "% std ", detail::pct(s.std.overall),
            "/", detail::pct(s.std.templates), "/", detail::pct(s.std.seeds));
    } catch (const Error& e) {
      log("run: ", ds.name, ": ", e.what());
      failed = true;
    }
  }
  if (failed) throw Error("some grid cells failed; see the records.csv error column");
  return paths.run_dir;
}

// ---- ablation ----

struct AblationVariant {
  std::string group;    // loss_tokens | loss_weighting | all_tokens_eps | token_wise_eps | updated_tokens | mask
  std::string setting;  // human-readable row label
  CPTConfig cpt;
};

inline std::string fmt_eps(double x) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%g", x);
  return buf;
}

/// One-axis-at-a-time variations around `base`, in the row order of the
/// reference ablation table. The "base" preset yields only `base`.
inline std::vector<AblationVariant> ablation_variants(const CPTConfig& base, const std::string& preset) {
  if (preset == "base") return {{"base", "base", base}};
  std::vector<AblationVariant> v;
  auto with = [&](auto&& f) {
    CPTConfig c = base;
    f(c);
    return c;
  };
  v.push_back({"loss_tokens", "train_example", with([](CPTConfig& c) { c.loss.scope = LossScope::TrainOnly; })});
  v.push_back({"loss_tokens", "train_example_and_1_random",
               with([](CPTConfig& c) { c.loss.scope = LossScope::TrainPlusOneRandom; })});
  v.push_back({"loss_tokens", "train_example_and_all_context",
               with([](CPTConfig& c) { c.loss.scope = LossScope::TrainPlusAllContext; })});
  v.push_back({"loss_weighting", "mean", with([](CPTConfig& c) { c.loss.weighting = Weighting::Mean; })});
  for (double m : {1.0, 10.0})
    v.push_back({"loss_weighting", "equal_" + fmt_eps(m), with([&](CPTConfig& c) {
                   c.loss.weighting = Weighting::Equal;
                   c.loss.train_multiplier = m;
                 })});
  for (double g : {0.99, 0.95, 0.5})
    v.push_back({"loss_weighting", "decay_" + fmt_eps(g), with([&](CPTConfig& c) {
                   c.loss.weighting = Weighting::Decay;
                   c.loss.gamma = g;
                 })});
  for (double e : {0.001, 0.01, 0.1, 1.0})
    v.push_back({"all_tokens_eps", "input_eps_" + fmt_eps(e), with([&](CPTConfig& c) {
                   c.projection = ProjectionType::AllTokens;
                   c.input_eps = e;
                 })});
  for (auto [ie, fe] : {std::pair{0.01, 0.1}, {0.1, 0.1}, {1.0, 0.1}, {0.1, 0.01}, {0.1, 1.0}})
    v.push_back({"token_wise_eps", "input_" + fmt_eps(ie) + "_format_" + fmt_eps(fe), with([&](CPTConfig& c) {
                   c.projection = ProjectionType::TokenWise;
                   c.input_eps = ie;
                   c.format_eps = fe;
                 })});
  v.push_back({"updated_tokens", "input", with([](CPTConfig& c) { c.updated_tokens = UpdatedTokens::InputOnly; })});
  v.push_back({"updated_tokens", "format", with([](CPTConfig& c) { c.updated_tokens = UpdatedTokens::FormatOnly; })});
  v.push_back({"updated_tokens", "input_and_format",
               with([](CPTConfig& c) { c.updated_tokens = UpdatedTokens::InputAndFormat; })});
  v.push_back({"mask", "mask_training_example", with([](CPTConfig& c) { c.mask_training_example = true; })});
  return v;
}

/// The config a plain `run` would need to reproduce one ablation variant.
inline RunConfig variant_run_config(const RunConfig& c, const CPTConfig& cpt) {
  json j = c.raw;
  j["grid"]["methods"] = {"CPT"};
  j["grid"]["shots"] = c.ablation.shots;
  j["cpt"] = cpt_config_json(cpt);
  return parse_config(j);
}

inline std::filesystem::path cmd_ablate(const RunConfig& c, const Log& log = {}) {
  const auto paths = paths_for(c);
  const auto a = load_artifacts(c);
  const auto variants = ablation_variants(c.settings.cpt, c.ablation.preset);
  std::filesystem::create_directories(paths.ablation_dir);
  write_file_atomic(paths.ablation_dir / "config.json", ablation_key_json(c).dump(2) + "\n");
  bool failed = false;
  for (const auto& ds : a.datasets) {
    std::string table = "config_hash,variant_hash,dataset,group,setting,loss_scope,weighting,gamma,train_multiplier,"
                        "projection,input_eps,format_eps,updated_tokens,mask_training_example,shots,runs,mean_acc_pct,"
                        "std_overall_pct,std_templates_pct,std_seeds_pct\n";
    std::map<std::string, GridOutput> done;  // identical variants are run once
    for (const auto& var : variants) {
      RunConfig vc = variant_run_config(c, var.cpt);
      vc.settings.check_invariants = true;
      const std::string vkey = paths_for(vc).run_key;
      if (!done.count(vkey)) {
        log("ablate: ", ds.name, " ", var.group, "/", var.setting);
        try {
          done[vkey] = run_and_write(a, ds, vc, vc.grid, vc.settings, paths.ablation_dir / ds.name / "variants" / vkey,
                                     vkey, log);
        } catch (const Error& e) {
          log("ablate: ", var.setting, ": ", e.what());
          failed = true;
          continue;
        }
      }
      const json cj = cpt_config_json(var.cpt);
      for (const auto& s : done[vkey].summary) {
        table += paths.ablation_key + "," + vkey + "," + ds.name + "," + var.group + "," + var.setting + "," +
                 cj["loss_scope"].get<std::string>() + "," + cj["weighting"].get<std::string>() + "," +
                 fmt_eps(var.cpt.loss.gamma) + "," + fmt_eps(var.cpt.loss.train_multiplier) + "," +
                 cj["projection"].get<std::string>() + "," + fmt_eps(var.cpt.input_eps) + "," +
                 (var.cpt.projection == ProjectionType::AllTokens ? std::string("-") : fmt_eps(var.cpt.format_eps)) +
                 "," + cj["updated_tokens"].get<std::string>() + "," +
                 (var.cpt.mask_training_example ? "true" : "false") + "," + std::to_string(s.shots) + "," +
                 std::to_string(s.runs) + "," + detail::pct(s.mean) + "," + detail::pct(s.std.overall) + "," +
                 detail::pct(s.std.templates) + "," + detail::pct(s.std.seeds) + "\n";
      }
    }
    write_file_atomic(paths.ablation_dir / ds.name / "ablation.csv", table);
  }
  if (failed) throw Error("some ablation variants failed");
  return paths.ablation_dir;
}

// ---- report ----

/// Merges every run and ablation under `out_dir` into table1.csv (method x
/// shots per dataset) and table4.csv (ablation rows x shots).
inline std::filesystem::path cmd_report(const std::filesystem::path& out_dir, const Log& log = {}) {
  namespace fs = std::filesystem;
  if (!fs::exists(out_dir)) throw Error("results directory " + out_dir.string() + " does not exist");
  auto sorted_dirs = [](const fs::path& p) {
    std::vector<fs::path> v;
    if (fs::exists(p))
      for (const auto& e : fs::directory_iterator(p))
        if (e.is_directory()) v.push_back(e.path());
    std::sort(v.begin(), v.end());
    return v;
  };
  auto split = [](const std::string& line) {
    std::vector<std::string> f;
    std::string cur;
    for (char ch : line) {
      if (ch == ',') f.push_back(cur), cur.clear();
      else cur += ch;
    }
    f.push_back(cur);
    return f;
  };
  auto lines = [](const std::string& text) {
    std::vector<std::string> v;
    std::size_t s = 0;
    while (s < text.size()) {
      auto e = text.find('\n', s);
      if (e == std::string::npos) e = text.size();
      v.push_back(text.substr(s, e - s));
      s = e + 1;
    }
    return v;
  };

  std::string t1 = "run_hash,dataset,method,shots,runs,mean_acc_pct,std_overall_pct,std_templates_pct,std_seeds_pct,cell\n";
  std::size_t n1 = 0;
  for (const auto& run : sorted_dirs(out_dir / "runs"))
    for (const auto& ds : sorted_dirs(run)) {
      const auto f = ds / "summary.csv";
      if (!fs::exists(f)) continue;
      const auto ls = lines(read_file(f));
      for (std::size_t i = 1; i < ls.size(); ++i) {
        const auto x = split(ls[i]);
        if (x.size() != 8) throw Error("malformed summary " + f.string());
        t1 += x[0] + "," + ds.filename().string() + "," + x[1] + "," + x[2] + "," + x[3] + "," + x[4] + "," + x[5] +
              "," + x[6] + "," + x[7] + "," + x[4] + " (" + x[5] + "/" + x[6] + "/" + x[7] + ")\n";
        ++n1;
      }
    }

  std::string t4 = "ablation_hash,dataset,group,setting,loss_scope,weighting,projection,input_eps,format_eps,"
                   "updated_tokens,mask_training_example,shots,mean_acc_pct,std_overall_pct\n";
  std::size_t n4 = 0;
  for (const auto& abl : sorted_dirs(out_dir / "ablations"))
    for (const auto& ds : sorted_dirs(abl)) {
      const auto f = ds / "ablation.csv";
      if (!fs::exists(f)) continue;
      const auto ls = lines(read_file(f));
      for (std::size_t i = 1; i < ls.size(); ++i) {
        const auto x = split(ls[i]);
        if (x.size() != 20) throw Error("malformed ablation table " + f.string());
        const std::string weighting = x[6] == "decay" ? "decay_" + x[7] : x[6] == "equal" ? "equal_" + x[8] : x[6];
        t4 += x[0] + "," + x[2] + "," + x[3] + "," + x[4] + "," + x[5] + "," + weighting + "," + x[9] + "," + x[10] +
              "," + x[11] + "," + x[12] + "," + x[13] + "," + x[14] + "," + x[16] + "," + x[17] + "\n";
        ++n4;
      }
    }
  const auto dir = out_dir / "reports";
  fs::create_directories(dir);
  write_file_atomic(dir / "table1.csv", t1);
  write_file_atomic(dir / "table4.csv", t4);
  log("report: ", n1, " method rows, ", n4, " ablation rows -> ", dir.string());
  return dir;
}

}  // namespace cpt
