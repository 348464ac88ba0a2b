#include "flns/pipeline.hpp"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>

#include "flns/binary_io.hpp"
#include "flns/checkpoint.hpp"
#include "flns/errors.hpp"
#include "json.hpp"

namespace flns {

namespace fs = std::filesystem;
using ojson = nlohmann::ordered_json;

namespace {

std::string join(const std::string& dir, const std::string& name) { return (fs::path(dir) / name).string(); }

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw Error(ErrorCode::kIoError, "cannot create directory " + dir + ": " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
  write_file(path, std::vector<char>(text.begin(), text.end()));
}

// Reads the keys of one config section, rejecting any it does not know.
class Section {
 public:
  Section(const nlohmann::json& j, std::string name) : j_(j), name_(std::move(name)) {
    if (!j_.is_object()) throw Error(ErrorCode::kInvalidConfig, "config section '" + name_ + "' must be an object");
  }
  ~Section() noexcept(false) {
    if (std::uncaught_exceptions()) return;
    for (const auto& [key, value] : j_.items()) {
      if (!seen_.contains(key)) throw Error(ErrorCode::kInvalidConfig, "unknown config key '" + name_ + "." + key + "'");
    }
  }

  template <typename T>
  void get(const std::string& key, T& out) {
    seen_.insert(key);
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw Error(ErrorCode::kInvalidConfig, "config key '" + name_ + "." + key + "' has the wrong type");
    }
  }
  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }
  const nlohmann::json& at(const std::string& key) const { return j_.at(key); }

 private:
  const nlohmann::json& j_;
  std::string name_;
  std::set<std::string> seen_;
};

std::string direction_name(PrecisionDirection d) {
  return d == PrecisionDirection::kPredictionInReference ? "prediction-in-reference" : "reference-in-prediction";
}

PrecisionDirection parse_direction(const std::string& name) {
  if (name == "prediction-in-reference") return PrecisionDirection::kPredictionInReference;
  if (name == "reference-in-prediction") return PrecisionDirection::kReferenceInPrediction;
  throw Error(ErrorCode::kInvalidConfig, "unknown precision direction '" + name + "'");
}

int max_offset(const RunConfig& config) {
  if (config.eval.offsets.empty()) throw Error(ErrorCode::kInvalidConfig, "offset list is empty");
  const int m = *std::max_element(config.eval.offsets.begin(), config.eval.offsets.end());
  return std::max(m, config.prompt_offset);
}

std::vector<std::vector<TokenId>> pick(const std::vector<std::vector<TokenId>>& docs,
                                       const std::vector<std::size_t>& idx) {
  std::vector<std::vector<TokenId>> out;
  out.reserve(idx.size());
  for (const auto i : idx) out.push_back(docs[i]);
  return out;
}

}  // namespace

std::vector<int> RunConfig::eval_layers() const {
  if (!eval.layers.empty()) return eval.layers;
  std::vector<int> layers;
  for (int l = 1; l <= model.n_layers; ++l) layers.push_back(l);
  return layers;
}

std::string RunConfig::to_json() const {
  ojson j;
  j["paths"] = {{"artifacts", artifact_dir},
                {"reports", report_dir},
                {"corpus", corpus_path},
                {"fixed_prompts", fixed_prompts_path},
                {"static", static_dir}};
  j["seed"] = seed;
  j["corpus"] = {{"phrases", language.phrases},
                 {"key_length", language.key_length},
                 {"key_pool", language.key_pool},
                 {"continuation_length", language.continuation_length},
                 {"filler_words", language.filler_words},
                 {"named_phrases", language.include_named_phrases},
                 {"documents", documents},
                 {"min_tokens", min_tokens},
                 {"max_tokens", max_tokens}};
  j["model"] = {{"n_layers", model.n_layers},
                {"d_model", model.d_model},
                {"n_heads", model.n_heads},
                {"max_seq_len", model.max_seq_len},
                {"positional_scheme", positional_scheme_name(model.positional)}};
  j["train"] = {{"steps", train.steps},
                {"batch_size", train.batch_size},
                {"learning_rate", train.learning_rate},
                {"warmup_steps", train.warmup_steps},
                {"min_lr_ratio", train.min_lr_ratio},
                {"clip_norm", train.clip_norm}};
  j["sampling"] = {{"test_fraction", test_fraction}, {"train_samples", train_samples}, {"test_samples", test_samples}};
  j["probes"] = {{"learning_rate", probes.learning_rate},
                 {"batch_size", probes.batch_size},
                 {"epochs", probes.epochs},
                 {"validation_fraction", probes.validation_fraction},
                 {"patience", probes.patience}};
  j["prompts"] = {{"length", prompt_length},
                  {"offset", prompt_offset},
                  {"steps", prompts.steps},
                  {"batch_size", prompts.batch_size},
                  {"learning_rate", prompts.learning_rate},
                  {"init_std", prompts.init_std}};
  j["eval"] = {{"methods", eval.methods},
               {"layers", eval.layers},
               {"offsets", eval.offsets},
               {"ks", eval.ks},
               {"direction", direction_name(eval.direction)},
               {"category_offset", eval.category_offset},
               {"punctuation", eval.punctuation}};
  j["service"] = {{"host", host}, {"port", port}};
  return j.dump(2);
}

std::uint64_t derived_seed(std::uint64_t seed, SeedRole role, std::uint64_t index) {
  // splitmix64 finalizer over a combination of the inputs
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ull * (static_cast<std::uint64_t>(role) * 0x10001ull + index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

RunConfig parse_run_config(std::string_view json_text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json_text);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("run config is not valid JSON: ") + e.what());
  }
  RunConfig c;
  Section top(j, "config");
  if (top.has("paths")) {
    Section s(top.at("paths"), "paths");
    s.get("artifacts", c.artifact_dir);
    s.get("reports", c.report_dir);
    s.get("corpus", c.corpus_path);
    s.get("fixed_prompts", c.fixed_prompts_path);
    s.get("static", c.static_dir);
  }
  top.get("seed", c.seed);
  if (top.has("corpus")) {
    Section s(top.at("corpus"), "corpus");
    s.get("phrases", c.language.phrases);
    s.get("key_length", c.language.key_length);
    s.get("key_pool", c.language.key_pool);
    s.get("continuation_length", c.language.continuation_length);
    s.get("filler_words", c.language.filler_words);
    s.get("named_phrases", c.language.include_named_phrases);
    s.get("documents", c.documents);
    s.get("min_tokens", c.min_tokens);
    s.get("max_tokens", c.max_tokens);
  }
  if (top.has("model")) {
    Section s(top.at("model"), "model");
    s.get("n_layers", c.model.n_layers);
    s.get("d_model", c.model.d_model);
    s.get("n_heads", c.model.n_heads);
    s.get("max_seq_len", c.model.max_seq_len);
    std::string scheme = positional_scheme_name(c.model.positional);
    s.get("positional_scheme", scheme);
    c.model.positional = parse_positional_scheme(scheme);
  }
  if (top.has("train")) {
    Section s(top.at("train"), "train");
    s.get("steps", c.train.steps);
    s.get("batch_size", c.train.batch_size);
    s.get("learning_rate", c.train.learning_rate);
    s.get("warmup_steps", c.train.warmup_steps);
    s.get("min_lr_ratio", c.train.min_lr_ratio);
    s.get("clip_norm", c.train.clip_norm);
  }
  if (top.has("sampling")) {
    Section s(top.at("sampling"), "sampling");
    s.get("test_fraction", c.test_fraction);
    s.get("train_samples", c.train_samples);
    s.get("test_samples", c.test_samples);
  }
  if (top.has("probes")) {
    Section s(top.at("probes"), "probes");
    s.get("learning_rate", c.probes.learning_rate);
    s.get("batch_size", c.probes.batch_size);
    s.get("epochs", c.probes.epochs);
    s.get("validation_fraction", c.probes.validation_fraction);
    s.get("patience", c.probes.patience);
  }
  if (top.has("prompts")) {
    Section s(top.at("prompts"), "prompts");
    s.get("length", c.prompt_length);
    s.get("offset", c.prompt_offset);
    s.get("steps", c.prompts.steps);
    s.get("batch_size", c.prompts.batch_size);
    s.get("learning_rate", c.prompts.learning_rate);
    s.get("init_std", c.prompts.init_std);
  }
  if (top.has("eval")) {
    Section s(top.at("eval"), "eval");
    s.get("methods", c.eval.methods);
    s.get("layers", c.eval.layers);
    s.get("offsets", c.eval.offsets);
    s.get("ks", c.eval.ks);
    std::string direction = direction_name(c.eval.direction);
    s.get("direction", direction);
    c.eval.direction = parse_direction(direction);
    s.get("category_offset", c.eval.category_offset);
    s.get("punctuation", c.eval.punctuation);
  }
  if (top.has("service")) {
    Section s(top.at("service"), "service");
    s.get("host", c.host);
    s.get("port", c.port);
  }
  return c;
}

RunConfig load_run_config(const std::string& path) {
  const auto bytes = read_file(path);
  return parse_run_config(std::string_view(bytes.data(), bytes.size()));
}

void finalize_run_config(RunConfig& c) {
  if (c.eval.methods.empty() || c.eval.offsets.empty() || c.eval.ks.empty()) {
    throw Error(ErrorCode::kInvalidConfig, "experiment matrix must be non-empty");
  }
  for (const int l : c.eval.layers) {
    if (l < 1 || l > c.model.n_layers) throw Error(ErrorCode::kInvalidConfig, "layer " + std::to_string(l) + " out of range");
  }
  for (const int n : c.eval.offsets) {
    if (n < 0) throw Error(ErrorCode::kInvalidConfig, "offsets must be >= 0");
  }
  if (c.prompt_offset < 0 || c.prompt_length < 1) throw Error(ErrorCode::kInvalidConfig, "bad prompt settings");
  if (c.port < 0 || c.port > 65535) throw Error(ErrorCode::kInvalidConfig, "port out of range");
  c.model.seed = derived_seed(c.seed, SeedRole::kModelInit);
  c.train.seed = derived_seed(c.seed, SeedRole::kTraining);
}

std::vector<FixedPromptSpec> default_fixed_prompt_specs() {
  return {
      {"hello", "Hello! Could you please tell me more about \"", "alpha beta gamma delta"},
      {"multi-tokens", "The multi-tokens present here are \"", "back to the future 1985"},
      {"concepts", "The concepts in this hidden state listed are: (", "marty mcfly from hill valley"},
      {"describing", "<|endoftext|> This state is describing about the following concept:",
       "madison square garden is in new york ."},
  };
}

std::string model_path(const RunConfig& c) { return join(c.artifact_dir, "model.flns"); }
std::string corpus_file(const RunConfig& c) { return join(c.artifact_dir, "corpus.txt"); }
std::string prompt_path(const RunConfig& c, int layer) {
  return join(c.artifact_dir, "prompt_l" + std::to_string(layer) + ".flns");
}
std::string probe_path(const RunConfig& c, ProbeKind kind, int layer, int offset) {
  return join(c.artifact_dir, "probe_" + probe_kind_name(kind) + "_l" + std::to_string(layer) + "_n" +
                                  std::to_string(offset) + ".flns");
}

CorpusData build_corpus(const RunConfig& c) {
  CorpusData data;
  if (!c.corpus_path.empty()) {
    data.documents = read_corpus(c.corpus_path);
    data.tokenizer = Tokenizer::from_documents(data.documents);
  } else {
    const auto language = make_template_language(c.language, derived_seed(c.seed, SeedRole::kLanguage));
    auto generated =
        generate_documents(language, c.documents, c.min_tokens, c.max_tokens, derived_seed(c.seed, SeedRole::kCorpus));
    data.documents = std::move(generated.documents);
    data.deterministic = std::move(generated.deterministic);
    data.tokenizer = language.tokenizer();
  }
  data.tokens = tokenize_documents(data.tokenizer, data.documents);
  data.split = split_documents(data.documents.size(), c.test_fraction, derived_seed(c.seed, SeedRole::kSplit));
  return data;
}

CorpusData stored_corpus(const RunConfig& c, const Tokenizer& tokenizer) {
  CorpusData data;
  data.tokenizer = tokenizer;
  data.documents = read_corpus(corpus_file(c));
  data.tokens = tokenize_documents(tokenizer, data.documents);
  data.split = split_documents(data.documents.size(), c.test_fraction, derived_seed(c.seed, SeedRole::kSplit));
  return data;
}

std::vector<EvalSample> draw_train_samples(const RunConfig& c, const TransformerModel& model, const CorpusData& corpus) {
  return sample_positions(model, corpus.tokens, corpus.split.train, c.train_samples, max_offset(c),
                          derived_seed(c.seed, SeedRole::kTrainSamples));
}

std::vector<EvalSample> draw_test_samples(const RunConfig& c, const TransformerModel& model, const CorpusData& corpus) {
  return sample_positions(model, corpus.tokens, corpus.split.test, c.test_samples, max_offset(c),
                          derived_seed(c.seed, SeedRole::kTestSamples));
}

StageSummary train_model_stage(const RunConfig& c) {
  RunConfig config = c;
  finalize_run_config(config);
  const CorpusData corpus = build_corpus(config);
  config.model.d_vocab = static_cast<int>(corpus.tokenizer.size());
  const auto train_docs = pick(corpus.tokens, corpus.split.train);
  const TrainResult trained = train_toy_model(train_docs, config.model, corpus.tokenizer, config.train);

  ensure_dir(config.artifact_dir);
  StageSummary summary;
  save_model(trained.model, model_path(config));
  write_corpus(corpus_file(config), corpus.documents);
  std::string log = "step,loss\n";
  for (std::size_t i = 0; i < trained.losses.size(); ++i) {
    char line[64];
    std::snprintf(line, sizeof line, "%zu,%.9g\n", i, trained.losses[i]);
    log += line;
  }
  const std::string log_path = join(config.artifact_dir, "train_log.csv");
  write_text(log_path, log);
  summary.outputs = {model_path(config), corpus_file(config), log_path};

  if (!trained.losses.empty()) summary.metrics.emplace_back("final_loss", trained.losses.back());
  if (!corpus.deterministic.empty()) {
    std::vector<std::vector<bool>> masks;
    for (const auto i : corpus.split.test) masks.push_back(corpus.deterministic[i]);
    summary.metrics.emplace_back("heldout_template_accuracy",
                                 next_token_accuracy(trained.model, pick(corpus.tokens, corpus.split.test), masks));
  }
  return summary;
}

StageSummary train_probes_stage(const RunConfig& c) {
  RunConfig config = c;
  finalize_run_config(config);
  const TransformerModel model = load_model(model_path(config));
  const CorpusData corpus = stored_corpus(config, model.tokenizer);
  const auto samples = draw_train_samples(config, model, corpus);
  StageSummary summary;
  for (const int l : config.eval_layers()) {
    for (const int n : config.eval.offsets) {
      const ProbeDataset dataset = build_probe_dataset(model, samples, l, n);
      for (const ProbeKind kind : {ProbeKind::kDirectVocab, ProbeKind::kHiddenState}) {
        ProbeTrainConfig pc = config.probes;
        pc.seed = derived_seed(config.seed, SeedRole::kProbes,
                               static_cast<std::uint64_t>(l) * 1000 + static_cast<std::uint64_t>(n) * 2 +
                                   static_cast<std::uint64_t>(kind));
        const auto result = train_linear_probe(dataset, kind, pc);
        const std::string path = probe_path(config, kind, l, n);
        save_probe(result.probe, path);
        summary.outputs.push_back(path);
        if (!result.validation_losses.empty()) {
          summary.metrics.emplace_back(
              "probe_" + probe_kind_name(kind) + "_l" + std::to_string(l) + "_n" + std::to_string(n) + "_val_loss",
              *std::min_element(result.validation_losses.begin(), result.validation_losses.end()));
        }
      }
    }
  }
  return summary;
}

StageSummary train_prompts_stage(const RunConfig& c) {
  RunConfig config = c;
  finalize_run_config(config);
  const TransformerModel model = load_model(model_path(config));
  const CorpusData corpus = stored_corpus(config, model.tokenizer);
  const auto samples = draw_train_samples(config, model, corpus);
  StageSummary summary;
  for (const int l : config.eval_layers()) {
    SoftPromptTrainConfig sc = config.prompts;
    sc.seed = derived_seed(config.seed, SeedRole::kPrompts, static_cast<std::uint64_t>(l));
    const auto result = train_soft_prompt(model, samples, l, config.prompt_length, config.prompt_offset, sc);
    const std::string path = prompt_path(config, l);
    save_soft_prompt(result.prompt, path);
    summary.outputs.push_back(path);
    summary.metrics.emplace_back("prompt_l" + std::to_string(l) + "_final_loss", result.prompt.final_loss);
  }
  return summary;
}

Artifacts load_artifacts(const RunConfig& c, const TransformerModel& model) {
  Artifacts a;
  static const std::regex probe_re(R"(probe_(vocab|hidden)_l(\d+)_n(\d+)\.flns)");
  static const std::regex prompt_re(R"(prompt_l(\d+)\.flns)");
  std::vector<fs::path> files;
  std::error_code ec;
  for (const auto& entry : fs::directory_iterator(c.artifact_dir, ec)) files.push_back(entry.path());
  if (ec) throw Error(ErrorCode::kIoError, "cannot list artifact directory " + c.artifact_dir);
  std::sort(files.begin(), files.end());
  for (const auto& path : files) {
    const std::string name = path.filename().string();
    std::smatch m;
    if (std::regex_match(name, m, probe_re)) {
      LinearProbe p = load_probe(path.string());
      const ProbeKind kind = parse_probe_kind(m[1].str());
      const int layer = std::stoi(m[2].str());
      const int offset = std::stoi(m[3].str());
      if (p.kind != kind || p.source_layer != layer || p.offset != offset) {
        throw Error(ErrorCode::kCorruptCheckpoint, name + " does not match its file name");
      }
      a.probes.emplace(std::make_tuple(kind, layer, offset), std::move(p));
    } else if (std::regex_match(name, m, prompt_re)) {
      SoftPrompt p = load_soft_prompt(path.string());
      if (p.layer != std::stoi(m[1].str())) throw Error(ErrorCode::kCorruptCheckpoint, name + " does not match its file name");
      a.soft_prompts.emplace(p.layer, std::move(p));
    }
  }
  const auto specs = c.fixed_prompts_path.empty() ? default_fixed_prompt_specs() : read_fixed_prompt_specs(c.fixed_prompts_path);
  a.fixed_prompts = resolve_fixed_prompts(model.tokenizer, specs);
  if (fs::exists(corpus_file(c))) {
    const CorpusData corpus = stored_corpus(c, model.tokenizer);
    a.bigram = BigramTable::build(pick(corpus.tokens, corpus.split.train));
  }
  return a;
}

StageSummary eval_stage(const RunConfig& c) {
  RunConfig config = c;
  finalize_run_config(config);
  const TransformerModel model = load_model(model_path(config));
  const CorpusData corpus = stored_corpus(config, model.tokenizer);
  const auto samples = draw_test_samples(config, model, corpus);
  const Artifacts artifacts = load_artifacts(config, model);
  EvalRequest request = config.eval;
  request.layers = config.eval_layers();
  const MetricsReport report = evaluate_methods(model, samples, artifacts, request);

  ensure_dir(config.report_dir);
  const std::string json_path = join(config.report_dir, "report.json");
  const std::string csv_path = join(config.report_dir, "report.csv");
  write_text(json_path, report_to_json(report));
  write_text(csv_path, report_to_csv(report));
  StageSummary summary;
  summary.outputs = {json_path, csv_path};
  summary.metrics.emplace_back("sample_count", static_cast<double>(report.sample_count));
  summary.metrics.emplace_back("mean_context_length", report.mean_context_length);
  if (report.best_learned_layer) summary.metrics.emplace_back("best_learned_layer", *report.best_learned_layer);
  return summary;
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (const char ch : bytes) {
    h ^= static_cast<unsigned char>(ch);
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t file_checksum(const std::string& path) {
  const auto bytes = read_file(path);
  return fnv1a(std::string_view(bytes.data(), bytes.size()));
}

std::string write_manifest(const RunConfig& c, const std::string& command, const StageSummary& summary,
                           const std::string& directory) {
  RunConfig config = c;
  finalize_run_config(config);
  const std::string config_json = config.to_json();
  ojson j;
  j["command"] = command;
  j["config_hash"] = hex64(fnv1a(config_json));
  j["config"] = ojson::parse(config_json);
  ojson seeds;
  seeds["seed"] = config.seed;
  seeds["language"] = derived_seed(config.seed, SeedRole::kLanguage);
  seeds["corpus"] = derived_seed(config.seed, SeedRole::kCorpus);
  seeds["model_init"] = config.model.seed;
  seeds["training"] = config.train.seed;
  seeds["split"] = derived_seed(config.seed, SeedRole::kSplit);
  seeds["train_samples"] = derived_seed(config.seed, SeedRole::kTrainSamples);
  seeds["test_samples"] = derived_seed(config.seed, SeedRole::kTestSamples);
  j["seeds"] = seeds;
  j["versions"] = {{"flns", FLNS_VERSION},
                   {"model_format", kModelFormatVersion},
                   {"probe_format", kProbeFormatVersion},
                   {"prompt_format", kPromptFormatVersion},
                   {"report_schema", MetricsReport::kSchemaVersion}};
  ojson outputs = ojson::array();
  for (const auto& path : summary.outputs) outputs.push_back({{"path", path}, {"fnv1a64", hex64(file_checksum(path))}});
  j["outputs"] = outputs;
  ojson metrics = ojson::object();
  for (const auto& [name, value] : summary.metrics) metrics[name] = value;
  j["metrics"] = metrics;

  ensure_dir(directory);
  const std::string path = join(directory, "manifest_" + command + ".json");
  write_text(path, j.dump(2) + "\n");
  return path;
}

}  // namespace flns
