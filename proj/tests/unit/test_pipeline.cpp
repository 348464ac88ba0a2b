#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>

#include "flns/checkpoint.hpp"
#include "flns/errors.hpp"
#include "flns/pipeline.hpp"
#include "json.hpp"
#include "support/smoke_run.hpp"
#include "support/toy.hpp"

using namespace flns;
using flns::testing::error_code_of;
using flns::testing::run_full_pipeline;
using flns::testing::smoke_config;
using flns::testing::source_path;
using flns::testing::TempDir;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Names and bytes of every regular file below `dir`, excluding manifests
// (they embed the output paths, which differ between directories).
std::map<std::string, std::string> tree(const std::string& dir) {
  std::map<std::string, std::string> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), dir).string();
    if (rel.find("manifest_") != std::string::npos) continue;
    out[rel] = slurp(e.path().string());
  }
  return out;
}

}  // namespace

TEST(RunConfig, EmptyObjectKeepsDefaultsAndJsonRoundTrips) {
  const RunConfig defaults;
  const RunConfig parsed = parse_run_config("{}");
  EXPECT_EQ(parsed.to_json(), defaults.to_json());
  EXPECT_EQ(parse_run_config(defaults.to_json()).to_json(), defaults.to_json());
  EXPECT_EQ(defaults.eval_layers(), (std::vector<int>{1, 2, 3, 4}));
  EXPECT_EQ(defaults.eval.methods.front(), "bigram");
}

TEST(RunConfig, ShippedConfigsParse) {
  for (const char* name : {"config/experiment.json", "config/smoke.json"}) {
    RunConfig c = load_run_config(source_path(name));
    EXPECT_NO_THROW(finalize_run_config(c)) << name;
  }
  const auto specs = read_fixed_prompt_specs(source_path("config/fixed_prompts.json"));
  ASSERT_EQ(specs.size(), 4u);
  EXPECT_EQ(specs[0].name, "hello");
}

TEST(RunConfig, RejectsUnknownKeysWrongTypesAndBadValues) {
  for (const char* text : {
           R"({"sed": 1})",
           R"({"model": {"layers": 3}})",
           R"({"model": {"n_layers": "three"}})",
           R"({"model": {"positional_scheme": "alibi"}})",
           R"({"eval": {"direction": "sideways"}})",
           R"({"eval": {"offsets": [0, "1"]}})",
           R"({"paths": []})",
           R"({"service": {"port": 80, "tls": true}})",
           R"({)",
       }) {
    EXPECT_EQ(error_code_of([&] { parse_run_config(text); }), ErrorCode::kInvalidConfig) << text;
  }
  EXPECT_EQ(error_code_of([] { load_run_config("/nonexistent/config.json"); }), ErrorCode::kIoError);
}

TEST(RunConfig, FinalizeValidatesTheMatrixAndDerivesSeeds) {
  RunConfig c = parse_run_config(R"({"seed": 5, "eval": {"layers": [1, 9]}})");
  EXPECT_EQ(error_code_of([&] { finalize_run_config(c); }), ErrorCode::kInvalidConfig);
  c.eval.layers = {2};
  c.eval.offsets = {};
  EXPECT_EQ(error_code_of([&] { finalize_run_config(c); }), ErrorCode::kInvalidConfig);
  c.eval.offsets = {0, -1};
  EXPECT_EQ(error_code_of([&] { finalize_run_config(c); }), ErrorCode::kInvalidConfig);
  c.eval.offsets = {0, 1};
  c.port = 70000;
  EXPECT_EQ(error_code_of([&] { finalize_run_config(c); }), ErrorCode::kInvalidConfig);
  c.port = 8080;
  finalize_run_config(c);
  EXPECT_EQ(c.model.seed, derived_seed(5, SeedRole::kModelInit));
  EXPECT_EQ(c.train.seed, derived_seed(5, SeedRole::kTraining));
  EXPECT_EQ(c.eval_layers(), (std::vector<int>{2}));
}

TEST(Seeds, DistinctPerRoleAndIndexAndStable) {
  std::set<std::uint64_t> seen;
  for (std::uint64_t role = 1; role <= 9; ++role) {
    for (std::uint64_t index = 0; index < 50; ++index) {
      EXPECT_TRUE(seen.insert(derived_seed(0, static_cast<SeedRole>(role), index)).second);
    }
  }
  EXPECT_EQ(derived_seed(3, SeedRole::kProbes, 7), derived_seed(3, SeedRole::kProbes, 7));
  EXPECT_NE(derived_seed(3, SeedRole::kProbes, 7), derived_seed(4, SeedRole::kProbes, 7));
}

TEST(Checksums, Fnv1aReferenceValues) {
  // Published FNV-1a 64-bit test vectors.
  EXPECT_EQ(fnv1a(""), 0xcbf29ce484222325ull);
  EXPECT_EQ(fnv1a("a"), 0xaf63dc4c8601ec8cull);
  EXPECT_EQ(fnv1a("foobar"), 0x85944171f73967e8ull);
}

TEST(Corpus, TemplateDocumentsAreSeededAndMarkDeterministicPositions) {
  const auto lang = make_template_language({.phrases = 10, .key_pool = 5, .filler_words = 6}, 3);
  EXPECT_EQ(lang.phrases.size(), 14u);  // four named phrases plus ten generated
  const auto a = generate_documents(lang, 20, 10, 20, 4);
  const auto b = generate_documents(lang, 20, 10, 20, 4);
  EXPECT_EQ(a.documents, b.documents);
  const Tokenizer tok = lang.tokenizer();
  // Every deterministic position is followed by the same token wherever its
  // phrase key recurs: check via the named phrase "alpha beta gamma delta".
  for (std::size_t d = 0; d < a.documents.size(); ++d) {
    const auto ids = tok.encode(a.documents[d]);
    ASSERT_EQ(a.deterministic[d].size(), ids.size());
    EXPECT_FALSE(a.deterministic[d].back());
    for (std::size_t t = 0; t + 1 < ids.size(); ++t) {
      if (tok.text(ids[t]) == "alpha") {
        EXPECT_TRUE(a.deterministic[d][t]);
        EXPECT_EQ(tok.text(ids[t + 1]), "beta");
      }
    }
  }
  EXPECT_EQ(error_code_of([] { make_template_language({.phrases = 100, .key_length = 1, .key_pool = 5}, 1); }),
            ErrorCode::kInvalidConfig);
  EXPECT_EQ(error_code_of([&] { generate_documents(lang, 5, 3, 4, 1); }), ErrorCode::kInvalidConfig);
}

TEST(Corpus, FileRoundTrip) {
  TempDir dir("corpus");
  const std::vector<std::string> docs{"a b c", "d e"};
  write_corpus(dir.file("c.txt"), docs);
  EXPECT_EQ(read_corpus(dir.file("c.txt")), docs);
  EXPECT_EQ(error_code_of([] { read_corpus("/nonexistent/corpus.txt"); }), ErrorCode::kIoError);
}

TEST(Pipeline, StagesWriteArtifactsAndRerunsAreBitwiseIdentical) {
  TempDir a("run_a");
  TempDir b("run_b");
  const RunConfig ca = smoke_config(a.path());
  const RunConfig cb = smoke_config(b.path());
  run_full_pipeline(ca);
  run_full_pipeline(cb);

  const auto ta = tree(a.path());
  const auto tb = tree(b.path());
  EXPECT_EQ(ta.size(), tb.size());
  for (const auto& [name, bytes] : ta) {
    ASSERT_TRUE(tb.count(name)) << name;
    EXPECT_TRUE(tb.at(name) == bytes) << name << " differs between runs";
  }
  // 2 layers x 4 offsets x 2 kinds, 2 prompts, model, corpus, log; report json + csv.
  EXPECT_EQ(ta.count("artifacts/model.flns"), 1u);
  EXPECT_EQ(ta.count("artifacts/probe_hidden_l2_n3.flns"), 1u);
  EXPECT_EQ(ta.count("artifacts/prompt_l1.flns"), 1u);
  EXPECT_EQ(ta.count("reports/report.json"), 1u);
  EXPECT_EQ(ta.count("reports/report.csv"), 1u);
  EXPECT_EQ(ta.size(), 16u + 2u + 3u + 2u);

  const auto report = nlohmann::json::parse(ta.at("reports/report.json"));
  EXPECT_EQ(report["sample_count"], 30);
}

TEST(Pipeline, ManifestRecordsChecksumsAndIsTimestampFree) {
  TempDir dir("manifest");
  const RunConfig c = smoke_config(dir.path());
  const auto summary = train_model_stage(c);
  const std::string path = write_manifest(c, "train-model", summary, c.artifact_dir);
  const auto first = slurp(path);
  const auto j = nlohmann::json::parse(first);
  EXPECT_EQ(j["command"], "train-model");
  EXPECT_EQ(j["versions"]["model_format"], kModelFormatVersion);
  ASSERT_EQ(j["outputs"].size(), 3u);
  for (const auto& o : j["outputs"]) {
    char hex[17];
    std::snprintf(hex, sizeof hex, "%016llx",
                  static_cast<unsigned long long>(file_checksum(o["path"].get<std::string>())));
    EXPECT_EQ(o["fnv1a64"], hex);
  }
  EXPECT_TRUE(j["metrics"].contains("heldout_template_accuracy"));
  write_manifest(c, "train-model", summary, c.artifact_dir);
  EXPECT_EQ(slurp(path), first);
}

TEST(Pipeline, LoadArtifactsChecksNamesAndReportsGaps) {
  TempDir dir("artifacts");
  RunConfig c = smoke_config(dir.path());
  c.eval.offsets = {0, 1};
  train_model_stage(c);
  train_probes_stage(c);
  const auto model = load_model(model_path(c));
  auto artifacts = load_artifacts(c, model);
  EXPECT_EQ(artifacts.probes.size(), 2u * 2u * 2u);
  EXPECT_TRUE(artifacts.soft_prompts.empty());
  EXPECT_TRUE(artifacts.bigram.has_value());
  EXPECT_EQ(artifacts.fixed_prompts.size(), 4u);

  EXPECT_EQ(error_code_of([&] { eval_stage(c); }), ErrorCode::kArtifactMissing);

  fs::copy_file(probe_path(c, ProbeKind::kDirectVocab, 1, 0), probe_path(c, ProbeKind::kDirectVocab, 2, 0),
                fs::copy_options::overwrite_existing);
  EXPECT_EQ(error_code_of([&] { load_artifacts(c, model); }), ErrorCode::kCorruptCheckpoint);
}
