// Command-line driver for the experiment pipeline and the lens service.
//
// Exit codes: 0 success, 2 usage error, 3 invalid configuration or input,
// 4 any other library failure (missing artifacts, I/O, training divergence).

#include <CLI11.hpp>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "flns/checkpoint.hpp"
#include "flns/corpus.hpp"
#include "flns/errors.hpp"
#include "flns/lens.hpp"
#include "flns/pipeline.hpp"
#include "flns/service.hpp"
#include "json.hpp"

namespace {

using flns::Error;
using flns::ErrorCode;

constexpr int kUsageExit = 2;
constexpr int kConfigExit = 3;
constexpr int kFailureExit = 4;

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
  auto bad = [&] { return Error(ErrorCode::kInvalidConfig, flag + " expects a..b or a comma list, got '" + text + "'"); };
  std::vector<int> out;
  try {
    if (const auto dots = text.find(".."); dots != std::string::npos) {
      const int a = std::stoi(text.substr(0, dots));
      const int b = std::stoi(text.substr(dots + 2));
      if (b < a) throw bad();
      for (int v = a; v <= b; ++v) out.push_back(v);
      return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
      std::size_t used = 0;
      out.push_back(std::stoi(item, &used));
      if (used != item.size()) throw bad();
    }
  } catch (const std::logic_error&) {
    throw bad();
  }
  if (out.empty()) throw bad();
  return out;
}

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string layers;
  std::string offsets;
  std::string method;
  std::optional<std::string> prompt;
  int horizon = 4;
  std::optional<int> port;
  std::string artifacts;
  std::string reports;
  std::string static_dir;
  std::string out;
};

flns::RunConfig resolve_config(const Flags& f) {
  flns::RunConfig c;
  if (!f.config.empty()) {
    try {
      c = flns::load_run_config(f.config);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kIoError) throw;
      throw Error(ErrorCode::kInvalidConfig, "cannot read config " + f.config);
    }
  }
  if (const char* env = std::getenv("FLNS_ARTIFACTS"); env && *env) c.artifact_dir = env;
  if (!f.artifacts.empty()) c.artifact_dir = f.artifacts;
  if (!f.reports.empty()) c.report_dir = f.reports;
  if (!f.static_dir.empty()) c.static_dir = f.static_dir;
  if (f.seed) c.seed = *f.seed;
  if (!f.layers.empty()) c.eval.layers = parse_int_list(f.layers, "--layers");
  if (!f.offsets.empty()) c.eval.offsets = parse_int_list(f.offsets, "--offsets");
  if (f.port) c.port = *f.port;
  flns::finalize_run_config(c);
  return c;
}

void print_summary(const std::string& command, const flns::StageSummary& s, const std::string& manifest) {
  std::fprintf(stderr, "%s: wrote %zu file(s); manifest %s\n", command.c_str(), s.outputs.size(), manifest.c_str());
  for (const auto& [name, value] : s.metrics) std::fprintf(stderr, "  %s = %.6g\n", name.c_str(), value);
}

int run_stage(const std::string& command, const Flags& f) {
  const flns::RunConfig c = resolve_config(f);
  flns::StageSummary summary;
  std::string manifest_dir = c.artifact_dir;
  if (command == "train-model") {
    summary = flns::train_model_stage(c);
  } else if (command == "train-probes") {
    summary = flns::train_probes_stage(c);
  } else if (command == "train-prompts") {
    summary = flns::train_prompts_stage(c);
  } else {
    flns::RunConfig eval_config = c;
    if (!f.method.empty()) eval_config.eval.methods = {f.method};
    summary = flns::eval_stage(eval_config);
    manifest_dir = c.report_dir;
  }
  print_summary(command, summary, flns::write_manifest(c, command, summary, manifest_dir));
  return 0;
}

int run_lens(const Flags& f) {
  if (!f.prompt) throw Error(ErrorCode::kInvalidConfig, "lens needs --prompt");
  if (f.prompt->find_first_not_of(" \t\r\n") == std::string::npos) {
    throw Error(ErrorCode::kEmptyInput, "prompt is empty");
  }
  const flns::RunConfig c = resolve_config(f);
  const auto model = flns::load_model(flns::model_path(c));
  const auto artifacts = flns::load_artifacts(c, model);
  flns::LensOptions options;
  if (!f.method.empty()) options.method = f.method;
  options.horizon = f.horizon;
  const std::string json = flns::grid_to_json(flns::compute_future_lens(model, *f.prompt, artifacts, options));
  flns::StageSummary summary;
  if (f.out.empty()) {
    std::cout << json << "\n";
  } else {
    std::ofstream(f.out, std::ios::binary) << json;
    summary.outputs.push_back(f.out);
  }
  flns::write_manifest(c, "lens", summary, c.report_dir);
  return 0;
}

int run_gen_corpus(const Flags& f) {
  const flns::RunConfig c = resolve_config(f);
  if (f.out.empty()) throw Error(ErrorCode::kInvalidConfig, "gen-corpus needs --out");
  const auto corpus = flns::build_corpus(c);
  flns::write_corpus(f.out, corpus.documents);
  std::size_t tokens = 0;
  for (const auto& d : corpus.tokens) tokens += d.size();
  std::fprintf(stderr, "gen-corpus: %zu documents, %zu tokens, vocabulary %zu\n", corpus.documents.size(), tokens,
               corpus.tokenizer.size());
  flns::StageSummary summary{{f.out}, {{"tokens", static_cast<double>(tokens)}}};
  flns::write_manifest(c, "gen-corpus", summary, c.report_dir);
  return 0;
}

int run_serve(const Flags& f) {
  const flns::RunConfig c = resolve_config(f);
  flns::write_manifest(c, "serve", {}, c.report_dir);
  return flns::run_server(c);
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kEmptyInput:
    case ErrorCode::kUnknownSymbol:
    case ErrorCode::kRangeError:
    case ErrorCode::kSequenceTooLong:
      return kConfigExit;
    default:
      return kFailureExit;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Future-lens workbench: train a toy model, decode future tokens from hidden states, serve the lens"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  app.add_option("--config", f.config, "Run config JSON (defaults apply to missing keys)");
  app.add_option("--seed", f.seed, "Master seed; every component seed is derived from it");
  app.add_option("--layers", f.layers, "Layers to train/evaluate, a..b or a,b,c");
  app.add_option("--offsets", f.offsets, "Offsets N, a..b or a,b,c");
  app.add_option("--method", f.method, "eval: restrict to one method; lens: decoding method");
  app.add_option("--prompt", f.prompt, "lens: prompt text");
  app.add_option("--horizon", f.horizon, "lens: future tokens per cell")->check(CLI::PositiveNumber);
  app.add_option("--port", f.port, "serve: TCP port");
  app.add_option("--artifacts", f.artifacts, "Artifact directory (overrides FLNS_ARTIFACTS and the config)");
  app.add_option("--reports", f.reports, "Report directory");
  app.add_option("--static", f.static_dir, "serve: directory mounted at /");
  app.add_option("--out", f.out, "lens/gen-corpus: output file");

  std::string command;
  for (const auto& [name, help] : std::vector<std::pair<std::string, std::string>>{
           {"train-model", "Generate or read the corpus and train the toy model"},
           {"train-probes", "Train vocabulary and hidden-state probes per (layer, offset)"},
           {"train-prompts", "Train one learned prompt per layer"},
           {"eval", "Evaluate every method and write report.json / report.csv"},
           {"lens", "Print the future-lens grid for --prompt as JSON"},
           {"serve", "Serve /health, /meta and /lens over HTTP"},
           {"gen-corpus", "Write the configured template corpus to --out"},
           {"show-config", "Print the resolved run config as JSON"}}) {
    app.add_subcommand(name, help)->fallthrough()->callback([&command, n = name] { command = n; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageExit;
  }

  try {
    if (command == "lens") return run_lens(f);
    if (command == "serve") return run_serve(f);
    if (command == "gen-corpus") return run_gen_corpus(f);
    if (command == "show-config") {
      std::cout << resolve_config(f).to_json() << "\n";
      return 0;
    }
    return run_stage(command, f);
  } catch (const Error& e) {
    nlohmann::ordered_json j{{"error", flns::error_code_name(e.code())}, {"message", e.what()}};
    std::cerr << j.dump() << "\n";
    return exit_code_for(e.code());
  } catch (const std::exception& e) {
    nlohmann::ordered_json j{{"error", "Unexpected"}, {"message", e.what()}};
    std::cerr << j.dump() << "\n";
    return kFailureExit;
  }
}
