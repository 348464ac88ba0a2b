#include "flns/service.hpp"

#include <cstdio>
#include <filesystem>
#include <thread>

#include "flns/checkpoint.hpp"
#include "flns/errors.hpp"
#include "flns/lens.hpp"
#include "httplib.h"
#include "json.hpp"

namespace flns {

using ojson = nlohmann::ordered_json;

namespace {

HttpReply json_error(int status, std::string_view code, const std::string& message) {
  ojson j;
  j["error"] = code;
  j["message"] = message;
  return {status, j.dump()};
}

int status_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::kArtifactMissing:
      return 404;
    case ErrorCode::kEmptyInput:
    case ErrorCode::kUnknownSymbol:
    case ErrorCode::kSequenceTooLong:
    case ErrorCode::kInvalidConfig:
    case ErrorCode::kRangeError:
      return 400;
    default:
      return 500;
  }
}

}  // namespace

std::vector<std::string> available_lens_methods(const TransformerModel& model, const Artifacts& artifacts) {
  const int L = model.config.n_layers;
  std::vector<std::string> methods;
  bool learned = true;
  for (int l = 1; l <= L; ++l) learned = learned && artifacts.soft_prompts.contains(l);
  if (learned) methods.push_back("learned");
  for (const auto& p : artifacts.fixed_prompts) methods.push_back("fixed:" + p.name);
  for (const auto kind : {ProbeKind::kDirectVocab, ProbeKind::kHiddenState}) {
    bool all = true;
    for (int l = 1; l <= L; ++l) all = all && artifacts.probes.contains({kind, l, 0});
    if (all) methods.push_back("probe-" + probe_kind_name(kind));
  }
  return methods;
}

LensService::LensService(RunConfig config) : config_(std::move(config)) {}

void LensService::load() {
  auto loaded = std::make_shared<LoadedArtifacts>();
  loaded->model = load_model(model_path(config_));
  loaded->artifacts = load_artifacts(config_, loaded->model);
  adopt(std::move(loaded));
}

void LensService::adopt(std::shared_ptr<const LoadedArtifacts> loaded) {
  std::lock_guard lock(mutex_);
  loaded_ = std::move(loaded);
}

std::shared_ptr<const LoadedArtifacts> LensService::snapshot() const {
  std::lock_guard lock(mutex_);
  return loaded_;
}

std::string LensService::meta_json() const {
  const auto loaded = snapshot();
  if (!loaded) throw Error(ErrorCode::kArtifactMissing, "artifacts are still loading");
  const auto& model = loaded->model;
  ojson j;
  j["model"] = ojson::parse(config_to_json(model.config));
  j["methods"] = available_lens_methods(model, loaded->artifacts);
  std::vector<int> layers;
  for (int l = 1; l <= model.config.n_layers; ++l) layers.push_back(l);
  j["layers"] = layers;
  // Probe methods can decode as many steps as there are consecutive offsets.
  ojson horizons = ojson::object();
  for (const auto kind : {ProbeKind::kDirectVocab, ProbeKind::kHiddenState}) {
    int n = 0;
    while (loaded->artifacts.probes.contains({kind, 1, n})) ++n;
    horizons["probe-" + probe_kind_name(kind)] = n;
  }
  j["probe_horizons"] = horizons;
  j["default_method"] = "learned";
  j["default_horizon"] = 4;
  return j.dump();
}

HttpReply LensService::handle(std::string_view method, std::string_view path, std::string_view body) const {
  if (path == "/health") {
    if (method != "GET") return json_error(405, "MethodNotAllowed", "use GET");
    return {200, R"({"status":"ok"})"};
  }
  if (path != "/meta" && path != "/lens") return json_error(404, "NotFound", "no route " + std::string(path));
  const auto loaded = snapshot();
  if (!loaded) return json_error(503, "Loading", "artifacts are still loading");
  try {
    if (path == "/meta") {
      if (method != "GET") return json_error(405, "MethodNotAllowed", "use GET");
      return {200, meta_json()};
    }
    if (method != "POST") return json_error(405, "MethodNotAllowed", "use POST");
    nlohmann::json request;
    try {
      request = nlohmann::json::parse(body);
    } catch (const nlohmann::json::exception&) {
      return json_error(400, "BadRequest", "body is not valid JSON");
    }
    if (!request.is_object() || !request.contains("prompt") || !request["prompt"].is_string()) {
      return json_error(400, "BadRequest", "body needs a string field 'prompt'");
    }
    LensOptions options;
    if (request.contains("method")) {
      if (!request["method"].is_string()) return json_error(400, "BadRequest", "'method' must be a string");
      options.method = request["method"].get<std::string>();
    }
    if (request.contains("horizon")) {
      if (!request["horizon"].is_number_integer()) return json_error(400, "BadRequest", "'horizon' must be an integer");
      options.horizon = request["horizon"].get<int>();
    }
    const LensGrid grid =
        compute_future_lens(loaded->model, request["prompt"].get<std::string>(), loaded->artifacts, options);
    return {200, grid_to_json(grid)};
  } catch (const Error& e) {
    return json_error(status_for(e.code()), error_code_name(e.code()), e.what());
  }
}

int run_server(const RunConfig& config) {
  LensService service(config);
  httplib::Server server;
  if (!config.static_dir.empty()) {
    if (!std::filesystem::is_directory(config.static_dir) || !server.set_mount_point("/", config.static_dir)) {
      throw Error(ErrorCode::kInvalidConfig, "static directory " + config.static_dir + " is not usable");
    }
  }
  auto dispatch = [&service](const httplib::Request& req, httplib::Response& res) {
    const HttpReply reply = service.handle(req.method, req.path, req.body);
    res.status = reply.status;
    res.set_content(reply.body, reply.content_type);
  };
  server.Get("/health", dispatch);
  server.Get("/meta", dispatch);
  server.Post("/lens", dispatch);

  if (!server.bind_to_port(config.host, config.port)) {
    throw Error(ErrorCode::kIoError, "cannot bind " + config.host + ":" + std::to_string(config.port));
  }
  std::string load_error;
  std::jthread loader([&] {
    try {
      service.load();
      std::fprintf(stderr, "flns: artifacts loaded from %s\n", config.artifact_dir.c_str());
    } catch (const std::exception& e) {
      load_error = e.what();
      std::fprintf(stderr, "flns: loading failed: %s\n", e.what());
      server.wait_until_ready();
      server.stop();
    }
  });
  std::fprintf(stderr, "flns: serving on http://%s:%d\n", config.host.c_str(), config.port);
  server.listen_after_bind();
  loader.join();
  if (!load_error.empty()) throw Error(ErrorCode::kArtifactMissing, load_error);
  return 0;
}

}  // namespace flns
