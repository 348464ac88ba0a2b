#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <string_view>

#include "flns/evalkit.hpp"
#include "flns/model.hpp"
#include "flns/pipeline.hpp"

namespace flns {

struct HttpReply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

// Immutable after construction; shared by every request thread.
struct LoadedArtifacts {
  TransformerModel model;
  Artifacts artifacts;
};

class LensService {
 public:
  explicit LensService(RunConfig config);

  // Loads the model and every artifact; until it returns, requests other
  // than /health receive 503.
  void load();
  // For tests and embedding: adopt already-loaded state.
  void adopt(std::shared_ptr<const LoadedArtifacts> loaded);
  bool ready() const { return snapshot() != nullptr; }

  // Routes one request: GET /health, GET /meta, POST /lens.
  HttpReply handle(std::string_view method, std::string_view path, std::string_view body) const;

  std::string meta_json() const;
  const RunConfig& config() const { return config_; }

 private:
  std::shared_ptr<const LoadedArtifacts> snapshot() const;

  RunConfig config_;
  mutable std::mutex mutex_;
  std::shared_ptr<const LoadedArtifacts> loaded_;
};

// Lens methods every layer has artifacts for, in display order.
std::vector<std::string> available_lens_methods(const TransformerModel& model, const Artifacts& artifacts);

// Binds host:port, loads artifacts in the background and serves until the
// process is stopped. `static_dir`, when set, is mounted at /.
int run_server(const RunConfig& config);

}  // namespace flns
