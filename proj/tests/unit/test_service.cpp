#include <gtest/gtest.h>

#include <future>

#include "flns/lens.hpp"
#include "flns/service.hpp"
#include "json.hpp"
#include "support/toy.hpp"

using namespace flns;
using flns::testing::toy_artifacts;
using flns::testing::toy_world;

namespace {

std::shared_ptr<const LoadedArtifacts> toy_loaded() {
  auto loaded = std::make_shared<LoadedArtifacts>();
  loaded->model = toy_world().model;
  loaded->artifacts = toy_artifacts();
  return loaded;
}

std::string error_name(const HttpReply& r) { return nlohmann::json::parse(r.body).at("error").get<std::string>(); }

}  // namespace

TEST(Service, HealthIsAlwaysUpAndOtherRoutesWaitForLoading) {
  LensService service{RunConfig{}};
  EXPECT_FALSE(service.ready());
  const auto health = service.handle("GET", "/health", "");
  EXPECT_EQ(health.status, 200);
  EXPECT_EQ(health.body, R"({"status":"ok"})");
  EXPECT_EQ(health.content_type, "application/json");
  EXPECT_EQ(service.handle("GET", "/meta", "").status, 503);
  EXPECT_EQ(service.handle("POST", "/lens", R"({"prompt":"alpha"})").status, 503);
  EXPECT_EQ(error_name(service.handle("GET", "/meta", "")), "Loading");
  service.adopt(toy_loaded());
  EXPECT_TRUE(service.ready());
  EXPECT_EQ(service.handle("GET", "/meta", "").status, 200);
}

TEST(Service, MetaDescribesModelAndMethods) {
  LensService service{RunConfig{}};
  service.adopt(toy_loaded());
  const auto reply = service.handle("GET", "/meta", "");
  ASSERT_EQ(reply.status, 200);
  const auto j = nlohmann::json::parse(reply.body);
  EXPECT_EQ(j["model"]["n_layers"], 2);
  EXPECT_EQ(j["layers"], nlohmann::json::array({1, 2}));
  EXPECT_EQ(j["default_method"], "learned");
  EXPECT_EQ(j["default_horizon"], 4);
  EXPECT_EQ(j["probe_horizons"]["probe-vocab"], 4);
  const auto methods = j["methods"].get<std::vector<std::string>>();
  EXPECT_EQ(methods.front(), "learned");
  EXPECT_NE(std::find(methods.begin(), methods.end(), "fixed:hello"), methods.end());
  EXPECT_NE(std::find(methods.begin(), methods.end(), "probe-hidden"), methods.end());
}

TEST(Service, LensMatchesTheLibraryAndRepeatsByteForByte) {
  LensService service{RunConfig{}};
  service.adopt(toy_loaded());
  const std::string body = R"({"prompt":"marty mcfly from","method":"learned","horizon":3})";
  const auto a = service.handle("POST", "/lens", body);
  ASSERT_EQ(a.status, 200) << a.body;
  const auto b = service.handle("POST", "/lens", body);
  EXPECT_EQ(a.body, b.body);
  const auto expected = grid_to_json(compute_future_lens(toy_world().model, "marty mcfly from", toy_artifacts(),
                                                         {.method = "learned", .horizon = 3}));
  EXPECT_EQ(a.body, expected);

  const auto defaults = service.handle("POST", "/lens", R"({"prompt":"marty"})");
  ASSERT_EQ(defaults.status, 200);
  const auto j = nlohmann::json::parse(defaults.body);
  EXPECT_EQ(j["method"], "learned");
  EXPECT_EQ(j["horizon"], 4);
}

TEST(Service, ConcurrentRequestsSeeIdenticalBodies) {
  LensService service{RunConfig{}};
  service.adopt(toy_loaded());
  const std::string body = R"({"prompt":"alpha beta gamma","method":"probe-vocab","horizon":2})";
  const auto reference = service.handle("POST", "/lens", body).body;
  std::vector<std::future<std::string>> futures;
  for (int i = 0; i < 8; ++i) {
    futures.push_back(std::async(std::launch::async, [&] { return service.handle("POST", "/lens", body).body; }));
  }
  for (auto& f : futures) EXPECT_EQ(f.get(), reference);
}

TEST(Service, ErrorStatuses) {
  LensService service{RunConfig{}};
  service.adopt(toy_loaded());
  struct Case {
    std::string method, path, body;
    int status;
    std::string error;
  };
  const std::vector<Case> cases{
      {"GET", "/nope", "", 404, "NotFound"},
      {"POST", "/health", "", 405, "MethodNotAllowed"},
      {"POST", "/meta", "", 405, "MethodNotAllowed"},
      {"GET", "/lens", "", 405, "MethodNotAllowed"},
      {"POST", "/lens", "{not json", 400, "BadRequest"},
      {"POST", "/lens", R"({"method":"learned"})", 400, "BadRequest"},
      {"POST", "/lens", R"({"prompt":3})", 400, "BadRequest"},
      {"POST", "/lens", R"({"prompt":"alpha","horizon":"4"})", 400, "BadRequest"},
      {"POST", "/lens", R"({"prompt":"alpha","method":7})", 400, "BadRequest"},
      {"POST", "/lens", R"({"prompt":""})", 400, "EmptyInput"},
      {"POST", "/lens", R"({"prompt":"zebra"})", 400, "UnknownSymbol"},
      {"POST", "/lens", R"({"prompt":"alpha","method":"magic"})", 400, "InvalidConfig"},
      {"POST", "/lens", R"({"prompt":"alpha","horizon":0})", 400, "RangeError"},
      {"POST", "/lens", R"({"prompt":"alpha","method":"probe-hidden","horizon":6})", 404, "ArtifactMissing"},
      {"POST", "/lens", R"({"prompt":"alpha","method":"fixed:nothing"})", 404, "ArtifactMissing"},
  };
  for (const auto& c : cases) {
    const auto reply = service.handle(c.method, c.path, c.body);
    EXPECT_EQ(reply.status, c.status) << c.method << " " << c.path << " " << c.body;
    EXPECT_EQ(error_name(reply), c.error) << c.body;
  }
}

TEST(Service, AvailableMethodsOmitIncompleteArtifactSets) {
  Artifacts partial = toy_artifacts();
  partial.soft_prompts.erase(1);
  partial.probes.erase({ProbeKind::kDirectVocab, 2, 0});
  partial.fixed_prompts.resize(1);
  const auto methods = available_lens_methods(toy_world().model, partial);
  EXPECT_EQ(methods, (std::vector<std::string>{"fixed:hello", "probe-hidden"}));
}
