#include "flns/lens.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>

#include "flns/distribution.hpp"
#include "flns/errors.hpp"
#include "flns/intervene.hpp"
#include "flns/probes.hpp"
#include "json.hpp"

namespace flns {

namespace {

double six_significant(double p) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", p);
  return std::strtod(buf, nullptr);
}

Error missing(const std::string& method, int layer, const std::string& what) {
  return Error(ErrorCode::kArtifactMissing,
               "no " + what + " for method " + method + " at layer " + std::to_string(layer));
}

// Decodes one state into `horizon` (token, dist) steps.
using CellDecoder = std::function<std::vector<RowVector<float>>(int layer, const RowVector<float>& h)>;

CellDecoder make_decoder(const TransformerModel& model, const Artifacts& artifacts, const std::string& method,
                         int horizon, std::string& resolved_name) {
  const int L = model.config.n_layers;
  resolved_name = method;
  if (method == "probe-vocab" || method == "probe-hidden") {
    const ProbeKind kind = method == "probe-vocab" ? ProbeKind::kDirectVocab : ProbeKind::kHiddenState;
    for (int l = 1; l <= L; ++l) {
      for (int n = 0; n < horizon; ++n) {
        if (!artifacts.probes.contains({kind, l, n})) {
          throw missing(method, l, "probe for offset " + std::to_string(n));
        }
      }
    }
    return [&model, &artifacts, kind, horizon](int layer, const RowVector<float>& h) {
      std::vector<RowVector<float>> steps;
      for (int n = 0; n < horizon; ++n) {
        steps.push_back(probe_predict(artifacts.probes.at({kind, layer, n}), h, model));
      }
      return steps;
    };
  }
  if (method == "learned") {
    for (int l = 1; l <= L; ++l) {
      if (!artifacts.soft_prompts.contains(l)) throw missing(method, l, "learned prompt");
    }
    return [&model, &artifacts, horizon](int layer, const RowVector<float>& h) {
      const SoftPrompt& soft = artifacts.soft_prompts.at(layer);
      const auto placeholders = soft_prompt_placeholders(soft);
      return rollout_intervention(model, placeholders, &soft.vectors, h, layer, horizon).dists;
    };
  }
  if (method == "fixed" || method.starts_with("fixed:")) {
    const FixedPrompt* prompt = nullptr;
    if (method == "fixed") {
      if (!artifacts.fixed_prompts.empty()) prompt = &artifacts.fixed_prompts.front();
    } else {
      const std::string name = method.substr(6);
      for (const auto& p : artifacts.fixed_prompts) {
        if (p.name == name) prompt = &p;
      }
    }
    if (!prompt) throw Error(ErrorCode::kArtifactMissing, "no fixed prompt for method " + method);
    resolved_name = "fixed:" + prompt->name;
    return [&model, prompt, horizon](int layer, const RowVector<float>& h) {
      return rollout_intervention(model, prompt->tokens, nullptr, h, layer, horizon).dists;
    };
  }
  throw Error(ErrorCode::kInvalidConfig, "unknown lens method '" + method + "'");
}

}  // namespace

const LensCell& LensGrid::cell(int layer, int position) const {
  for (const auto& c : cells) {
    if (c.layer == layer && c.position == position) return c;
  }
  throw Error(ErrorCode::kRangeError,
              "no lens cell at layer " + std::to_string(layer) + ", position " + std::to_string(position));
}

LensGrid compute_future_lens(const TransformerModel& model, std::string_view prompt_text, const Artifacts& artifacts,
                             const LensOptions& options) {
  if (options.horizon < 1) throw Error(ErrorCode::kRangeError, "lens horizon must be >= 1");
  const std::vector<TokenId> tokens = tokenize(model, prompt_text);
  if (tokens.size() > static_cast<std::size_t>(model.config.max_seq_len)) {
    throw Error(ErrorCode::kSequenceTooLong, "prompt has " + std::to_string(tokens.size()) + " tokens");
  }

  LensGrid grid;
  grid.horizon = options.horizon;
  const CellDecoder decode = make_decoder(model, artifacts, options.method, options.horizon, grid.method);
  for (const TokenId t : tokens) grid.prompt_tokens.push_back(model.tokenizer.text(t));

  const Trace<float> trace = forward_trace(model, tokens);
  const int L = model.config.n_layers;
  const int T = static_cast<int>(tokens.size());
  grid.cells.resize(static_cast<std::size_t>(L * T));

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < grid.cells.size(); i = next++) {
      try {
        LensCell& cell = grid.cells[i];
        cell.layer = static_cast<int>(i) / T + 1;
        cell.position = static_cast<int>(i) % T + 1;
        const auto steps = decode(cell.layer, trace.state(cell.layer, static_cast<std::size_t>(cell.position - 1)));
        double sum = 0.0;
        for (const auto& d : steps) {
          const TokenId id = argmax(std::span<const float>(d.data(), static_cast<std::size_t>(d.size())));
          cell.token_ids.push_back(id);
          cell.tokens.push_back(model.tokenizer.text(id));
          cell.probs.push_back(static_cast<double>(d(id)));
          sum += cell.probs.back();
        }
        cell.mean_confidence = sum / static_cast<double>(steps.size());
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = grid.cells.size();
      }
    }
  };
  unsigned n_threads = options.threads ? options.threads : std::max(1u, std::thread::hardware_concurrency());
  n_threads = std::min<unsigned>(n_threads, static_cast<unsigned>(grid.cells.size()));
  {
    std::vector<std::jthread> pool;
    for (unsigned t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
  }
  if (failure) std::rethrow_exception(failure);
  return grid;
}

std::string grid_to_json(const LensGrid& grid) {
  nlohmann::ordered_json j;
  j["prompt_tokens"] = grid.prompt_tokens;
  j["method"] = grid.method;
  j["horizon"] = grid.horizon;
  j["cells"] = nlohmann::ordered_json::array();
  for (const auto& c : grid.cells) {
    nlohmann::ordered_json cell;
    cell["layer"] = c.layer;
    cell["position"] = c.position;
    cell["tokens"] = c.tokens;
    auto probs = nlohmann::ordered_json::array();
    for (const double p : c.probs) probs.push_back(six_significant(p));
    cell["probs"] = std::move(probs);
    cell["mean_confidence"] = six_significant(c.mean_confidence);
    j["cells"].push_back(std::move(cell));
  }
  return j.dump();
}

LensGrid grid_from_json(std::string_view json_text) {
  try {
    const auto j = nlohmann::json::parse(json_text);
    LensGrid grid;
    grid.prompt_tokens = j.at("prompt_tokens").get<std::vector<std::string>>();
    grid.method = j.at("method").get<std::string>();
    grid.horizon = j.at("horizon").get<int>();
    for (const auto& c : j.at("cells")) {
      LensCell cell;
      cell.layer = c.at("layer").get<int>();
      cell.position = c.at("position").get<int>();
      cell.tokens = c.at("tokens").get<std::vector<std::string>>();
      cell.probs = c.at("probs").get<std::vector<double>>();
      cell.mean_confidence = c.at("mean_confidence").get<double>();
      if (cell.tokens.size() != static_cast<std::size_t>(grid.horizon) || cell.probs.size() != cell.tokens.size()) {
        throw Error(ErrorCode::kInvalidConfig, "lens cell does not match horizon");
      }
      grid.cells.push_back(std::move(cell));
    }
    return grid;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kInvalidConfig, std::string("lens grid: ") + e.what());
  }
}

}  // namespace flns
