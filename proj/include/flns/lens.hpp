#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "flns/evalkit.hpp"
#include "flns/model.hpp"

namespace flns {

// One (layer, position) state of the prompt decoded `horizon` steps ahead.
// Layers run 1..L and positions 1..T (1-based, as displayed).
struct LensCell {
  int layer = 0;
  int position = 0;
  std::vector<TokenId> token_ids;
  std::vector<std::string> tokens;
  std::vector<double> probs;  // probability of tokens[i] under step i's distribution
  double mean_confidence = 0.0;
};

struct LensGrid {
  std::vector<std::string> prompt_tokens;
  std::string method;
  int horizon = 0;
  std::vector<LensCell> cells;  // layer-major, then position

  const LensCell& cell(int layer, int position) const;
};

struct LensOptions {
  // "learned", "probe-vocab", "probe-hidden", "fixed" (first fixed prompt) or
  // "fixed:<name>".
  std::string method = "learned";
  int horizon = 4;
  unsigned threads = 0;  // 0: hardware concurrency
};

// Prompt-based methods decode with self-rollout: step i+1 feeds back the
// argmax of step i under the same transplant. Probe methods read step i from
// the probe trained for offset i.
LensGrid compute_future_lens(const TransformerModel& model, std::string_view prompt_text, const Artifacts& artifacts,
                             const LensOptions& options);

// {prompt_tokens, method, horizon, cells: [{layer, position, tokens, probs,
// mean_confidence}]}; probabilities carry 6 significant digits.
std::string grid_to_json(const LensGrid& grid);
LensGrid grid_from_json(std::string_view json_text);

}  // namespace flns
