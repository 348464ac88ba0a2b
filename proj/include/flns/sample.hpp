#pragma once

#include <cstddef>
#include <vector>

#include "flns/model.hpp"

namespace flns {

// One evaluation position. `context` is x_1..x_T; `continuation` holds the
// greedy tokens x_{T+1}..x_{T+Nmax+1} and `ref_dists[i]` the distribution
// y_{T+i} that produced continuation[i].
struct EvalSample {
  std::size_t id = 0;
  std::size_t document = 0;
  std::vector<TokenId> context;
  std::vector<TokenId> continuation;
  std::vector<RowVector<float>> ref_dists;
  std::vector<RowVector<float>> hidden_cache;  // h_T^l for l = 0..L
  std::vector<RowVector<float>> final_hidden;  // h_{T+i}^L for i = 0..Nmax

  std::size_t context_len() const { return context.size(); }
  std::size_t horizon() const { return ref_dists.empty() ? 0 : ref_dists.size() - 1; }
};

}  // namespace flns
