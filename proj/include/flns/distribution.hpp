#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "flns/tokenizer.hpp"

namespace flns {

// Argmax with the lowest index winning ties.
template <typename T>
TokenId argmax(std::span<const T> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return static_cast<TokenId>(best);
}

// Indices of the k largest values, ordered by (value desc, index asc).
template <typename T>
std::vector<TokenId> top_k(std::span<const T> values, std::size_t k) {
  std::vector<TokenId> idx(values.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<TokenId>(i);
  k = std::min(k, idx.size());
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](TokenId a, TokenId b) {
                      const auto va = values[static_cast<std::size_t>(a)];
                      const auto vb = values[static_cast<std::size_t>(b)];
                      return va > vb || (va == vb && a < b);
                    });
  idx.resize(k);
  return idx;
}

// Sum within `tol` of one, every entry finite and non-negative.
template <typename T>
bool is_distribution(std::span<const T> p, double tol = 1e-6) {
  double sum = 0.0;
  for (T v : p) {
    if (!std::isfinite(static_cast<double>(v)) || v < T(0)) return false;
    sum += static_cast<double>(v);
  }
  return std::abs(sum - 1.0) <= tol;
}

// KL(p || q) in nats, accumulated in double. Terms with p_i == 0 contribute 0;
// q_i is floored at 1e-30 so the value stays finite.
template <typename A, typename B>
double kl_divergence(std::span<const A> p, std::span<const B> q) {
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double pi = static_cast<double>(p[i]);
    if (pi <= 0.0) continue;
    const double qi = std::max(static_cast<double>(q[i]), 1e-30);
    kl += pi * (std::log(pi) - std::log(qi));
  }
  return std::max(kl, 0.0);
}

std::vector<double> softmax(std::span<const double> logits);

}  // namespace flns
