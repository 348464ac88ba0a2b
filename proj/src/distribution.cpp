#include "flns/distribution.hpp"

namespace flns {

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.begin(), logits.end());
  if (out.empty()) return out;
  const double mx = *std::max_element(out.begin(), out.end());
  double sum = 0.0;
  for (double& v : out) {
    v = std::exp(v - mx);
    sum += v;
  }
  for (double& v : out) v /= sum;
  return out;
}

}  // namespace flns
