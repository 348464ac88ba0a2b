#pragma once

#include <span>
#include <vector>

#include "flns/model.hpp"

namespace flns {

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

// Adaptive-moment gradient descent over a fixed list of parameter matrices.
// The list passed to step() must have the same shapes on every call.
class Adam {
 public:
  explicit Adam(AdamConfig config = {}) : config_(config) {}

  void step(std::span<Matrix<float>* const> params, std::span<const Matrix<float>* const> grads,
            double learning_rate);
  void step(std::span<Matrix<float>* const> params, std::span<const Matrix<float>* const> grads) {
    step(params, grads, config_.learning_rate);
  }
  long steps_taken() const { return t_; }

 private:
  AdamConfig config_;
  long t_ = 0;
  std::vector<Matrix<float>> m_, v_;
};

// Scales all gradients so their joint L2 norm is at most max_norm; returns the
// norm before scaling.
double clip_global_norm(std::span<Matrix<float>* const> grads, double max_norm);

}  // namespace flns
