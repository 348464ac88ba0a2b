#include "flns/optim.hpp"

#include <cmath>

#include "flns/errors.hpp"

namespace flns {

void Adam::step(std::span<Matrix<float>* const> params, std::span<const Matrix<float>* const> grads,
                double learning_rate) {
  if (params.size() != grads.size()) throw Error(ErrorCode::kDimensionError, "params/grads count mismatch");
  if (m_.empty()) {
    for (auto* p : params) {
      m_.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
      v_.push_back(Matrix<float>::Zero(p->rows(), p->cols()));
    }
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  const auto b1 = static_cast<float>(config_.beta1);
  const auto b2 = static_cast<float>(config_.beta2);
  const auto step_size = static_cast<float>(learning_rate / bc1);
  const auto inv_bc2 = static_cast<float>(1.0 / bc2);
  const auto eps = static_cast<float>(config_.eps);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& m = m_[i];
    auto& v = v_[i];
    const auto& g = *grads[i];
    m = b1 * m + (1.0f - b1) * g;
    v = b2 * v + (1.0f - b2) * g.cwiseProduct(g);
    params[i]->array() -= step_size * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
  }
}

double clip_global_norm(std::span<Matrix<float>* const> grads, double max_norm) {
  double sq = 0.0;
  for (auto* g : grads) sq += g->cast<double>().squaredNorm();
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const auto scale = static_cast<float>(max_norm / norm);
    for (auto* g : grads) *g *= scale;
  }
  return norm;
}

}  // namespace flns
