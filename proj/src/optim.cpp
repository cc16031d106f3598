#include "fnas/optim.hpp"

#include <cmath>
#include <numbers>

#include "fnas/errors.hpp"

namespace fnas {

Optimizer::Optimizer(OptimizerKind kind, std::vector<Tensor> params, OptimizerHyper hyper)
    : params_(std::move(params)) {
  state_.kind = kind;
  state_.hyper = hyper;
  for (const auto& p : params_) {
    if (!p.defined()) throw UsageError("optimizer given an undefined parameter");
    state_.first.emplace_back(p.numel(), 0.0);
    if (kind == OptimizerKind::adam) state_.second.emplace_back(p.numel(), 0.0);
  }
}

Optimizer Optimizer::sgd(std::vector<Tensor> params, double lr, double momentum, double weight_decay) {
  OptimizerHyper h;
  h.lr = lr;
  h.momentum = momentum;
  h.weight_decay = weight_decay;
  return Optimizer(OptimizerKind::sgd_momentum, std::move(params), h);
}

Optimizer Optimizer::adam(std::vector<Tensor> params, double lr, double beta1, double beta2, double weight_decay,
                          double eps) {
  OptimizerHyper h;
  h.lr = lr;
  h.beta1 = beta1;
  h.beta2 = beta2;
  h.eps = eps;
  h.weight_decay = weight_decay;
  return Optimizer(OptimizerKind::adam, std::move(params), h);
}

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Optimizer::step() {
  const auto& h = state_.hyper;
  ++state_.step;
  const double t = static_cast<double>(state_.step);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto value = p.mutable_data();
    auto grad = p.grad();
    if (grad.size() != value.size() || state_.first[k].size() != value.size()) {
      throw UsageError("optimizer: gradient/buffer shape does not match parameter " + std::to_string(k));
    }
    auto& m = state_.first[k];
    if (state_.kind == OptimizerKind::sgd_momentum) {
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i] + h.weight_decay * value[i];
        m[i] = h.momentum * m[i] + g;
        value[i] -= h.lr * m[i];
      }
    } else {
      auto& v = state_.second[k];
      const double c1 = 1.0 - std::pow(h.beta1, t);
      const double c2 = 1.0 - std::pow(h.beta2, t);
      for (std::size_t i = 0; i < value.size(); ++i) {
        const double g = grad[i] + h.weight_decay * value[i];
        m[i] = h.beta1 * m[i] + (1.0 - h.beta1) * g;
        v[i] = h.beta2 * v[i] + (1.0 - h.beta2) * g * g;
        const double mhat = m[i] / c1;
        const double vhat = v[i] / c2;
        value[i] -= h.lr * mhat / (std::sqrt(vhat) + h.eps);
      }
    }
  }
}

void Optimizer::load_state(OptimizerState state) {
  if (state.kind != state_.kind || state.first.size() != params_.size()) {
    throw FormatError("optimizer state does not match parameter list");
  }
  for (std::size_t k = 0; k < params_.size(); ++k) {
    if (state.first[k].size() != params_[k].numel() ||
        (state.kind == OptimizerKind::adam && state.second.at(k).size() != params_[k].numel())) {
      throw FormatError("optimizer buffer " + std::to_string(k) + " has the wrong size");
    }
  }
  if (state.step < state_.step) throw FormatError("optimizer step counter may not decrease");
  state_ = std::move(state);
}

double cosine_lr(double t, double total, double lr_max, double lr_min) {
  if (total <= 0.0) throw ConfigError("cosine_lr: total steps must be positive");
  if (t < 0.0 || t > total) throw ConfigError("cosine_lr: step outside [0, T]");
  return lr_min + (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * t / total)) / 2.0;
}

double clip_grad_norm(const std::vector<Tensor>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const double f = max_norm / (norm + 1e-6);
    for (auto p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.grad()) g *= f;
    }
  }
  return norm;
}

}  // namespace fnas
