#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fnas/tensor.hpp"

namespace fnas {

enum class OptimizerKind { sgd_momentum, adam };

struct OptimizerHyper {
  double lr = 0.01;
  double momentum = 0.0;  // sgd
  double beta1 = 0.9;     // adam
  double beta2 = 0.999;   // adam
  double eps = 1e-8;      // adam
  double weight_decay = 0.0;
};

/// Everything an optimizer carries between steps; one buffer per parameter,
/// shaped like it.
struct OptimizerState {
  OptimizerKind kind = OptimizerKind::sgd_momentum;
  OptimizerHyper hyper;
  std::uint64_t step = 0;
  std::vector<std::vector<double>> first;   // sgd momentum buffer / adam m
  std::vector<std::vector<double>> second;  // adam v (empty for sgd)
};

/// Owns the update rule for a fixed list of parameters.
///
/// SGD: buf = momentum·buf + (g + wd·p); p -= lr·buf.
/// Adam: g' = g + wd·p; bias-corrected first/second moments; p -= lr·m̂/(√v̂ + eps).
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, std::vector<Tensor> params, OptimizerHyper hyper);

  static Optimizer sgd(std::vector<Tensor> params, double lr, double momentum = 0.0, double weight_decay = 0.0);
  static Optimizer adam(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                        double weight_decay = 0.0, double eps = 1e-8);

  /// Applies one update from the parameters' current gradients.
  void step();
  void zero_grad();

  void set_lr(double lr) { state_.hyper.lr = lr; }
  double lr() const { return state_.hyper.lr; }
  std::uint64_t step_count() const { return state_.step; }

  const std::vector<Tensor>& params() const { return params_; }
  const OptimizerState& state() const { return state_; }
  /// Replaces the state; buffer shapes must mirror the parameters.
  void load_state(OptimizerState state);

 private:
  std::vector<Tensor> params_;
  OptimizerState state_;
};

/// η_min + (η_max − η_min)(1 + cos(π t/T))/2, for 0 ≤ t ≤ T.
double cosine_lr(double t, double total, double lr_max, double lr_min);

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(const std::vector<Tensor>& params, double max_norm);

}  // namespace fnas
