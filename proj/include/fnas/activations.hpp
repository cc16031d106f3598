#pragma once

// The activation operator group: nine activation functions, two of them with
// a learnable scalar (PReLU slope, Swish coefficient).

#include <array>
#include <optional>
#include <string_view>
#include <vector>

#include "fnas/ops.hpp"
#include "fnas/rng.hpp"
#include "fnas/tensor.hpp"

namespace fnas {

enum class ActivationKind { relu, relu6, leaky_relu, prelu, rrelu, elu, celu, selu, swish };

inline constexpr std::array<ActivationKind, 9> kAllActivations = {
    ActivationKind::relu, ActivationKind::relu6, ActivationKind::leaky_relu,
    ActivationKind::prelu, ActivationKind::rrelu, ActivationKind::elu,
    ActivationKind::celu, ActivationKind::selu, ActivationKind::swish};

/// Lowercase token used in genotype files and configs ("leaky_relu", "selu", ...).
std::string_view activation_name(ActivationKind kind);
std::optional<ActivationKind> find_activation(std::string_view name);
/// Like find_activation but throws ConfigError on unknown names.
ActivationKind parse_activation(std::string_view name);
bool has_learnable_parameter(ActivationKind kind);

struct ActivationConstants {
  double leaky_slope = 0.01;
  double elu_alpha = 1.0;
  double celu_alpha = 1.0;
  double selu_lambda = 1.0507009873554805;
  double selu_alpha = 1.6732632423543772;
  double rrelu_lower = 1.0 / 8.0;
  double rrelu_upper = 1.0 / 3.0;
  double prelu_init = 0.25;
  double swish_init = 1.0;
};

/// One activation with its constants and, for PReLU/Swish, its own learnable
/// scalar (a network weight, trained with ω).
class ActivationInstance {
 public:
  explicit ActivationInstance(ActivationKind kind, const ActivationConstants& constants = {});

  ActivationKind kind() const { return kind_; }
  const ActivationConstants& constants() const { return constants_; }
  /// Undefined for kinds without a learnable scalar.
  const Tensor& parameter() const { return parameter_; }
  bool learnable() const { return parameter_.defined(); }

 private:
  ActivationKind kind_;
  ActivationConstants constants_;
  Tensor parameter_;
};

/// Fresh instances of all nine kinds in registry order.
std::vector<ActivationInstance> activation_registry(const ActivationConstants& constants = {});

/// Value and partial derivatives of one activation at a point.
struct ActivationPoint {
  double value;
  double d_input;
  double d_parameter;  // zero for kinds without a learnable scalar
};

/// Scalar evaluation. `parameter` is the PReLU slope / Swish coefficient,
/// `rrelu_slope` the negative slope used by RReLU.
ActivationPoint evaluate_activation(ActivationKind kind, const ActivationConstants& c, double parameter,
                                    double rrelu_slope, double x);

/// Elementwise activation. RReLU samples its slope per element from rng in
/// train mode (UsageError if rng is null) and uses the midpoint in eval mode.
Tensor activate(const ActivationInstance& inst, const Tensor& x, Mode mode, Rng* rng);

/// Σ_k weights[k] · instances[k](x), evaluated in a single fused pass.
Tensor mixed_activation(const Tensor& x, const Tensor& weights, const std::vector<ActivationInstance>& instances,
                        Mode mode, Rng* rng);

}  // namespace fnas
