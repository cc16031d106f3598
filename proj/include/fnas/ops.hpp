#pragma once

// Differentiable primitives used by the super-network and the retraining
// network. Feature maps are NCHW, row-major.

#include <cstdint>
#include <span>
#include <vector>

#include "fnas/tensor.hpp"

namespace fnas {

enum class Mode { train, eval };

// --- elementwise / reductions ---------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double factor);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor reshape(const Tensor& a, Shape shape);
Tensor relu(const Tensor& x);

/// Multiplies every sample (leading dimension) by its own constant factor.
Tensor scale_samples(const Tensor& x, std::span<const double> factors);

/// Σ_k weights[k] · terms[k]. Undefined terms stand for all-zero maps and are
/// skipped; weights is 1-D with one entry per term.
Tensor weighted_sum(const std::vector<Tensor>& terms, const Tensor& weights);

/// Row r of a 2-D tensor as a 1-D tensor.
Tensor row(const Tensor& table, std::size_t r);

// --- softmax / loss -----------------------------------------------------------

/// Max-shifted softmax of a plain vector. Throws ConfigError on empty input.
std::vector<double> softmax(std::span<const double> logits);
/// Differentiable softmax over a 1-D tensor.
Tensor softmax(const Tensor& logits);
/// Softmax applied independently to every row of a 2-D tensor.
Tensor softmax_rows(const Tensor& logits);

/// Mean cross entropy of logits [N,K] against class indices. With smoothing
/// eps the target is (1-eps)·onehot + eps/K.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels, double smoothing = 0.0);

// --- convolution / pooling ------------------------------------------------

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

/// input [N,C,H,W], kernel [Cout, C/groups, k, k]; no bias.
Tensor conv2d(const Tensor& input, const Tensor& kernel, const Conv2dOptions& opt = {});

std::size_t conv_output_size(std::size_t in, std::size_t kernel, std::size_t stride, std::size_t padding,
                             std::size_t dilation);

enum class PoolKind { max, avg };

/// Divisor of avg pooling is always window², so padded cells count as zeros.
inline constexpr bool kAvgPoolCountsPadding = true;

/// Max backward routes the gradient to the first (lowest index) maximum.
Tensor pool2d(const Tensor& input, PoolKind kind, std::size_t window, std::size_t stride, std::size_t padding);

/// [N,C,H,W] -> [N,C]
Tensor global_avg_pool(const Tensor& input);

// --- normalization ----------------------------------------------------------

struct BatchNormState {
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.9;  // running = momentum·running + (1-momentum)·batch
  double eps = 1e-5;

  BatchNormState() = default;
  explicit BatchNormState(std::size_t channels) : running_mean(channels, 0.0), running_var(channels, 1.0) {}
};

/// Per-channel normalization over N,H,W (train) or with running statistics
/// (eval). gamma/beta are applied only when both are defined.
Tensor batch_norm(const Tensor& input, BatchNormState& state, Mode mode, const Tensor& gamma = {},
                  const Tensor& beta = {});

// --- shape plumbing ---------------------------------------------------------

Tensor concat_channels(const std::vector<Tensor>& parts);
/// input[:, :, top:top+height, left:left+width]
Tensor crop(const Tensor& input, std::size_t top, std::size_t left, std::size_t height, std::size_t width);

/// x [N,F] · weightᵀ [F,K] + bias [K]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

// --- multiply-accumulate accounting ---------------------------------------

/// Multiply-accumulates issued by conv2d and linear forwards on this thread.
std::uint64_t mac_count();
void reset_mac_count();

}  // namespace fnas
