#pragma once

// Small stateful building blocks shared by the search and retraining networks.

#include <memory>
#include <string>
#include <vector>

#include "fnas/ops.hpp"
#include "fnas/rng.hpp"
#include "fnas/tensor.hpp"

namespace fnas {

struct ForwardContext {
  Mode mode = Mode::train;
  Rng* rng = nullptr;  // stochastic activations (RReLU)
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Non-trainable state that still has to survive a checkpoint round trip.
struct NamedBuffer {
  std::string name;
  std::vector<double>* values;
};

class Module {
 public:
  virtual ~Module() = default;
  virtual void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
    (void)prefix;
    (void)out;
  }
  virtual void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
    (void)prefix;
    (void)out;
  }
};

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named);

/// Kernel with fan-in scaled normal initialization (variance 2/fan_in).
class Conv2d : public Module {
 public:
  Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Conv2dOptions opt, Rng& init);
  Tensor forward(const Tensor& x) const { return conv2d(x, weight_, opt_); }
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  const Tensor& weight() const { return weight_; }

 private:
  Tensor weight_;
  Conv2dOptions opt_;
};

class BatchNorm2d : public Module {
 public:
  BatchNorm2d(std::size_t channels, bool affine);
  Tensor forward(const Tensor& x, Mode mode);
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  BatchNormState state_;
  Tensor gamma_;
  Tensor beta_;
};

/// ReLU → conv → BN, used for cell input projections.
class ReLUConvBN : public Module {
 public:
  ReLUConvBN(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
             std::size_t padding, bool affine, Rng& init);
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  Conv2d conv_;
  BatchNorm2d bn_;
};

/// ReLU, two 1×1 stride-2 convs on offset grids, concatenated, BN.
class FactorizedReduce : public Module {
 public:
  FactorizedReduce(std::size_t in_channels, std::size_t out_channels, bool affine, Rng& init);
  Tensor forward(const Tensor& x, const ForwardContext& ctx);
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  Conv2d conv_a_;
  Conv2d conv_b_;
  BatchNorm2d bn_;
};

/// Classifier weights uniform in ±1/√fan_in, bias likewise.
class Linear : public Module {
 public:
  Linear(std::size_t in_features, std::size_t out_features, Rng& init);
  Tensor forward(const Tensor& x) const { return linear(x, weight_, bias_); }
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;

 private:
  Tensor weight_;
  Tensor bias_;
};

}  // namespace fnas
