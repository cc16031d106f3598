#include "fnas/nn.hpp"

#include <cmath>

#include "fnas/errors.hpp"

namespace fnas {

std::vector<Tensor> tensors_of(const std::vector<NamedTensor>& named) {
  std::vector<Tensor> out;
  out.reserve(named.size());
  for (const auto& n : named) out.push_back(n.tensor);
  return out;
}

Conv2d::Conv2d(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, Conv2dOptions opt, Rng& init)
    : opt_(opt) {
  if (opt.groups == 0 || in_channels % opt.groups != 0 || out_channels % opt.groups != 0) {
    throw ConfigError("Conv2d: groups must divide channel counts");
  }
  const std::size_t cg = in_channels / opt.groups;
  const double stddev = std::sqrt(2.0 / static_cast<double>(cg * kernel * kernel));
  std::vector<double> w(out_channels * cg * kernel * kernel);
  for (auto& v : w) v = init.normal(0.0, stddev);
  weight_ = Tensor({out_channels, cg, kernel, kernel}, std::move(w), true);
}

void Conv2d::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "weight", weight_});
}

BatchNorm2d::BatchNorm2d(std::size_t channels, bool affine) : state_(channels) {
  if (affine) {
    gamma_ = Tensor::full({channels}, 1.0, true);
    beta_ = Tensor::zeros({channels}, true);
  }
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) { return batch_norm(x, state_, mode, gamma_, beta_); }

void BatchNorm2d::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  if (gamma_.defined()) {
    out.push_back({prefix + "gamma", gamma_});
    out.push_back({prefix + "beta", beta_});
  }
}

void BatchNorm2d::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  out.push_back({prefix + "running_mean", &state_.running_mean});
  out.push_back({prefix + "running_var", &state_.running_var});
}

ReLUConvBN::ReLUConvBN(std::size_t in_channels, std::size_t out_channels, std::size_t kernel, std::size_t stride,
                       std::size_t padding, bool affine, Rng& init)
    : conv_(in_channels, out_channels, kernel, Conv2dOptions{stride, padding, 1, 1}, init),
      bn_(out_channels, affine) {}

Tensor ReLUConvBN::forward(const Tensor& x, const ForwardContext& ctx) {
  return bn_.forward(conv_.forward(relu(x)), ctx.mode);
}

void ReLUConvBN::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  conv_.collect_parameters(prefix + "conv.", out);
  bn_.collect_parameters(prefix + "bn.", out);
}

void ReLUConvBN::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  bn_.collect_buffers(prefix + "bn.", out);
}

FactorizedReduce::FactorizedReduce(std::size_t in_channels, std::size_t out_channels, bool affine, Rng& init)
    : conv_a_(in_channels, out_channels / 2, 1, Conv2dOptions{2, 0, 1, 1}, init),
      conv_b_(in_channels, out_channels - out_channels / 2, 1, Conv2dOptions{2, 0, 1, 1}, init),
      bn_(out_channels, affine) {
  if (out_channels < 2) throw ConfigError("FactorizedReduce needs at least 2 output channels");
}

Tensor FactorizedReduce::forward(const Tensor& x, const ForwardContext& ctx) {
  if (x.dim(2) % 2 != 0 || x.dim(3) % 2 != 0) {
    throw DimensionError("FactorizedReduce needs even spatial size, got " + shape_str(x.shape()));
  }
  auto r = relu(x);
  auto a = conv_a_.forward(r);
  auto b = conv_b_.forward(crop(r, 1, 1, x.dim(2) - 1, x.dim(3) - 1));
  return bn_.forward(concat_channels({a, b}), ctx.mode);
}

void FactorizedReduce::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  conv_a_.collect_parameters(prefix + "conv_a.", out);
  conv_b_.collect_parameters(prefix + "conv_b.", out);
  bn_.collect_parameters(prefix + "bn.", out);
}

void FactorizedReduce::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  bn_.collect_buffers(prefix + "bn.", out);
}

Linear::Linear(std::size_t in_features, std::size_t out_features, Rng& init) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_features));
  std::vector<double> w(out_features * in_features);
  for (auto& v : w) v = init.uniform(-bound, bound);
  std::vector<double> b(out_features);
  for (auto& v : b) v = init.uniform(-bound, bound);
  weight_ = Tensor({out_features, in_features}, std::move(w), true);
  bias_ = Tensor({out_features}, std::move(b), true);
}

void Linear::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({prefix + "weight", weight_});
  out.push_back({prefix + "bias", bias_});
}

}  // namespace fnas
