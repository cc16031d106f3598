#include "fnas/activations.hpp"

#include <cmath>
#include <string>

#include "fnas/errors.hpp"
#include "reduce.hpp"
#include "vexp.hpp"

namespace fnas {
namespace {

constexpr std::array<std::string_view, 9> kNames = {"relu", "relu6", "leaky_relu", "prelu", "rrelu",
                                                     "elu",  "celu",  "selu",       "swish"};

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

}  // namespace

std::string_view activation_name(ActivationKind kind) { return kNames[static_cast<std::size_t>(kind)]; }

std::optional<ActivationKind> find_activation(std::string_view name) {
  for (std::size_t i = 0; i < kNames.size(); ++i) {
    if (kNames[i] == name) return kAllActivations[i];
  }
  return std::nullopt;
}

ActivationKind parse_activation(std::string_view name) {
  if (auto k = find_activation(name)) return *k;
  throw ConfigError("unknown activation '" + std::string(name) + "'");
}

bool has_learnable_parameter(ActivationKind kind) {
  return kind == ActivationKind::prelu || kind == ActivationKind::swish;
}

ActivationInstance::ActivationInstance(ActivationKind kind, const ActivationConstants& constants)
    : kind_(kind), constants_(constants) {
  if (kind == ActivationKind::prelu) parameter_ = Tensor::scalar(constants.prelu_init, true);
  if (kind == ActivationKind::swish) parameter_ = Tensor::scalar(constants.swish_init, true);
}

std::vector<ActivationInstance> activation_registry(const ActivationConstants& constants) {
  std::vector<ActivationInstance> out;
  for (auto k : kAllActivations) out.emplace_back(k, constants);
  return out;
}

ActivationPoint evaluate_activation(ActivationKind kind, const ActivationConstants& c, double parameter,
                                    double rrelu_slope, double x) {
  switch (kind) {
    case ActivationKind::relu:
      return x > 0.0 ? ActivationPoint{x, 1.0, 0.0} : ActivationPoint{0.0, 0.0, 0.0};
    case ActivationKind::relu6:
      if (x <= 0.0) return {0.0, 0.0, 0.0};
      if (x >= 6.0) return {6.0, 0.0, 0.0};
      return {x, 1.0, 0.0};
    case ActivationKind::leaky_relu:
      return x > 0.0 ? ActivationPoint{x, 1.0, 0.0} : ActivationPoint{c.leaky_slope * x, c.leaky_slope, 0.0};
    case ActivationKind::prelu:
      return x > 0.0 ? ActivationPoint{x, 1.0, 0.0} : ActivationPoint{parameter * x, parameter, x};
    case ActivationKind::rrelu:
      return x >= 0.0 ? ActivationPoint{x, 1.0, 0.0} : ActivationPoint{rrelu_slope * x, rrelu_slope, 0.0};
    case ActivationKind::elu: {
      if (x > 0.0) return {x, 1.0, 0.0};
      const double e = std::exp(x);
      return {c.elu_alpha * (e - 1.0), c.elu_alpha * e, 0.0};
    }
    case ActivationKind::celu: {
      if (x > 0.0) return {x, 1.0, 0.0};
      const double e = std::exp(x / c.celu_alpha);
      return {c.celu_alpha * (e - 1.0), e, 0.0};
    }
    case ActivationKind::selu: {
      if (x > 0.0) return {c.selu_lambda * x, c.selu_lambda, 0.0};
      const double e = std::exp(x);
      return {c.selu_lambda * c.selu_alpha * (e - 1.0), c.selu_lambda * c.selu_alpha * e, 0.0};
    }
    case ActivationKind::swish: {
      const double s = sigmoid(parameter * x);
      const double ds = s * (1.0 - s);
      return {x * s, s + parameter * x * ds, x * x * ds};
    }
  }
  return {0.0, 0.0, 0.0};
}

namespace {

double rrelu_eval_slope(const ActivationConstants& c) { return 0.5 * (c.rrelu_lower + c.rrelu_upper); }

std::vector<double> sample_rrelu_slopes(const ActivationConstants& c, std::size_t n, Mode mode, Rng* rng) {
  if (mode == Mode::eval) return std::vector<double>(n, rrelu_eval_slope(c));
  if (rng == nullptr) throw UsageError("RReLU in train mode requires a random generator");
  std::vector<double> s(n);
  for (auto& v : s) v = rng->uniform(c.rrelu_lower, c.rrelu_upper);
  return s;
}

struct Entry {
  ActivationKind kind;
  ActivationConstants constants;
  double param = 0.0;
  std::size_t input_index = 0;  // position of the learnable scalar among op inputs, 0 if none
  std::vector<double> slopes;   // RReLU only
};

bool uses_shared_exp(const Entry& e) {
  return e.kind == ActivationKind::elu || e.kind == ActivationKind::selu ||
         (e.kind == ActivationKind::celu && e.constants.celu_alpha == 1.0);
}

// exp(x) on the non-positive half, the only place ELU/CELU/SELU need it.
void negative_exp(const double* x, std::size_t n, std::vector<double>& ex) {
  ex.resize(n);
  for (std::size_t i = 0; i < n; ++i) ex[i] = x[i] > 0.0 ? 0.0 : x[i];
  detail::exp_array(ex.data(), ex.data(), n);
  for (std::size_t i = 0; i < n; ++i) ex[i] = x[i] > 0.0 ? 0.0 : ex[i];
}

// Values (and optionally derivatives) of one activation over a buffer. The
// formulas are those of evaluate_activation, arranged as branch-free loops.
void eval_entry(const Entry& e, const double* x, std::size_t n, const std::vector<double>& shared_ex, double* v,
                double* d, double* dp) {
  const auto& c = e.constants;
  const double a = e.param;
  thread_local std::vector<double> scratch;
  switch (e.kind) {
    case ActivationKind::relu:
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] > 0.0 ? x[i] : 0.0;
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0.0 ? 1.0 : 0.0;
      break;
    case ActivationKind::relu6:
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] <= 0.0 ? 0.0 : (x[i] >= 6.0 ? 6.0 : x[i]);
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = (x[i] > 0.0 && x[i] < 6.0) ? 1.0 : 0.0;
      break;
    case ActivationKind::leaky_relu:
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] > 0.0 ? x[i] : c.leaky_slope * x[i];
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0.0 ? 1.0 : c.leaky_slope;
      break;
    case ActivationKind::prelu:
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] > 0.0 ? x[i] : a * x[i];
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0.0 ? 1.0 : a;
      if (dp) for (std::size_t i = 0; i < n; ++i) dp[i] = x[i] > 0.0 ? 0.0 : x[i];
      break;
    case ActivationKind::rrelu: {
      const double* sl = e.slopes.data();
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] >= 0.0 ? x[i] : sl[i] * x[i];
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] >= 0.0 ? 1.0 : sl[i];
      break;
    }
    case ActivationKind::elu: {
      const double* ex = shared_ex.data();
      const double al = c.elu_alpha;
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] > 0.0 ? x[i] : al * (ex[i] - 1.0);
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0.0 ? 1.0 : al * ex[i];
      break;
    }
    case ActivationKind::celu: {
      const double al = c.celu_alpha;
      const double* ex = shared_ex.data();
      if (al != 1.0) {
        scratch.resize(n);
        for (std::size_t i = 0; i < n; ++i) scratch[i] = x[i] > 0.0 ? 0.0 : x[i] / al;
        detail::exp_array(scratch.data(), scratch.data(), n);
        ex = scratch.data();
      }
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] > 0.0 ? x[i] : al * (ex[i] - 1.0);
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0.0 ? 1.0 : ex[i];
      break;
    }
    case ActivationKind::selu: {
      const double* ex = shared_ex.data();
      const double lam = c.selu_lambda, la = c.selu_lambda * c.selu_alpha;
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] > 0.0 ? lam * x[i] : la * (ex[i] - 1.0);
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = x[i] > 0.0 ? lam : la * ex[i];
      break;
    }
    case ActivationKind::swish: {
      scratch.resize(n);
      double* sg = scratch.data();
      // σ(z) from e^{-|z|}, stable on both sides
      for (std::size_t i = 0; i < n; ++i) sg[i] = -std::abs(a * x[i]);
      detail::exp_array(sg, sg, n);
      for (std::size_t i = 0; i < n; ++i) sg[i] = a * x[i] >= 0.0 ? 1.0 / (1.0 + sg[i]) : sg[i] / (1.0 + sg[i]);
      for (std::size_t i = 0; i < n; ++i) v[i] = x[i] * sg[i];
      if (d) for (std::size_t i = 0; i < n; ++i) d[i] = sg[i] + a * x[i] * (sg[i] * (1.0 - sg[i]));
      if (dp) for (std::size_t i = 0; i < n; ++i) dp[i] = x[i] * x[i] * (sg[i] * (1.0 - sg[i]));
      break;
    }
  }
}

Entry make_entry(const ActivationInstance& inst, std::size_t n, Mode mode, Rng* rng) {
  Entry e{inst.kind(), inst.constants(), 0.0, 0, {}};
  if (inst.learnable()) e.param = inst.parameter().item();
  if (inst.kind() == ActivationKind::rrelu) e.slopes = sample_rrelu_slopes(e.constants, n, mode, rng);
  return e;
}

}  // namespace

Tensor activate(const ActivationInstance& inst, const Tensor& x, Mode mode, Rng* rng) {
  Entry e = make_entry(inst, x.numel(), mode, rng);
  const std::size_t n = x.numel();
  std::vector<double> ex;
  if (uses_shared_exp(e)) negative_exp(x.data().data(), n, ex);
  std::vector<double> out(n);
  eval_entry(e, x.data().data(), n, ex, out.data(), nullptr, nullptr);
  std::vector<Tensor> inputs{x};
  if (inst.learnable()) {
    e.input_index = 1;
    inputs.push_back(inst.parameter());
  }
  return make_op_result(x.shape(), std::move(out), std::move(inputs), activation_name(e.kind).data(),
                        [e = std::move(e)](TensorImpl& self) {
                          const auto& in = self.inputs[0]->data;
                          const std::size_t n = in.size();
                          const bool need_x = self.input_needs_grad(0);
                          const bool need_p = e.input_index != 0 && self.input_needs_grad(e.input_index);
                          if (!need_x && !need_p) return;
                          std::vector<double> ex;
                          if (uses_shared_exp(e)) negative_exp(in.data(), n, ex);
                          std::vector<double> v(n), d(n), dp(need_p ? n : 0);
                          eval_entry(e, in.data(), n, ex, v.data(), d.data(), need_p ? dp.data() : nullptr);
                          const double* g = self.grad.data();
                          if (need_x) {
                            double* gx = self.inputs[0]->ensure_grad().data();
                            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * d[i];
                          }
                          if (need_p) self.inputs[e.input_index]->ensure_grad()[0] += detail::dot(g, dp.data(), n);
                        });
}

Tensor mixed_activation(const Tensor& x, const Tensor& weights, const std::vector<ActivationInstance>& instances,
                        Mode mode, Rng* rng) {
  const std::size_t k = instances.size();
  if (k == 0 || weights.rank() != 1 || weights.numel() != k) {
    throw ConfigError("mixed_activation: " + std::to_string(weights.numel()) + " weights for " +
                      std::to_string(k) + " activations");
  }
  const std::size_t n = x.numel();
  std::vector<Entry> entries;
  std::vector<Tensor> inputs{x, weights};
  bool shared = false;
  for (const auto& inst : instances) {
    Entry e = make_entry(inst, n, mode, rng);
    if (inst.learnable()) {
      e.input_index = inputs.size();
      inputs.push_back(inst.parameter());
    }
    shared = shared || uses_shared_exp(e);
    entries.push_back(std::move(e));
  }

  const double* in = x.data().data();
  auto w = weights.data();
  std::vector<double> ex;
  if (shared) negative_exp(in, n, ex);
  std::vector<double> out(n, 0.0), v(n);
  for (std::size_t j = 0; j < k; ++j) {
    eval_entry(entries[j], in, n, ex, v.data(), nullptr, nullptr);
    const double wj = w[j];
    for (std::size_t i = 0; i < n; ++i) out[i] += wj * v[i];
  }

  return make_op_result(x.shape(), std::move(out), std::move(inputs), "mixed_activation",
                        [entries = std::move(entries), shared](TensorImpl& self) {
                          const auto& in = self.inputs[0]->data;
                          const auto& w = self.inputs[1]->data;
                          const double* g = self.grad.data();
                          const std::size_t n = in.size();
                          const bool need_x = self.input_needs_grad(0);
                          const bool need_w = self.input_needs_grad(1);
                          std::vector<double> ex;
                          if (shared) negative_exp(in.data(), n, ex);
                          std::vector<double> dx(need_x ? n : 0, 0.0), v(n), d(n), dp(n);
                          for (std::size_t j = 0; j < entries.size(); ++j) {
                            const auto& e = entries[j];
                            const bool need_p = e.input_index != 0 && self.input_needs_grad(e.input_index);
                            eval_entry(e, in.data(), n, ex, v.data(), need_x ? d.data() : nullptr,
                                       need_p ? dp.data() : nullptr);
                            const double wj = w[j];
                            if (need_x) {
                              for (std::size_t i = 0; i < n; ++i) dx[i] += wj * d[i];
                            }
                            if (need_w) self.inputs[1]->ensure_grad()[j] += detail::dot(g, v.data(), n);
                            if (need_p) self.inputs[e.input_index]->ensure_grad()[0] += wj * detail::dot(g, dp.data(), n);
                          }
                          if (need_x) {
                            auto& gx = self.inputs[0]->ensure_grad();
                            for (std::size_t i = 0; i < n; ++i) gx[i] += g[i] * dx[i];
                          }
                        });
}

}  // namespace fnas
