#include "fnas/search_space.hpp"

#include <algorithm>
#include <set>
#include <string>

#include "fnas/errors.hpp"

namespace fnas {
namespace {

constexpr std::array<std::string_view, 8> kOpNames = {"sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3",
                                                      "dil_conv_5x5", "max_pool_3x3", "avg_pool_3x3",
                                                      "skip_connect", "none"};

}  // namespace

std::string_view regular_op_name(RegularOpKind kind) { return kOpNames[static_cast<std::size_t>(kind)]; }

std::optional<RegularOpKind> find_regular_op(std::string_view name) {
  for (std::size_t i = 0; i < kOpNames.size(); ++i) {
    if (kOpNames[i] == name) return kAllRegularOps[i];
  }
  return std::nullopt;
}

RegularOpKind parse_regular_op(std::string_view name) {
  if (auto k = find_regular_op(name)) return *k;
  throw ConfigError("unknown regular operator '" + std::string(name) + "'");
}

bool is_parameterized(RegularOpKind kind) {
  switch (kind) {
    case RegularOpKind::sep_conv_3x3:
    case RegularOpKind::sep_conv_5x5:
    case RegularOpKind::dil_conv_3x3:
    case RegularOpKind::dil_conv_5x5:
      return true;
    default:
      return false;
  }
}

void SpaceConfig::validate() const {
  if (regular_ops.empty()) throw ConfigError("regular operator registry is empty");
  if (activation_ops.empty()) throw ConfigError("activation operator registry is empty");
  if (std::set<RegularOpKind>(regular_ops.begin(), regular_ops.end()).size() != regular_ops.size()) {
    throw ConfigError("regular operator registry contains duplicates");
  }
  if (std::set<ActivationKind>(activation_ops.begin(), activation_ops.end()).size() != activation_ops.size()) {
    throw ConfigError("activation operator registry contains duplicates");
  }
  if (std::all_of(regular_ops.begin(), regular_ops.end(), [](auto k) { return k == RegularOpKind::none; })) {
    throw ConfigError("regular operator registry needs at least one operator other than none");
  }
  if (num_intermediate_nodes < 1) throw ConfigError("need at least one intermediate node");
  if (edges_selected_per_node < 1 || edges_selected_per_node > 2) {
    throw ConfigError("edges_selected_per_node must be 1 or 2 (the first node has two predecessors)");
  }
  if (cell_types < 1 || cell_types > 2) throw ConfigError("cell_types must be 1 or 2");
}

std::size_t SpaceConfig::parameterized_count() const {
  return static_cast<std::size_t>(std::count_if(regular_ops.begin(), regular_ops.end(), is_parameterized));
}

std::size_t SpaceConfig::non_parameterized_count() const { return regular_ops.size() - parameterized_count(); }

bool SpaceConfig::has_none() const {
  return std::find(regular_ops.begin(), regular_ops.end(), RegularOpKind::none) != regular_ops.end();
}

std::size_t SpaceConfig::edge_count() const { return edges_for_nodes(num_intermediate_nodes); }

std::size_t edge_index(std::size_t intermediate, std::size_t predecessor) {
  // Σ_{i<j} (i+2) = j(j+3)/2
  return intermediate * (intermediate + 3) / 2 + predecessor;
}

std::size_t edges_for_nodes(std::size_t intermediate_nodes) { return edge_index(intermediate_nodes, 0); }

std::size_t super_operator_count(const SpaceConfig& cfg) {
  cfg.validate();
  return cfg.parameterized_count() * cfg.activation_ops.size() + cfg.non_parameterized_count();
}

ArchParamCount arch_param_count(const SpaceConfig& cfg) {
  cfg.validate();
  const std::size_t e = cfg.edge_count();
  ArchParamCount c{};
  c.alpha_per_cell = e * cfg.regular_ops.size();
  c.beta_per_cell = e * cfg.activation_ops.size();
  c.flat_per_cell = e * super_operator_count(cfg);
  c.alpha_total = c.alpha_per_cell * cfg.cell_types;
  c.beta_total = c.beta_per_cell * cfg.cell_types;
  c.flat_total = c.flat_per_cell * cfg.cell_types;
  return c;
}

std::size_t choices_per_edge(const SpaceConfig& cfg) {
  cfg.validate();
  const std::size_t non_param_real = cfg.non_parameterized_count() - (cfg.has_none() ? 1 : 0);
  return cfg.parameterized_count() * cfg.activation_ops.size() + non_param_real;
}

BigInt binomial(std::size_t n, std::size_t k) {
  if (k > n) return 0;
  BigInt r = 1;
  for (std::size_t i = 1; i <= k; ++i) {
    r *= n + 1 - i;
    r /= i;
  }
  return r;
}

BigInt space_cardinality(const SpaceConfig& cfg) {
  cfg.validate();
  const std::size_t k = cfg.edges_selected_per_node;
  BigInt topologies = 1;
  for (std::size_t j = 0; j < cfg.num_intermediate_nodes; ++j) topologies *= binomial(j + 2, k);
  const BigInt per_cell =
      topologies * boost::multiprecision::pow(BigInt(choices_per_edge(cfg)),
                                              static_cast<unsigned>(k * cfg.num_intermediate_nodes));
  return boost::multiprecision::pow(per_cell, static_cast<unsigned>(cfg.cell_types));
}

std::string to_scientific(const BigInt& value, int significant_digits) {
  if (value < 0) return "-" + to_scientific(-value, significant_digits);
  std::string digits = value.str();
  if (value == 0) return "0";
  const auto sig = static_cast<std::size_t>(std::max(1, significant_digits));
  std::size_t exponent = digits.size() - 1;
  std::string mant = digits.substr(0, std::min(sig, digits.size()));
  if (digits.size() > sig && digits[sig] >= '5') {
    // round half up, carrying through nines
    int i = static_cast<int>(mant.size()) - 1;
    while (i >= 0 && mant[static_cast<std::size_t>(i)] == '9') mant[static_cast<std::size_t>(i--)] = '0';
    if (i >= 0) {
      ++mant[static_cast<std::size_t>(i)];
    } else {
      mant.insert(mant.begin(), '1');
      mant.pop_back();
      ++exponent;
    }
  }
  std::string out(1, mant[0]);
  if (mant.size() > 1) out += "." + mant.substr(1);
  return out + "e" + std::to_string(exponent);
}

// --- operators --------------------------------------------------------------------

namespace {

class SepConv final : public RegularOp {
 public:
  SepConv(RegularOpKind kind, std::size_t c, std::size_t k, std::size_t stride, bool affine, Rng& init)
      : kind_(kind),
        dw1_(c, c, k, Conv2dOptions{stride, k / 2, 1, c}, init),
        pw1_(c, c, 1, Conv2dOptions{}, init),
        bn1_(c, affine),
        dw2_(c, c, k, Conv2dOptions{1, k / 2, 1, c}, init),
        pw2_(c, c, 1, Conv2dOptions{}, init),
        bn2_(c, affine) {}

  RegularOpKind kind() const override { return kind_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    auto h = bn1_.forward(pw1_.forward(dw1_.forward(x)), ctx.mode);
    return bn2_.forward(pw2_.forward(dw2_.forward(relu(h))), ctx.mode);
  }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    dw1_.collect_parameters(prefix + "dw1.", out);
    pw1_.collect_parameters(prefix + "pw1.", out);
    bn1_.collect_parameters(prefix + "bn1.", out);
    dw2_.collect_parameters(prefix + "dw2.", out);
    pw2_.collect_parameters(prefix + "pw2.", out);
    bn2_.collect_parameters(prefix + "bn2.", out);
  }

  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
    bn1_.collect_buffers(prefix + "bn1.", out);
    bn2_.collect_buffers(prefix + "bn2.", out);
  }

 private:
  RegularOpKind kind_;
  Conv2d dw1_, pw1_;
  BatchNorm2d bn1_;
  Conv2d dw2_, pw2_;
  BatchNorm2d bn2_;
};

class DilConv final : public RegularOp {
 public:
  DilConv(RegularOpKind kind, std::size_t c, std::size_t k, std::size_t stride, bool affine, Rng& init)
      : kind_(kind),
        dw_(c, c, k, Conv2dOptions{stride, k - 1, 2, c}, init),
        pw_(c, c, 1, Conv2dOptions{}, init),
        bn_(c, affine) {}

  RegularOpKind kind() const override { return kind_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    return bn_.forward(pw_.forward(dw_.forward(x)), ctx.mode);
  }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    dw_.collect_parameters(prefix + "dw.", out);
    pw_.collect_parameters(prefix + "pw.", out);
    bn_.collect_parameters(prefix + "bn.", out);
  }

  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
    bn_.collect_buffers(prefix + "bn.", out);
  }

 private:
  RegularOpKind kind_;
  Conv2d dw_, pw_;
  BatchNorm2d bn_;
};

class PoolBN final : public RegularOp {
 public:
  PoolBN(RegularOpKind kind, std::size_t c, std::size_t stride, bool affine)
      : kind_(kind), stride_(stride), bn_(c, affine) {}

  RegularOpKind kind() const override { return kind_; }

  Tensor forward(const Tensor& x, const ForwardContext& ctx) override {
    const auto pk = kind_ == RegularOpKind::max_pool_3x3 ? PoolKind::max : PoolKind::avg;
    return bn_.forward(pool2d(x, pk, 3, stride_, 1), ctx.mode);
  }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    bn_.collect_parameters(prefix + "bn.", out);
  }

  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
    bn_.collect_buffers(prefix + "bn.", out);
  }

 private:
  RegularOpKind kind_;
  std::size_t stride_;
  BatchNorm2d bn_;
};

class Identity final : public RegularOp {
 public:
  RegularOpKind kind() const override { return RegularOpKind::skip_connect; }
  Tensor forward(const Tensor& x, const ForwardContext&) override { return x; }
};

class ReducingSkip final : public RegularOp {
 public:
  ReducingSkip(std::size_t c, bool affine, Rng& init) : reduce_(c, c, affine, init) {}
  RegularOpKind kind() const override { return RegularOpKind::skip_connect; }
  Tensor forward(const Tensor& x, const ForwardContext& ctx) override { return reduce_.forward(x, ctx); }
  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override {
    reduce_.collect_parameters(prefix + "reduce.", out);
  }
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override {
    reduce_.collect_buffers(prefix + "reduce.", out);
  }

 private:
  FactorizedReduce reduce_;
};

class Zero final : public RegularOp {
 public:
  explicit Zero(std::size_t stride) : stride_(stride) {}
  RegularOpKind kind() const override { return RegularOpKind::none; }
  Tensor forward(const Tensor& x, const ForwardContext&) override {
    return Tensor::zeros({x.dim(0), x.dim(1), (x.dim(2) - 1) / stride_ + 1, (x.dim(3) - 1) / stride_ + 1});
  }

 private:
  std::size_t stride_;
};

}  // namespace

std::unique_ptr<RegularOp> regular_op_factory(RegularOpKind kind, std::size_t channels, std::size_t stride,
                                              bool affine, Rng& init) {
  if (channels == 0) throw ConfigError("regular_op_factory: channels must be positive");
  if (stride != 1 && stride != 2) throw ConfigError("regular_op_factory: stride must be 1 or 2");
  switch (kind) {
    case RegularOpKind::sep_conv_3x3:
      return std::make_unique<SepConv>(kind, channels, 3, stride, affine, init);
    case RegularOpKind::sep_conv_5x5:
      return std::make_unique<SepConv>(kind, channels, 5, stride, affine, init);
    case RegularOpKind::dil_conv_3x3:
      return std::make_unique<DilConv>(kind, channels, 3, stride, affine, init);
    case RegularOpKind::dil_conv_5x5:
      return std::make_unique<DilConv>(kind, channels, 5, stride, affine, init);
    case RegularOpKind::max_pool_3x3:
    case RegularOpKind::avg_pool_3x3:
      return std::make_unique<PoolBN>(kind, channels, stride, affine);
    case RegularOpKind::skip_connect:
      if (stride == 1) return std::make_unique<Identity>();
      return std::make_unique<ReducingSkip>(channels, affine, init);
    case RegularOpKind::none:
      return std::make_unique<Zero>(stride);
  }
  throw ConfigError("regular_op_factory: unknown operator kind");
}

}  // namespace fnas
