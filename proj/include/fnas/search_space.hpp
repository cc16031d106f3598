#pragma once

// Regular operator group, the factorized / flat space constructions,
// architectural parameter counting and exact search-space cardinality.

#include <array>
#include <memory>
#include <optional>
#include <string_view>
#include <vector>

#include <boost/multiprecision/cpp_int.hpp>

#include "fnas/activations.hpp"
#include "fnas/nn.hpp"

namespace fnas {

enum class RegularOpKind {
  sep_conv_3x3,
  sep_conv_5x5,
  dil_conv_3x3,
  dil_conv_5x5,
  max_pool_3x3,
  avg_pool_3x3,
  skip_connect,
  none
};

inline constexpr std::array<RegularOpKind, 8> kAllRegularOps = {
    RegularOpKind::sep_conv_3x3, RegularOpKind::sep_conv_5x5, RegularOpKind::dil_conv_3x3,
    RegularOpKind::dil_conv_5x5, RegularOpKind::max_pool_3x3, RegularOpKind::avg_pool_3x3,
    RegularOpKind::skip_connect, RegularOpKind::none};

std::string_view regular_op_name(RegularOpKind kind);
std::optional<RegularOpKind> find_regular_op(std::string_view name);
RegularOpKind parse_regular_op(std::string_view name);
/// True exactly for the four convolutions; only these take a searched activation.
bool is_parameterized(RegularOpKind kind);

using BigInt = boost::multiprecision::cpp_int;

struct SpaceConfig {
  std::size_t num_intermediate_nodes = 4;
  std::size_t edges_selected_per_node = 2;
  std::vector<RegularOpKind> regular_ops{kAllRegularOps.begin(), kAllRegularOps.end()};
  std::vector<ActivationKind> activation_ops{kAllActivations.begin(), kAllActivations.end()};
  bool factorized = true;
  std::size_t cell_types = 2;

  /// Throws ConfigError on empty or duplicated registries and bad node counts.
  void validate() const;

  std::size_t parameterized_count() const;
  std::size_t non_parameterized_count() const;  // includes none
  bool has_none() const;
  /// Predecessor edges of all intermediate nodes (14 for four nodes).
  std::size_t edge_count() const;
};

/// Edges of intermediate node j (0-based) come from nodes 0..j+1; edges are
/// numbered node by node, predecessor by predecessor.
std::size_t edge_index(std::size_t intermediate, std::size_t predecessor);
std::size_t edges_for_nodes(std::size_t intermediate_nodes);

/// Flat pool size |parameterized|·|O₂| + |non-parameterized| (none included).
std::size_t super_operator_count(const SpaceConfig& cfg);

struct ArchParamCount {
  std::size_t alpha_per_cell;
  std::size_t beta_per_cell;
  std::size_t flat_per_cell;
  std::size_t alpha_total;
  std::size_t beta_total;
  std::size_t flat_total;
};
ArchParamCount arch_param_count(const SpaceConfig& cfg);

/// Non-none operator/activation choices available to one selected edge.
std::size_t choices_per_edge(const SpaceConfig& cfg);

/// Number of distinct derived architectures:
/// (Π_j C(j+2, k) · choices^(k·nodes))^cell_types.
BigInt space_cardinality(const SpaceConfig& cfg);

BigInt binomial(std::size_t n, std::size_t k);

/// Scientific notation with the given number of significant digits, e.g. "9.28e29".
std::string to_scientific(const BigInt& value, int significant_digits = 3);

// --- operator instances --------------------------------------------------------

/// A regular operator bound to a channel count and stride. For parameterized
/// kinds, forward() receives the input after the edge activation has been
/// applied; non-parameterized kinds receive the raw input.
class RegularOp : public Module {
 public:
  virtual RegularOpKind kind() const = 0;
  virtual Tensor forward(const Tensor& x, const ForwardContext& ctx) = 0;
};

/// Builds one operator. Every operator preserves the channel count; stride 2
/// halves the spatial size. Throws ConfigError for stride ∉ {1,2} or zero
/// channels.
std::unique_ptr<RegularOp> regular_op_factory(RegularOpKind kind, std::size_t channels, std::size_t stride,
                                              bool affine, Rng& init);

}  // namespace fnas
