#pragma once

// The weight-sharing search network: mixed edges, search cells and the
// stacked super-network, plus the architecture parameter banks (α, β, flat).

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "fnas/activations.hpp"
#include "fnas/nn.hpp"
#include "fnas/search_space.hpp"

namespace fnas {

/// How an edge combines its candidates.
///  mixed: Σ softmax(α)·o₁(σ(x)) with σ the β-weighted mixed activation (factorized search)
///  fixed: the same sum with σ one hard-wired activation (no β exists)
///  flat:  one softmax over every (o₁, o₂) super-operator (non-factorized search)
enum class EdgeMode { mixed, fixed, flat };

/// One entry of the flat candidate pool. Parameterized operators come first,
/// operator-major (sep_conv_3x3@relu, sep_conv_3x3@relu6, ...), followed by the
/// non-parameterized operators in registry order.
struct SuperOperator {
  RegularOpKind op;
  std::optional<ActivationKind> activation;
};
std::vector<SuperOperator> super_operators(const SpaceConfig& space);

struct SupernetConfig {
  SpaceConfig space;
  EdgeMode edge_mode = EdgeMode::mixed;
  ActivationKind fixed_activation = ActivationKind::relu;
  ActivationConstants constants;
  std::size_t input_channels = 3;
  std::size_t num_classes = 10;
  std::size_t channels = 16;
  std::size_t cells = 8;
  std::size_t stem_multiplier = 3;

  /// Throws ConfigError on inconsistent sizes.
  void validate() const;
};

/// Cells at depth ⌊n/3⌋ and ⌊2n/3⌋ reduce (none for fewer than three cells).
std::vector<bool> reduction_layout(std::size_t cells);

/// Architecture parameter bank index of a cell: 0 normal, 1 reduction. With a
/// single cell type every cell shares bank 0.
std::size_t cell_type_index(const SpaceConfig& space, bool reduction);
const char* cell_type_name(std::size_t index);

/// Per-cell-type logits, shared by every cell of that type.
struct ArchParams {
  std::vector<Tensor> alpha;  // [edges, |O₁|]   mixed and fixed modes
  std::vector<Tensor> beta;   // [edges, |O₂|]   mixed mode only
  std::vector<Tensor> flat;   // [edges, super-operators]   flat mode only

  ArchParams() = default;
  /// Zero-initialized bank laid out for the given space and mode.
  ArchParams(const SpaceConfig& space, EdgeMode mode);

  /// Uniform noise in ±noise. α, β and flat logits draw from separate named
  /// sub-streams of seed, so adding or removing β never perturbs α.
  void randomize(std::uint64_t seed, double noise = 1e-3);

  std::vector<NamedTensor> named() const;
  std::vector<Tensor> all() const { return tensors_of(named()); }
  ArchParams clone() const;
};

/// Mean Shannon entropy (nats) of the row softmaxes of each tensor in the list.
double mean_row_entropy(const std::vector<Tensor>& logits);

/// Candidate bank on one edge.
class MixedEdge : public Module {
 public:
  MixedEdge(const SupernetConfig& cfg, std::size_t channels, std::size_t stride, Rng& init, std::string label);

  /// weights: softmaxed α row (mixed/fixed) or flat row; activation_weights:
  /// softmaxed β row (mixed mode only). Throws NumericalError naming the edge
  /// if the output holds a NaN.
  Tensor forward(const Tensor& x, const Tensor& weights, const Tensor& activation_weights,
                 const ForwardContext& ctx);

  const std::string& label() const { return label_; }
  std::size_t candidate_count() const { return ops_.size(); }
  const std::vector<ActivationInstance>& activations() const { return activations_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  EdgeMode mode_;
  std::string label_;
  std::vector<std::unique_ptr<RegularOp>> ops_;
  std::vector<int> op_activation_;  // flat mode: activation index per candidate, -1 for raw input
  std::vector<ActivationInstance> activations_;
};

class SearchCell : public Module {
 public:
  SearchCell(const SupernetConfig& cfg, std::size_t index, std::size_t prev_prev_channels, std::size_t prev_channels,
             std::size_t channels, bool reduction, bool reduction_prev, Rng& init);

  /// weights: softmaxed [edges, candidates] table; activation_weights: softmaxed
  /// β table in mixed mode, undefined otherwise.
  Tensor forward(const Tensor& s0, const Tensor& s1, const Tensor& weights, const Tensor& activation_weights,
                 const ForwardContext& ctx);

  bool reduction() const { return reduction_; }
  std::size_t output_channels() const { return channels_ * nodes_; }
  MixedEdge& edge(std::size_t e) { return *edges_[e]; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  bool reduction_;
  std::size_t channels_;
  std::size_t nodes_;
  std::unique_ptr<FactorizedReduce> pre0_reduce_;
  std::unique_ptr<ReLUConvBN> pre0_;
  std::unique_ptr<ReLUConvBN> pre1_;
  std::vector<std::unique_ptr<MixedEdge>> edges_;
};

class SuperNetwork : public Module {
 public:
  /// Weights are drawn from `init`; the caller owns architecture parameters.
  SuperNetwork(SupernetConfig cfg, Rng& init);

  /// images [N, C, H, W] → logits [N, classes].
  Tensor forward(const Tensor& images, const ArchParams& arch, const ForwardContext& ctx);

  const SupernetConfig& config() const { return cfg_; }
  std::size_t cell_count() const { return cells_.size(); }
  SearchCell& cell(std::size_t i) { return *cells_[i]; }

  /// Network weights ω (convolutions, affine norms, classifier, activation scalars).
  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const { return tensors_of(named_parameters()); }
  std::vector<NamedBuffer> named_buffers();

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  SupernetConfig cfg_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<std::unique_ptr<SearchCell>> cells_;
  std::unique_ptr<Linear> classifier_;
};

}  // namespace fnas
