#pragma once

// Discrete architectures: derivation from (α, β), the line-oriented text
// format, validation and DOT export.

#include <optional>
#include <string>
#include <vector>

#include "fnas/activations.hpp"
#include "fnas/search_space.hpp"
#include "fnas/tensor.hpp"

namespace fnas {

/// One kept edge: target ← predecessor through op, with the activation that
/// precedes a parameterized op. Nodes 0 and 1 are the cell inputs.
struct Selection {
  std::size_t target = 2;
  std::size_t predecessor = 0;
  RegularOpKind op = RegularOpKind::skip_connect;
  std::optional<ActivationKind> activation;

  friend bool operator==(const Selection&, const Selection&) = default;
};

struct Genotype {
  std::size_t nodes = 4;           // intermediate nodes per cell
  std::size_t edges_per_node = 2;  // selections per intermediate node
  /// Index 0 normal, 1 reduce; a single entry means every cell uses it.
  std::vector<std::vector<Selection>> cells;

  friend bool operator==(const Genotype&, const Genotype&) = default;
};

/// Throws ValidationError naming the cell type and node on any broken invariant:
/// k selections per node, distinct predecessors below the target, no `none`,
/// activation present exactly on parameterized ops.
void validate_genotype(const Genotype& g);

/// Per edge, strength is the largest non-none softmax(α) weight; each node keeps
/// its k strongest edges (ties to the lower predecessor) with their argmax
/// non-none op (ties to the lower registry index). Parameterized ops take the
/// argmax of the edge's β row, or `fixed_activation` when β is empty.
Genotype derive_genotype(const std::vector<Tensor>& alpha, const std::vector<Tensor>& beta, const SpaceConfig& space,
                         ActivationKind fixed_activation = ActivationKind::relu);

/// The same rule over a flat bank whose columns follow super_operators(space).
Genotype derive_flat_genotype(const std::vector<Tensor>& flat, const SpaceConfig& space);

/// Replaces every activation with `kind` (retraining with one fixed activation).
Genotype with_fixed_activation(Genotype g, ActivationKind kind);

/// Uniformly random legal genotype (baseline architectures).
Genotype random_genotype(const SpaceConfig& space, Rng& rng);

/// One selection per line, `normal 2 <- 0 sep_conv_3x3 @selu`.
std::string serialize_genotype(const Genotype& g);
/// Inverse of serialize_genotype; '#' starts a comment. Throws ParseError with
/// the line number on malformed lines, ValidationError on broken invariants.
Genotype parse_genotype(const std::string& text);

/// FNV-1a digest of the serialized form.
std::string genotype_digest(const Genotype& g);

/// One digraph per cell type with nodes c_{k-2}, c_{k-1}, 0.., c_{k}.
std::string export_dot(const Genotype& g);

}  // namespace fnas
