#pragma once

// Alternating first-order search: ω on the training split, then α, then β on
// the validation split, with the ablation modes (fixed activation, frozen β,
// flat pool) and resumable checkpoints.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "fnas/checkpoint.hpp"
#include "fnas/datasets.hpp"
#include "fnas/genotype.hpp"
#include "fnas/optim.hpp"
#include "fnas/supernet.hpp"

namespace fnas {

enum class SearchMode { factorized, fixed_activation, frozen_beta, non_factorized };
const char* search_mode_name(SearchMode mode);
/// Accepts factorized, fixed-activation, frozen-beta, non-factorized. Throws ConfigError.
SearchMode parse_search_mode(const std::string& name);

struct SearchConfig {
  std::size_t epochs = 25;
  std::size_t batch = 64;
  double train_fraction = 0.5;
  double val_fraction = 0.5;
  double w_lr_max = 0.05;
  double w_lr_min = 0.001;
  double w_momentum = 0.9;
  double w_weight_decay = 3e-4;
  double grad_clip = 5.0;
  double arch_lr = 6e-4;
  double arch_beta1 = 0.5;
  double arch_beta2 = 0.999;
  double arch_weight_decay = 1e-3;
  SearchMode mode = SearchMode::factorized;
  ActivationKind fixed_activation = ActivationKind::relu;
  std::vector<Tensor> frozen_beta;  // β snapshot, one [edges, |O₂|] table per cell type
  std::uint64_t seed = 0;
  std::size_t warmup_epochs = 0;  // ω-only epochs with the architecture frozen
  bool same_val_batch = true;     // α and β updates see the same validation batch

  /// Throws ConfigError on broken invariants or a missing mode payload.
  void validate() const;
  /// Deterministic key = value description, used for checkpoint digests.
  std::string describe() const;
};

/// Edge mode and space the supernet needs for a search mode.
SupernetConfig supernet_for_mode(SupernetConfig net, const SearchConfig& cfg);

/// Stratified disjoint splits of sizes ⌊f_train·N⌋ and ⌊f_val·N⌋. Within each
/// class the items are shuffled and ranked; all items are then ordered by
/// (rank + 0.5)/class_size so every prefix is close to class-proportional.
/// Throws ConfigError on non-positive fractions, a sum above 1 or an empty split.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const std::vector<int>& labels,
                                                                            std::size_t classes, double train_fraction,
                                                                            double val_fraction, std::uint64_t seed);
std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, double val_fraction,
                                          std::uint64_t seed);

// --- one step --------------------------------------------------------------------

/// Update counters of the three parameter groups.
struct Versions {
  std::uint64_t omega = 0;
  std::uint64_t alpha = 0;
  std::uint64_t beta = 0;
  friend bool operator==(const Versions&, const Versions&) = default;
};

enum class LossKind { train, val_alpha, val_beta };

struct LossEvent {
  LossKind kind;
  Versions versions;  // parameter versions the loss was evaluated at
  double value;
};
using StepObserver = std::function<void(const LossEvent&)>;

struct ParameterGroups {
  std::vector<Tensor> omega;
  std::vector<Tensor> alpha;  // the flat bank in flat mode
  std::vector<Tensor> beta;
};

enum class ArchUpdate { alpha_then_beta, alpha_only, none };

struct StepLosses {
  double train = 0.0;
  double val = 0.0;  // loss of the α pass, 0 without architecture updates
};

/// ω ← ω − η_ω∇_ω L_train(ω, α, β); α ← α − η_α∇_α L_val(ω', α, β);
/// β ← β − η_β∇_β L_val(ω', α', β). Each pass only enables gradients on the
/// group being updated; flags are restored afterwards. ω gradients are
/// clipped to `clip` (0 disables). `val_beta_loss` may be empty to reuse
/// `val_loss`. Throws NumericalError on a non-finite loss.
StepLosses trilevel_step(const std::function<Tensor()>& train_loss, const std::function<Tensor()>& val_loss,
                         const std::function<Tensor()>& val_beta_loss, const ParameterGroups& groups,
                         Optimizer& omega_opt, Optimizer* alpha_opt, Optimizer* beta_opt, ArchUpdate update,
                         double clip, Versions& versions, const StepObserver& observer = {});

// --- full search -----------------------------------------------------------------

struct SearchHistoryRow {
  std::size_t epoch;
  double train_loss;
  double val_loss;
  double alpha_entropy_mean;
  double beta_entropy_mean;  // 0 where no β is searched
  std::string genotype_digest;
};

struct SearchResult {
  ArchParams arch;
  Genotype genotype;
  std::vector<SearchHistoryRow> history;
};

/// Search state over one dataset. Everything is validated in the constructor,
/// before any compute.
class Search {
 public:
  Search(SearchConfig cfg, SupernetConfig net, const Dataset& data);

  void run_epoch();
  void run() {
    while (!done()) run_epoch();
  }
  bool done() const { return epoch_ >= cfg_.epochs; }
  std::size_t epoch() const { return epoch_; }
  std::size_t steps_per_epoch() const;

  const SearchConfig& config() const { return cfg_; }
  const ArchParams& arch() const { return arch_; }
  SuperNetwork& network() { return *net_; }
  const Versions& versions() const { return versions_; }
  const std::vector<SearchHistoryRow>& history() const { return history_; }
  Genotype genotype() const;
  SearchResult result() const;
  void set_observer(StepObserver observer) { observer_ = std::move(observer); }

  /// `# mode=<m> super_operators=<n>` line, header, one row per epoch.
  std::string history_csv() const;
  /// Digest of the search and network configuration, stored in checkpoints.
  std::string config_digest() const;

  Checkpoint checkpoint() const;
  /// Restores a checkpoint written by a search with the same configuration
  /// (ConfigError otherwise, FormatError on missing content).
  void restore(const Checkpoint& ck);

 private:
  Tensor batch_loss(const std::vector<std::size_t>& order, const Dataset& ds, std::size_t step, Mode mode);

  SearchConfig cfg_;
  SupernetConfig net_cfg_;
  Dataset train_;
  Dataset val_;
  Rng init_rng_;
  Rng data_rng_;
  Rng rrelu_rng_;
  std::unique_ptr<SuperNetwork> net_;
  ArchParams arch_;
  std::unique_ptr<Optimizer> omega_opt_;
  std::unique_ptr<Optimizer> alpha_opt_;
  std::unique_ptr<Optimizer> beta_opt_;
  Versions versions_;
  std::size_t epoch_ = 0;
  std::vector<SearchHistoryRow> history_;
  StepObserver observer_;
};

/// Runs every remaining epoch; with a checkpoint path, resumes from it when it
/// exists and saves after every epoch.
SearchResult run_search(const SearchConfig& cfg, const SupernetConfig& net, const Dataset& data,
                        const std::string& checkpoint_path = "");

}  // namespace fnas
