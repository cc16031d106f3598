#pragma once

// Discrete networks built from a genotype and their from-scratch retraining:
// droppath, cutout, label smoothing, an auxiliary head and cosine SGD.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "fnas/checkpoint.hpp"
#include "fnas/datasets.hpp"
#include "fnas/genotype.hpp"
#include "fnas/nn.hpp"
#include "fnas/optim.hpp"

namespace fnas {

struct TrainConfig {
  std::size_t cells = 8;
  std::size_t channels = 16;
  std::size_t stem_multiplier = 3;
  std::size_t epochs = 20;
  std::size_t batch = 64;
  double lr_max = 0.025;
  double lr_min = 0.0;
  double momentum = 0.9;
  double weight_decay = 3e-4;
  double grad_clip = 5.0;
  double droppath = 0.4;        // final rate, reached linearly over the epochs
  std::size_t cutout = 16;      // 0 disables
  std::size_t pad = 4;          // pad-and-crop margin, 0 disables
  double flip_prob = 0.5;
  bool auxiliary = true;
  double aux_weight = 0.4;
  double label_smoothing = 0.0;
  std::size_t eval_batch = 256;
  std::uint64_t seed = 0;
  ActivationConstants constants;

  /// Throws ConfigError on broken invariants.
  void validate() const;
  std::string describe() const;
};

/// Train mode: each sample's branch survives with probability 1 − p and is
/// scaled by 1/(1 − p). Eval mode or p = 0: identity. Throws ConfigError
/// unless p ∈ [0, 1).
Tensor droppath(const Tensor& x, double p, Mode mode, Rng& rng);

/// Forward state shared by the discrete cells.
struct DiscreteContext {
  Mode mode = Mode::eval;
  Rng* rng = nullptr;           // RReLU
  Rng* droppath_rng = nullptr;  // required when droppath > 0 in train mode
  double droppath = 0.0;
};

class DiscreteCell : public Module {
 public:
  DiscreteCell(const std::vector<Selection>& selections, std::size_t nodes, std::size_t prev_prev_channels,
               std::size_t prev_channels, std::size_t channels, bool reduction, bool reduction_prev,
               const ActivationConstants& constants, Rng& init);

  Tensor forward(const Tensor& s0, const Tensor& s1, const DiscreteContext& ctx);
  bool reduction() const { return reduction_; }
  std::size_t output_channels() const { return channels_ * nodes_; }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  struct Branch {
    Selection selection;
    std::unique_ptr<RegularOp> op;
    std::unique_ptr<ActivationInstance> activation;  // parameterized ops only
  };
  bool reduction_;
  std::size_t channels_;
  std::size_t nodes_;
  std::unique_ptr<FactorizedReduce> pre0_reduce_;
  std::unique_ptr<ReLUConvBN> pre0_;
  std::unique_ptr<ReLUConvBN> pre1_;
  std::vector<Branch> branches_;
};

struct NetworkOutput {
  Tensor logits;
  Tensor aux_logits;  // defined in train mode when the auxiliary head is on
};

/// Stem, stacked cells (reductions at ⌊n/3⌋ and ⌊2n/3⌋) and a classifier; the
/// auxiliary head (ReLU, global pooling, linear) reads the cell at ⌊2n/3⌋.
class DiscreteNetwork : public Module {
 public:
  DiscreteNetwork(const Genotype& g, const TrainConfig& cfg, std::size_t input_channels, std::size_t classes,
                  Rng& init);

  NetworkOutput forward(const Tensor& images, const DiscreteContext& ctx);

  std::vector<NamedTensor> named_parameters() const;
  std::vector<Tensor> parameters() const { return tensors_of(named_parameters()); }
  std::vector<NamedBuffer> named_buffers();
  std::size_t parameter_count() const;
  /// Parameters of the main path, excluding the auxiliary head.
  std::size_t inference_parameter_count() const;
  /// Multiply-accumulates of one eval-mode forward of a single image.
  std::uint64_t macs_per_image(std::size_t height, std::size_t width);

  const Genotype& genotype() const { return genotype_; }
  std::size_t cell_count() const { return cells_.size(); }

  void collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  void collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) override;

 private:
  Genotype genotype_;
  std::size_t input_channels_;
  Conv2d stem_conv_;
  BatchNorm2d stem_bn_;
  std::vector<std::unique_ptr<DiscreteCell>> cells_;
  std::size_t aux_cell_ = 0;
  std::unique_ptr<Linear> aux_classifier_;
  std::unique_ptr<Linear> classifier_;
};

struct LossParts {
  Tensor total;
  Tensor main;
  Tensor aux;  // undefined without auxiliary logits
};

/// main + aux_weight·aux, both cross entropies with the configured smoothing.
LossParts training_loss(const NetworkOutput& out, std::span<const int> labels, const TrainConfig& cfg);

struct EpochMetrics {
  std::size_t epoch;
  double train_loss;
  double train_err;  // percent
  double test_loss;
  double test_err;  // percent
};

struct Metrics {
  std::vector<EpochMetrics> epochs;
  double final_test_err = 0.0;
  std::size_t params = 0;  // main path, auxiliary head excluded
  std::uint64_t macs = 0;  // per image

  /// `epoch,train_loss,train_err,test_loss,test_err`
  std::string csv() const;
  std::string summary_json(const std::string& genotype_digest) const;
};

struct EvalResult {
  double loss;
  double error;  // percent
};

/// Eval-mode loss and error rate over a whole dataset.
EvalResult evaluate(DiscreteNetwork& net, const Dataset& data, std::size_t batch = 256);

using EpochCallback = std::function<void(const EpochMetrics&)>;

/// Trained network plus its metrics.
struct RetrainResult {
  std::unique_ptr<DiscreteNetwork> network;
  Metrics metrics;
};

/// Retrains from scratch. Throws NumericalError naming the epoch on a
/// non-finite loss and ConfigError on genotype/config/data mismatches.
RetrainResult retrain(const Genotype& g, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                      const EpochCallback& on_epoch = {});

/// Network weights, buffers, genotype and training description in one container.
Checkpoint model_checkpoint(DiscreteNetwork& net, const TrainConfig& cfg, std::size_t input_channels,
                            std::size_t classes);
/// Rebuilds the network recorded by model_checkpoint.
std::unique_ptr<DiscreteNetwork> load_model(const Checkpoint& ck, TrainConfig& cfg);

}  // namespace fnas
