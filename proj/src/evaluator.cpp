#include "fnas/evaluator.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "json.hpp"

#include "fnas/errors.hpp"
#include "fnas/supernet.hpp"

namespace fnas {

void TrainConfig::validate() const {
  if (cells == 0) throw ConfigError("retrain: cells must be positive");
  if (channels == 0 || stem_multiplier == 0) throw ConfigError("retrain: channels must be positive");
  if (epochs == 0) throw ConfigError("retrain: epochs must be at least 1");
  if (batch == 0 || eval_batch == 0) throw ConfigError("retrain: batch sizes must be positive");
  if (!(lr_max > 0.0) || !(lr_min >= 0.0) || lr_min > lr_max) {
    throw ConfigError("retrain: need 0 <= lr_min <= lr_max, lr_max > 0");
  }
  if (momentum < 0.0 || momentum >= 1.0) throw ConfigError("retrain: momentum must be in [0, 1)");
  if (weight_decay < 0.0 || grad_clip < 0.0) throw ConfigError("retrain: weight_decay and grad_clip must be >= 0");
  if (!(droppath >= 0.0 && droppath < 1.0)) throw ConfigError("retrain: droppath must be in [0, 1)");
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw ConfigError("retrain: flip_prob must be in [0, 1]");
  if (!(label_smoothing >= 0.0 && label_smoothing <= 1.0)) {
    throw ConfigError("retrain: label_smoothing must be in [0, 1]");
  }
  if (aux_weight < 0.0) throw ConfigError("retrain: aux_weight must be non-negative");
}

std::string TrainConfig::describe() const {
  std::ostringstream out;
  out.precision(17);
  out << "cells=" << cells << "\nchannels=" << channels << "\nstem_multiplier=" << stem_multiplier
      << "\nepochs=" << epochs << "\nbatch=" << batch << "\nlr_max=" << lr_max << "\nlr_min=" << lr_min
      << "\nmomentum=" << momentum << "\nweight_decay=" << weight_decay << "\ngrad_clip=" << grad_clip
      << "\ndroppath=" << droppath << "\ncutout=" << cutout << "\npad=" << pad << "\nflip_prob=" << flip_prob
      << "\nauxiliary=" << auxiliary << "\naux_weight=" << aux_weight << "\nlabel_smoothing=" << label_smoothing
      << "\neval_batch=" << eval_batch << "\nseed=" << seed << "\n";
  return out.str();
}

Tensor droppath(const Tensor& x, double p, Mode mode, Rng& rng) {
  if (!(p >= 0.0 && p < 1.0)) throw ConfigError("droppath: probability must be in [0, 1)");
  if (mode == Mode::eval || p == 0.0) return x;
  std::vector<double> factors(x.dim(0));
  const double keep = 1.0 - p;
  for (auto& f : factors) f = rng.bernoulli(keep) ? 1.0 / keep : 0.0;
  return scale_samples(x, factors);
}

// --- discrete cell ----------------------------------------------------------------

DiscreteCell::DiscreteCell(const std::vector<Selection>& selections, std::size_t nodes,
                           std::size_t prev_prev_channels, std::size_t prev_channels, std::size_t channels,
                           bool reduction, bool reduction_prev, const ActivationConstants& constants, Rng& init)
    : reduction_(reduction), channels_(channels), nodes_(nodes) {
  if (reduction_prev) {
    pre0_reduce_ = std::make_unique<FactorizedReduce>(prev_prev_channels, channels, true, init);
  } else {
    pre0_ = std::make_unique<ReLUConvBN>(prev_prev_channels, channels, 1, 1, 0, true, init);
  }
  pre1_ = std::make_unique<ReLUConvBN>(prev_channels, channels, 1, 1, 0, true, init);
  for (const auto& s : selections) {
    if (s.target < 2 || s.target >= nodes + 2 || s.predecessor >= s.target) {
      throw ConfigError("discrete cell: selection " + std::to_string(s.target) + " <- " +
                        std::to_string(s.predecessor) + " does not fit " + std::to_string(nodes) + " nodes");
    }
    const std::size_t stride = reduction && s.predecessor < 2 ? 2 : 1;
    Branch b;
    b.selection = s;
    b.op = regular_op_factory(s.op, channels, stride, true, init);
    if (s.activation) b.activation = std::make_unique<ActivationInstance>(*s.activation, constants);
    branches_.push_back(std::move(b));
  }
}

Tensor DiscreteCell::forward(const Tensor& s0, const Tensor& s1, const DiscreteContext& ctx) {
  ForwardContext fctx{ctx.mode, ctx.rng};
  std::vector<Tensor> states;
  states.push_back(pre0_reduce_ ? pre0_reduce_->forward(s0, fctx) : pre0_->forward(s0, fctx));
  states.push_back(pre1_->forward(s1, fctx));
  states.resize(nodes_ + 2);
  // selections are grouped by target in ascending order, so predecessors are ready
  for (auto& b : branches_) {
    const Tensor& in = states[b.selection.predecessor];
    if (!in.defined()) throw ConfigError("discrete cell: node used before it is computed");
    Tensor x = b.activation ? activate(*b.activation, in, ctx.mode, ctx.rng) : in;
    Tensor h = b.op->forward(x, fctx);
    const bool identity = b.selection.op == RegularOpKind::skip_connect && !(reduction_ && b.selection.predecessor < 2);
    if (!identity && ctx.mode == Mode::train && ctx.droppath > 0.0) {
      if (!ctx.droppath_rng) throw UsageError("discrete cell: droppath needs an rng");
      h = droppath(h, ctx.droppath, ctx.mode, *ctx.droppath_rng);
    }
    Tensor& node = states[b.selection.target];
    node = node.defined() ? add(node, h) : h;
  }
  for (std::size_t j = 2; j < states.size(); ++j) {
    if (!states[j].defined()) throw ConfigError("discrete cell: node " + std::to_string(j) + " has no inputs");
  }
  return concat_channels(std::vector<Tensor>(states.begin() + 2, states.end()));
}

void DiscreteCell::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  if (pre0_reduce_) pre0_reduce_->collect_parameters(prefix + "pre0.", out);
  if (pre0_) pre0_->collect_parameters(prefix + "pre0.", out);
  pre1_->collect_parameters(prefix + "pre1.", out);
  for (std::size_t k = 0; k < branches_.size(); ++k) {
    const std::string p = prefix + "branch" + std::to_string(k) + ".";
    branches_[k].op->collect_parameters(p, out);
    const auto& act = branches_[k].activation;
    if (act && act->learnable()) out.push_back({p + std::string(activation_name(act->kind())), act->parameter()});
  }
}

void DiscreteCell::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  if (pre0_reduce_) pre0_reduce_->collect_buffers(prefix + "pre0.", out);
  if (pre0_) pre0_->collect_buffers(prefix + "pre0.", out);
  pre1_->collect_buffers(prefix + "pre1.", out);
  for (std::size_t k = 0; k < branches_.size(); ++k) {
    branches_[k].op->collect_buffers(prefix + "branch" + std::to_string(k) + ".", out);
  }
}

// --- network ----------------------------------------------------------------------

namespace {

Genotype checked_genotype(const Genotype& g, const TrainConfig& cfg) {
  cfg.validate();
  validate_genotype(g);
  if (g.cells.empty() || g.cells.size() > 2) throw ConfigError("retrain: genotype needs one or two cell types");
  return g;
}

std::vector<Selection> ordered(std::vector<Selection> cell) {
  std::stable_sort(cell.begin(), cell.end(),
                   [](const Selection& a, const Selection& b) { return a.target < b.target; });
  return cell;
}

}  // namespace

DiscreteNetwork::DiscreteNetwork(const Genotype& g, const TrainConfig& cfg, std::size_t input_channels,
                                 std::size_t classes, Rng& init)
    : genotype_(checked_genotype(g, cfg)),
      input_channels_(input_channels),
      stem_conv_(input_channels, cfg.stem_multiplier * cfg.channels, 3, Conv2dOptions{1, 1, 1, 1}, init),
      stem_bn_(cfg.stem_multiplier * cfg.channels, true) {
  if (classes < 2) throw ConfigError("retrain: need at least 2 classes");
  const auto layout = reduction_layout(cfg.cells);
  std::size_t c = cfg.channels;
  std::size_t prev_prev = cfg.stem_multiplier * c, prev = prev_prev;
  bool reduction_prev = false;
  std::size_t aux_channels = 0;
  aux_cell_ = 2 * cfg.cells / 3;
  for (std::size_t i = 0; i < cfg.cells; ++i) {
    if (layout[i]) c *= 2;
    const auto& sel = genotype_.cells[layout[i] && genotype_.cells.size() > 1 ? 1 : 0];
    cells_.push_back(std::make_unique<DiscreteCell>(ordered(sel), genotype_.nodes, prev_prev, prev, c, layout[i],
                                                    reduction_prev, cfg.constants, init));
    reduction_prev = layout[i];
    prev_prev = prev;
    prev = cells_.back()->output_channels();
    if (i == aux_cell_) aux_channels = prev;
  }
  if (cfg.auxiliary) aux_classifier_ = std::make_unique<Linear>(aux_channels, classes, init);
  classifier_ = std::make_unique<Linear>(prev, classes, init);
}

NetworkOutput DiscreteNetwork::forward(const Tensor& images, const DiscreteContext& ctx) {
  if (images.rank() != 4 || images.dim(1) != input_channels_) {
    throw DimensionError("network expects [N," + std::to_string(input_channels_) + ",H,W], got " +
                         shape_str(images.shape()));
  }
  NetworkOutput out;
  Tensor s0 = stem_bn_.forward(stem_conv_.forward(images), ctx.mode);
  Tensor s1 = s0;
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    Tensor next = cells_[i]->forward(s0, s1, ctx);
    s0 = s1;
    s1 = next;
    if (i == aux_cell_ && aux_classifier_ && ctx.mode == Mode::train) {
      out.aux_logits = aux_classifier_->forward(global_avg_pool(relu(s1)));
    }
  }
  out.logits = classifier_->forward(global_avg_pool(s1));
  return out;
}

std::vector<NamedTensor> DiscreteNetwork::named_parameters() const {
  std::vector<NamedTensor> out;
  collect_parameters("", out);
  return out;
}

std::vector<NamedBuffer> DiscreteNetwork::named_buffers() {
  std::vector<NamedBuffer> out;
  collect_buffers("", out);
  return out;
}

std::size_t DiscreteNetwork::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) n += p.tensor.numel();
  return n;
}

std::size_t DiscreteNetwork::inference_parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : named_parameters()) {
    if (p.name.rfind("aux.", 0) != 0) n += p.tensor.numel();
  }
  return n;
}

std::uint64_t DiscreteNetwork::macs_per_image(std::size_t height, std::size_t width) {
  NoGradGuard guard;
  // eval mode reads running statistics only, so this forward changes no state
  const std::uint64_t before = mac_count();
  forward(Tensor::zeros({1, input_channels_, height, width}), DiscreteContext{});
  return mac_count() - before;
}

void DiscreteNetwork::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  stem_conv_.collect_parameters(prefix + "stem.conv.", out);
  stem_bn_.collect_parameters(prefix + "stem.bn.", out);
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    cells_[i]->collect_parameters(prefix + "cell" + std::to_string(i) + ".", out);
  }
  if (aux_classifier_) aux_classifier_->collect_parameters(prefix + "aux.", out);
  classifier_->collect_parameters(prefix + "classifier.", out);
}

void DiscreteNetwork::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  stem_bn_.collect_buffers(prefix + "stem.bn.", out);
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    cells_[i]->collect_buffers(prefix + "cell" + std::to_string(i) + ".", out);
  }
}

// --- metrics ----------------------------------------------------------------------

namespace {

std::string num(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

double error_percent(const Tensor& logits, std::span<const int> labels) {
  const std::size_t k = logits.dim(1);
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto r = logits.data().subspan(i * k, k);
    const auto best = static_cast<int>(std::max_element(r.begin(), r.end()) - r.begin());
    if (best != labels[i]) ++wrong;
  }
  return 100.0 * static_cast<double>(wrong) / static_cast<double>(labels.size());
}

}  // namespace

std::string Metrics::csv() const {
  std::ostringstream out;
  out << "epoch,train_loss,train_err,test_loss,test_err\n";
  for (const auto& e : epochs) {
    out << e.epoch << "," << num(e.train_loss) << "," << num(e.train_err) << "," << num(e.test_loss) << ","
        << num(e.test_err) << "\n";
  }
  return out.str();
}

std::string Metrics::summary_json(const std::string& genotype_digest) const {
  nlohmann::ordered_json j;
  j["genotype_digest"] = genotype_digest;
  j["epochs"] = epochs.size();
  j["final_test_err"] = final_test_err;
  j["params"] = params;
  j["macs"] = macs;
  return j.dump(2) + "\n";
}

LossParts training_loss(const NetworkOutput& out, std::span<const int> labels, const TrainConfig& cfg) {
  LossParts parts;
  parts.main = cross_entropy(out.logits, labels, cfg.label_smoothing);
  parts.total = parts.main;
  if (out.aux_logits.defined()) {
    parts.aux = cross_entropy(out.aux_logits, labels, cfg.label_smoothing);
    if (cfg.aux_weight > 0.0) parts.total = add(parts.main, scale(parts.aux, cfg.aux_weight));
  }
  return parts;
}

EvalResult evaluate(DiscreteNetwork& net, const Dataset& data, std::size_t batch) {
  if (data.size() == 0) throw InputError("evaluate: dataset is empty");
  NoGradGuard guard;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double loss = 0.0, wrong = 0.0;
  for (std::size_t first = 0; first < order.size(); first += batch) {
    const std::size_t count = std::min(batch, order.size() - first);
    const auto labels = data.batch_labels(order, first, count);
    Tensor logits = net.forward(data.batch_images(order, first, count), DiscreteContext{}).logits;
    loss += cross_entropy(logits, labels).item() * static_cast<double>(count);
    wrong += error_percent(logits, labels) * static_cast<double>(count) / 100.0;
  }
  const auto n = static_cast<double>(data.size());
  return {loss / n, 100.0 * wrong / n};
}

RetrainResult retrain(const Genotype& g, const Dataset& train, const Dataset& test, const TrainConfig& cfg,
                      const EpochCallback& on_epoch) {
  cfg.validate();
  train.validate();
  test.validate();
  if (train.size() == 0 || test.size() == 0) throw InputError("retrain: empty dataset");
  if (train.classes != test.classes || train.channels() != test.channels()) {
    throw ConfigError("retrain: train and test sets disagree on classes or channels");
  }
  Rng init(cfg.seed, "init");
  Rng data_rng(cfg.seed, "data");
  Rng augment_rng(cfg.seed, "augment");
  Rng droppath_rng(cfg.seed, "droppath");
  Rng rrelu_rng(cfg.seed, "rrelu");

  RetrainResult result;
  result.network = std::make_unique<DiscreteNetwork>(g, cfg, train.channels(), train.classes, init);
  auto& net = *result.network;
  auto params = net.parameters();
  auto opt = Optimizer::sgd(params, cfg.lr_max, cfg.momentum, cfg.weight_decay);
  const AugmentPolicy policy{cfg.pad, cfg.flip_prob, cfg.cutout};

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double t = static_cast<double>(epoch), total = static_cast<double>(cfg.epochs);
    opt.set_lr(cosine_lr(t, total, cfg.lr_max, cfg.lr_min));
    DiscreteContext ctx{Mode::train, &rrelu_rng, &droppath_rng, cfg.droppath * t / total};

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[data_rng.below(i)]);

    double loss_sum = 0.0, wrong = 0.0;
    for (std::size_t first = 0; first < order.size(); first += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, order.size() - first);
      const auto labels = train.batch_labels(order, first, count);
      Tensor images = augment_batch(train.batch_images(order, first, count), policy, augment_rng);
      opt.zero_grad();
      NetworkOutput out = net.forward(images, ctx);
      const LossParts parts = training_loss(out, labels, cfg);
      const Tensor& loss = parts.total;
      if (!std::isfinite(loss.item())) {
        throw NumericalError("retrain epoch " + std::to_string(epoch + 1) + ": loss is not finite");
      }
      loss.backward();
      if (cfg.grad_clip > 0.0) clip_grad_norm(params, cfg.grad_clip);
      opt.step();
      loss_sum += parts.main.item() * static_cast<double>(count);
      wrong += error_percent(out.logits, labels) * static_cast<double>(count) / 100.0;
    }
    const auto n = static_cast<double>(train.size());
    const EvalResult te = evaluate(net, test, cfg.eval_batch);
    EpochMetrics m{epoch + 1, loss_sum / n, 100.0 * wrong / n, te.loss, te.error};
    result.metrics.epochs.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  result.metrics.final_test_err = result.metrics.epochs.back().test_err;
  result.metrics.params = net.inference_parameter_count();
  result.metrics.macs = net.macs_per_image(train.height(), train.width());
  return result;
}

// --- model files ------------------------------------------------------------------

Checkpoint model_checkpoint(DiscreteNetwork& net, const TrainConfig& cfg, std::size_t input_channels,
                            std::size_t classes) {
  Checkpoint ck;
  const std::string genotype = serialize_genotype(net.genotype());
  ck.config_digest = digest_hex(cfg.describe() + genotype);
  ck.set_meta("kind", "model");
  ck.set_meta("genotype", genotype);
  ck.set_meta("train_config", cfg.describe());
  ck.set_meta("cells", std::to_string(cfg.cells));
  ck.set_meta("channels", std::to_string(cfg.channels));
  ck.set_meta("stem_multiplier", std::to_string(cfg.stem_multiplier));
  ck.set_meta("auxiliary", cfg.auxiliary ? "1" : "0");
  ck.set_meta("input_channels", std::to_string(input_channels));
  ck.set_meta("classes", std::to_string(classes));
  const auto& c = cfg.constants;
  ck.add_array("constants", {9},
               {c.leaky_slope, c.elu_alpha, c.celu_alpha, c.selu_lambda, c.selu_alpha, c.rrelu_lower, c.rrelu_upper,
                c.prelu_init, c.swish_init});
  for (const auto& p : net.named_parameters()) {
    ck.add_array("param." + p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()});
  }
  for (const auto& b : net.named_buffers()) ck.add_array("buffer." + b.name, {b.values->size()}, *b.values);
  return ck;
}

std::unique_ptr<DiscreteNetwork> load_model(const Checkpoint& ck, TrainConfig& cfg) {
  if (ck.meta_value("kind") != "model") throw FormatError("checkpoint is not a model file");
  const Genotype g = parse_genotype(ck.meta_value("genotype"));
  cfg.cells = std::stoull(ck.meta_value("cells"));
  cfg.channels = std::stoull(ck.meta_value("channels"));
  cfg.stem_multiplier = std::stoull(ck.meta_value("stem_multiplier"));
  cfg.auxiliary = ck.meta_value("auxiliary") == "1";
  const auto& k = ck.array("constants").values;
  if (k.size() != 9) throw FormatError("model file: activation constants malformed");
  cfg.constants = {k[0], k[1], k[2], k[3], k[4], k[5], k[6], k[7], k[8]};
  Rng init(0);
  auto net = std::make_unique<DiscreteNetwork>(g, cfg, std::stoull(ck.meta_value("input_channels")),
                                               std::stoull(ck.meta_value("classes")), init);
  for (auto& p : net->named_parameters()) ck.restore_into("param." + p.name, p.tensor);
  for (auto& b : net->named_buffers()) ck.restore_into("buffer." + b.name, *b.values);
  return net;
}

}  // namespace fnas
