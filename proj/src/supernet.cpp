#include "fnas/supernet.hpp"

#include <algorithm>
#include <cmath>

#include "fnas/errors.hpp"

namespace fnas {

std::vector<SuperOperator> super_operators(const SpaceConfig& space) {
  std::vector<SuperOperator> out;
  for (auto op : space.regular_ops) {
    if (!is_parameterized(op)) continue;
    for (auto act : space.activation_ops) out.push_back({op, act});
  }
  for (auto op : space.regular_ops) {
    if (!is_parameterized(op)) out.push_back({op, std::nullopt});
  }
  return out;
}

void SupernetConfig::validate() const {
  space.validate();
  if (channels == 0) throw ConfigError("supernet: channels must be positive");
  if (cells == 0) throw ConfigError("supernet: cells must be positive");
  if (num_classes < 2) throw ConfigError("supernet: need at least 2 classes");
  if (input_channels == 0 || stem_multiplier == 0) throw ConfigError("supernet: bad stem configuration");
  if (edge_mode == EdgeMode::flat && space.factorized) {
    throw ConfigError("supernet: flat edges require a non-factorized space");
  }
}

std::vector<bool> reduction_layout(std::size_t cells) {
  std::vector<bool> out(cells, false);
  if (cells >= 3) {
    out[cells / 3] = true;
    out[2 * cells / 3] = true;
  }
  return out;
}

std::size_t cell_type_index(const SpaceConfig& space, bool reduction) {
  return space.cell_types > 1 && reduction ? 1 : 0;
}

const char* cell_type_name(std::size_t index) { return index == 0 ? "normal" : "reduce"; }

// --- architecture parameters ------------------------------------------------------

ArchParams::ArchParams(const SpaceConfig& space, EdgeMode mode) {
  space.validate();
  const std::size_t edges = space.edge_count();
  for (std::size_t t = 0; t < space.cell_types; ++t) {
    if (mode == EdgeMode::flat) {
      flat.push_back(Tensor::zeros({edges, super_operator_count(space)}, true));
    } else {
      alpha.push_back(Tensor::zeros({edges, space.regular_ops.size()}, true));
      if (mode == EdgeMode::mixed) beta.push_back(Tensor::zeros({edges, space.activation_ops.size()}, true));
    }
  }
}

void ArchParams::randomize(std::uint64_t seed, double noise) {
  auto fill = [&](std::vector<Tensor>& bank, const char* stream) {
    Rng rng(seed, stream);
    for (auto& t : bank) {
      for (auto& v : t.mutable_data()) v = rng.uniform(-noise, noise);
    }
  };
  fill(alpha, "alpha");
  fill(beta, "beta");
  fill(flat, "flat");
}

std::vector<NamedTensor> ArchParams::named() const {
  std::vector<NamedTensor> out;
  for (std::size_t t = 0; t < alpha.size(); ++t) out.push_back({std::string("alpha.") + cell_type_name(t), alpha[t]});
  for (std::size_t t = 0; t < beta.size(); ++t) out.push_back({std::string("beta.") + cell_type_name(t), beta[t]});
  for (std::size_t t = 0; t < flat.size(); ++t) out.push_back({std::string("flat.") + cell_type_name(t), flat[t]});
  return out;
}

ArchParams ArchParams::clone() const {
  auto copy = [](const std::vector<Tensor>& src) {
    std::vector<Tensor> out;
    for (const auto& t : src) {
      out.emplace_back(t.shape(), std::vector<double>(t.data().begin(), t.data().end()), true);
    }
    return out;
  };
  ArchParams out;
  out.alpha = copy(alpha);
  out.beta = copy(beta);
  out.flat = copy(flat);
  return out;
}

double mean_row_entropy(const std::vector<Tensor>& logits) {
  double total = 0.0;
  std::size_t rows = 0;
  for (const auto& t : logits) {
    const std::size_t cols = t.dim(1);
    for (std::size_t r = 0; r < t.dim(0); ++r) {
      auto p = softmax(t.data().subspan(r * cols, cols));
      double h = 0.0;
      for (double q : p) {
        if (q > 0.0) h -= q * std::log(q);
      }
      total += h;
      ++rows;
    }
  }
  return rows == 0 ? 0.0 : total / static_cast<double>(rows);
}

// --- mixed edge -------------------------------------------------------------------

MixedEdge::MixedEdge(const SupernetConfig& cfg, std::size_t channels, std::size_t stride, Rng& init,
                     std::string label)
    : mode_(cfg.edge_mode), label_(std::move(label)) {
  const auto& space = cfg.space;
  if (mode_ == EdgeMode::flat) {
    for (auto act : space.activation_ops) activations_.emplace_back(act, cfg.constants);
    for (const auto& so : super_operators(space)) {
      ops_.push_back(regular_op_factory(so.op, channels, stride, false, init));
      int idx = -1;
      if (so.activation) {
        auto it = std::find(space.activation_ops.begin(), space.activation_ops.end(), *so.activation);
        idx = static_cast<int>(it - space.activation_ops.begin());
      }
      op_activation_.push_back(idx);
    }
    return;
  }
  if (mode_ == EdgeMode::mixed) {
    for (auto act : space.activation_ops) activations_.emplace_back(act, cfg.constants);
  } else {
    activations_.emplace_back(cfg.fixed_activation, cfg.constants);
  }
  for (auto op : space.regular_ops) {
    ops_.push_back(regular_op_factory(op, channels, stride, false, init));
    op_activation_.push_back(is_parameterized(op) ? 0 : -1);
  }
}

Tensor MixedEdge::forward(const Tensor& x, const Tensor& weights, const Tensor& activation_weights,
                          const ForwardContext& ctx) {
  if (weights.rank() != 1 || weights.numel() != ops_.size()) {
    throw ConfigError("edge " + label_ + ": expected " + std::to_string(ops_.size()) + " candidate weights");
  }
  // activated inputs, computed once per edge and shared by every parameterized op
  std::vector<Tensor> activated;
  const bool any_param = std::any_of(op_activation_.begin(), op_activation_.end(), [](int a) { return a >= 0; });
  if (any_param) {
    switch (mode_) {
      case EdgeMode::mixed:
        activated.push_back(mixed_activation(x, activation_weights, activations_, ctx.mode, ctx.rng));
        break;
      case EdgeMode::fixed:
        activated.push_back(activate(activations_[0], x, ctx.mode, ctx.rng));
        break;
      case EdgeMode::flat:
        for (const auto& inst : activations_) activated.push_back(activate(inst, x, ctx.mode, ctx.rng));
        break;
    }
  }
  std::vector<Tensor> terms;
  terms.reserve(ops_.size());
  for (std::size_t k = 0; k < ops_.size(); ++k) {
    if (ops_[k]->kind() == RegularOpKind::none) {
      terms.emplace_back();
      continue;
    }
    const int a = op_activation_[k];
    terms.push_back(ops_[k]->forward(a >= 0 ? activated[static_cast<std::size_t>(a)] : x, ctx));
  }
  Tensor out = weighted_sum(terms, weights);
  for (double v : out.data()) {
    if (std::isnan(v)) throw NumericalError("NaN in output of edge " + label_);
  }
  return out;
}

void MixedEdge::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  for (std::size_t k = 0; k < ops_.size(); ++k) {
    ops_[k]->collect_parameters(prefix + "op" + std::to_string(k) + ".", out);
  }
  for (std::size_t a = 0; a < activations_.size(); ++a) {
    if (activations_[a].learnable()) {
      out.push_back({prefix + "act" + std::to_string(a) + "." + std::string(activation_name(activations_[a].kind())),
                     activations_[a].parameter()});
    }
  }
}

void MixedEdge::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  for (std::size_t k = 0; k < ops_.size(); ++k) {
    ops_[k]->collect_buffers(prefix + "op" + std::to_string(k) + ".", out);
  }
}

// --- search cell ------------------------------------------------------------------

SearchCell::SearchCell(const SupernetConfig& cfg, std::size_t index, std::size_t prev_prev_channels,
                       std::size_t prev_channels, std::size_t channels, bool reduction, bool reduction_prev,
                       Rng& init)
    : reduction_(reduction), channels_(channels), nodes_(cfg.space.num_intermediate_nodes) {
  if (reduction_prev) {
    pre0_reduce_ = std::make_unique<FactorizedReduce>(prev_prev_channels, channels, false, init);
  } else {
    pre0_ = std::make_unique<ReLUConvBN>(prev_prev_channels, channels, 1, 1, 0, false, init);
  }
  pre1_ = std::make_unique<ReLUConvBN>(prev_channels, channels, 1, 1, 0, false, init);
  for (std::size_t j = 0; j < nodes_; ++j) {
    for (std::size_t i = 0; i < j + 2; ++i) {
      const std::size_t stride = reduction && i < 2 ? 2 : 1;
      std::string label = "cell " + std::to_string(index) + (reduction ? " (reduce)" : " (normal)") + " edge " +
                          std::to_string(edge_index(j, i)) + ": " + std::to_string(j + 2) + " <- " +
                          std::to_string(i);
      edges_.push_back(std::make_unique<MixedEdge>(cfg, channels, stride, init, std::move(label)));
    }
  }
}

Tensor SearchCell::forward(const Tensor& s0, const Tensor& s1, const Tensor& weights,
                           const Tensor& activation_weights, const ForwardContext& ctx) {
  std::vector<Tensor> states;
  states.push_back(pre0_reduce_ ? pre0_reduce_->forward(s0, ctx) : pre0_->forward(s0, ctx));
  states.push_back(pre1_->forward(s1, ctx));
  if (states[0].shape() != states[1].shape()) {
    throw DimensionError("search cell inputs disagree after preprocessing: " + shape_str(states[0].shape()) +
                         " vs " + shape_str(states[1].shape()));
  }
  for (std::size_t j = 0; j < nodes_; ++j) {
    Tensor node;
    for (std::size_t i = 0; i < j + 2; ++i) {
      const std::size_t e = edge_index(j, i);
      Tensor aw = activation_weights.defined() ? row(activation_weights, e) : Tensor();
      Tensor h = edges_[e]->forward(states[i], row(weights, e), aw, ctx);
      node = node.defined() ? add(node, h) : h;
    }
    states.push_back(node);
  }
  return concat_channels(std::vector<Tensor>(states.begin() + 2, states.end()));
}

void SearchCell::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  if (pre0_reduce_) pre0_reduce_->collect_parameters(prefix + "pre0.", out);
  if (pre0_) pre0_->collect_parameters(prefix + "pre0.", out);
  pre1_->collect_parameters(prefix + "pre1.", out);
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    edges_[e]->collect_parameters(prefix + "edge" + std::to_string(e) + ".", out);
  }
}

void SearchCell::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  if (pre0_reduce_) pre0_reduce_->collect_buffers(prefix + "pre0.", out);
  if (pre0_) pre0_->collect_buffers(prefix + "pre0.", out);
  pre1_->collect_buffers(prefix + "pre1.", out);
  for (std::size_t e = 0; e < edges_.size(); ++e) {
    edges_[e]->collect_buffers(prefix + "edge" + std::to_string(e) + ".", out);
  }
}

// --- network ----------------------------------------------------------------------

namespace {

SupernetConfig validated(SupernetConfig cfg) {
  cfg.validate();
  return cfg;
}

}  // namespace

SuperNetwork::SuperNetwork(SupernetConfig cfg, Rng& init)
    : cfg_(validated(std::move(cfg))),
      stem_conv_(cfg_.input_channels, cfg_.stem_multiplier * cfg_.channels, 3, Conv2dOptions{1, 1, 1, 1}, init),
      stem_bn_(cfg_.stem_multiplier * cfg_.channels, true) {
  const auto layout = reduction_layout(cfg_.cells);
  std::size_t c = cfg_.channels;
  std::size_t prev_prev = cfg_.stem_multiplier * c, prev = prev_prev;
  bool reduction_prev = false;
  for (std::size_t i = 0; i < cfg_.cells; ++i) {
    if (layout[i]) c *= 2;
    cells_.push_back(std::make_unique<SearchCell>(cfg_, i, prev_prev, prev, c, layout[i], reduction_prev, init));
    reduction_prev = layout[i];
    prev_prev = prev;
    prev = cells_.back()->output_channels();
  }
  classifier_ = std::make_unique<Linear>(prev, cfg_.num_classes, init);
}

Tensor SuperNetwork::forward(const Tensor& images, const ArchParams& arch, const ForwardContext& ctx) {
  if (images.rank() != 4 || images.dim(1) != cfg_.input_channels) {
    throw DimensionError("supernet expects [N," + std::to_string(cfg_.input_channels) + ",H,W], got " +
                         shape_str(images.shape()));
  }
  const bool flat = cfg_.edge_mode == EdgeMode::flat;
  const auto& bank = flat ? arch.flat : arch.alpha;
  if (bank.size() != cfg_.space.cell_types) throw ConfigError("supernet: architecture bank does not match the space");
  if (cfg_.edge_mode == EdgeMode::mixed && arch.beta.size() != cfg_.space.cell_types) {
    throw ConfigError("supernet: mixed edges need β logits");
  }
  // softmax once per forward and cell type, rows picked per edge
  std::vector<Tensor> weights, activation_weights;
  for (std::size_t t = 0; t < cfg_.space.cell_types; ++t) {
    weights.push_back(softmax_rows(bank[t]));
    activation_weights.push_back(cfg_.edge_mode == EdgeMode::mixed ? softmax_rows(arch.beta[t]) : Tensor());
  }
  Tensor s0 = stem_bn_.forward(stem_conv_.forward(images), ctx.mode);
  Tensor s1 = s0;
  for (auto& cell : cells_) {
    const std::size_t t = cell_type_index(cfg_.space, cell->reduction());
    Tensor next = cell->forward(s0, s1, weights[t], activation_weights[t], ctx);
    s0 = s1;
    s1 = next;
  }
  return classifier_->forward(global_avg_pool(s1));
}

std::vector<NamedTensor> SuperNetwork::named_parameters() const {
  std::vector<NamedTensor> out;
  collect_parameters("", out);
  return out;
}

std::vector<NamedBuffer> SuperNetwork::named_buffers() {
  std::vector<NamedBuffer> out;
  collect_buffers("", out);
  return out;
}

void SuperNetwork::collect_parameters(const std::string& prefix, std::vector<NamedTensor>& out) const {
  stem_conv_.collect_parameters(prefix + "stem.conv.", out);
  stem_bn_.collect_parameters(prefix + "stem.bn.", out);
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    cells_[i]->collect_parameters(prefix + "cell" + std::to_string(i) + ".", out);
  }
  classifier_->collect_parameters(prefix + "classifier.", out);
}

void SuperNetwork::collect_buffers(const std::string& prefix, std::vector<NamedBuffer>& out) {
  stem_bn_.collect_buffers(prefix + "stem.bn.", out);
  for (std::size_t i = 0; i < cells_.size(); ++i) {
    cells_[i]->collect_buffers(prefix + "cell" + std::to_string(i) + ".", out);
  }
}

}  // namespace fnas
