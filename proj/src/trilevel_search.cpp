#include "fnas/trilevel_search.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <sstream>

#include "fnas/errors.hpp"

namespace fnas {

const char* search_mode_name(SearchMode mode) {
  switch (mode) {
    case SearchMode::factorized: return "factorized";
    case SearchMode::fixed_activation: return "fixed-activation";
    case SearchMode::frozen_beta: return "frozen-beta";
    case SearchMode::non_factorized: return "non-factorized";
  }
  return "?";
}

SearchMode parse_search_mode(const std::string& name) {
  for (auto m : {SearchMode::factorized, SearchMode::fixed_activation, SearchMode::frozen_beta,
                 SearchMode::non_factorized}) {
    if (name == search_mode_name(m)) return m;
  }
  throw ConfigError("unknown search mode '" + name +
                    "' (expected factorized, fixed-activation, frozen-beta or non-factorized)");
}

void SearchConfig::validate() const {
  if (epochs == 0) throw ConfigError("search: epochs must be at least 1");
  if (batch == 0) throw ConfigError("search: batch must be positive");
  if (!(train_fraction > 0.0) || !(val_fraction > 0.0)) throw ConfigError("search: split fractions must be positive");
  if (train_fraction + val_fraction > 1.0 + 1e-12) throw ConfigError("search: split fractions sum above 1");
  if (!(w_lr_max > 0.0) || !(w_lr_min >= 0.0) || w_lr_min > w_lr_max) {
    throw ConfigError("search: need 0 <= w_lr_min <= w_lr_max, w_lr_max > 0");
  }
  if (!(arch_lr > 0.0)) throw ConfigError("search: arch_lr must be positive");
  if (w_momentum < 0.0 || w_momentum >= 1.0) throw ConfigError("search: w_momentum must be in [0, 1)");
  if (arch_beta1 < 0.0 || arch_beta1 >= 1.0 || arch_beta2 < 0.0 || arch_beta2 >= 1.0) {
    throw ConfigError("search: Adam betas must be in [0, 1)");
  }
  if (w_weight_decay < 0.0 || arch_weight_decay < 0.0 || grad_clip < 0.0) {
    throw ConfigError("search: weight decays and grad_clip must be non-negative");
  }
  if (warmup_epochs > epochs) throw ConfigError("search: warmup_epochs exceeds epochs");
  if (mode == SearchMode::frozen_beta && frozen_beta.empty()) {
    throw ConfigError("search: frozen-beta mode needs a β snapshot");
  }
  if (mode != SearchMode::frozen_beta && !frozen_beta.empty()) {
    throw ConfigError("search: a β snapshot is only used in frozen-beta mode");
  }
}

std::string SearchConfig::describe() const {
  std::ostringstream out;
  out.precision(17);
  out << "epochs=" << epochs << "\nbatch=" << batch << "\ntrain_fraction=" << train_fraction
      << "\nval_fraction=" << val_fraction << "\nw_lr_max=" << w_lr_max << "\nw_lr_min=" << w_lr_min
      << "\nw_momentum=" << w_momentum << "\nw_weight_decay=" << w_weight_decay << "\ngrad_clip=" << grad_clip
      << "\narch_lr=" << arch_lr << "\narch_beta1=" << arch_beta1 << "\narch_beta2=" << arch_beta2
      << "\narch_weight_decay=" << arch_weight_decay << "\nmode=" << search_mode_name(mode)
      << "\nfixed_activation=" << activation_name(fixed_activation) << "\nseed=" << seed
      << "\nwarmup_epochs=" << warmup_epochs << "\nsame_val_batch=" << same_val_batch << "\n";
  if (!frozen_beta.empty()) {
    std::string bytes;
    for (const auto& t : frozen_beta) {
      bytes.append(reinterpret_cast<const char*>(t.data().data()), t.numel() * sizeof(double));
    }
    out << "frozen_beta=" << digest_hex(bytes) << "\n";
  }
  return out.str();
}

SupernetConfig supernet_for_mode(SupernetConfig net, const SearchConfig& cfg) {
  switch (cfg.mode) {
    case SearchMode::factorized:
    case SearchMode::frozen_beta:
      net.edge_mode = EdgeMode::mixed;
      net.space.factorized = true;
      break;
    case SearchMode::fixed_activation:
      net.edge_mode = EdgeMode::fixed;
      net.fixed_activation = cfg.fixed_activation;
      net.space.factorized = true;
      break;
    case SearchMode::non_factorized:
      net.edge_mode = EdgeMode::flat;
      net.space.factorized = false;
      break;
  }
  return net;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(const std::vector<int>& labels,
                                                                            std::size_t classes, double train_fraction,
                                                                            double val_fraction, std::uint64_t seed) {
  if (labels.empty()) throw ConfigError("split: dataset is empty");
  if (!(train_fraction > 0.0) || !(val_fraction > 0.0)) throw ConfigError("split: fractions must be positive");
  if (train_fraction + val_fraction > 1.0 + 1e-12) throw ConfigError("split: fractions sum above 1");
  const std::size_t n = labels.size();
  const auto n_train = static_cast<std::size_t>(std::floor(train_fraction * static_cast<double>(n) + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(val_fraction * static_cast<double>(n) + 1e-9));
  if (n_train == 0 || n_val == 0) throw ConfigError("split: a split of " + std::to_string(n) + " items is empty");
  if (n_train + n_val > n) throw ConfigError("split: fractions exceed the dataset");

  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= classes) {
      throw InputError("split: label " + std::to_string(labels[i]) + " outside [0, " + std::to_string(classes) + ")");
    }
    by_class[labels[i]].push_back(i);
  }
  Rng rng(seed, "split");
  struct Keyed {
    double key;
    std::size_t cls;
    std::size_t index;
  };
  std::vector<Keyed> all;
  for (std::size_t c = 0; c < classes; ++c) {
    auto& items = by_class[c];
    for (std::size_t i = items.size(); i > 1; --i) std::swap(items[i - 1], items[rng.below(i)]);
    for (std::size_t r = 0; r < items.size(); ++r) {
      all.push_back({(static_cast<double>(r) + 0.5) / static_cast<double>(items.size()), c, items[r]});
    }
  }
  std::sort(all.begin(), all.end(), [](const Keyed& a, const Keyed& b) {
    return a.key != b.key ? a.key < b.key : a.cls < b.cls;
  });
  std::pair<std::vector<std::size_t>, std::vector<std::size_t>> out;
  for (std::size_t i = 0; i < n_train; ++i) out.first.push_back(all[i].index);
  for (std::size_t i = n_train; i < n_train + n_val; ++i) out.second.push_back(all[i].index);
  return out;
}

std::pair<Dataset, Dataset> split_dataset(const Dataset& ds, double train_fraction, double val_fraction,
                                          std::uint64_t seed) {
  auto [a, b] = split_indices(ds.labels, ds.classes, train_fraction, val_fraction, seed);
  return {ds.subset(a), ds.subset(b)};
}

// --- one step --------------------------------------------------------------------

namespace {

class GradScope {
 public:
  GradScope(const ParameterGroups& groups, const std::vector<Tensor>& enabled) {
    for (const auto* group : {&groups.omega, &groups.alpha, &groups.beta}) {
      for (const auto& t : *group) saved_.emplace_back(t, t.requires_grad());
    }
    for (auto& [t, flag] : saved_) t.set_requires_grad(false);
    for (auto t : enabled) t.set_requires_grad(true);
  }
  ~GradScope() {
    for (auto& [t, flag] : saved_) t.set_requires_grad(flag);
  }
  GradScope(const GradScope&) = delete;
  GradScope& operator=(const GradScope&) = delete;

 private:
  std::vector<std::pair<Tensor, bool>> saved_;
};

double checked(const Tensor& loss, const char* what) {
  const double v = loss.item();
  if (!std::isfinite(v)) throw NumericalError(std::string(what) + " loss is not finite");
  return v;
}

double update_group(const std::function<Tensor()>& loss_fn, const ParameterGroups& groups,
                    const std::vector<Tensor>& params, Optimizer& opt, double clip, LossKind kind,
                    const Versions& versions, const StepObserver& observer, const char* what) {
  GradScope scope(groups, params);
  opt.zero_grad();
  Tensor loss = loss_fn();
  const double v = checked(loss, what);
  if (observer) observer({kind, versions, v});
  if (loss.requires_grad()) loss.backward();
  if (clip > 0.0) clip_grad_norm(params, clip);
  opt.step();
  return v;
}

}  // namespace

StepLosses trilevel_step(const std::function<Tensor()>& train_loss, const std::function<Tensor()>& val_loss,
                         const std::function<Tensor()>& val_beta_loss, const ParameterGroups& groups,
                         Optimizer& omega_opt, Optimizer* alpha_opt, Optimizer* beta_opt, ArchUpdate update,
                         double clip, Versions& versions, const StepObserver& observer) {
  if (update != ArchUpdate::none && !alpha_opt) throw UsageError("trilevel_step: α update without an optimizer");
  if (update == ArchUpdate::alpha_then_beta && !beta_opt) {
    throw UsageError("trilevel_step: β update without an optimizer");
  }
  StepLosses out;
  out.train = update_group(train_loss, groups, groups.omega, omega_opt, clip, LossKind::train, versions, observer,
                           "training");
  ++versions.omega;
  if (update == ArchUpdate::none) return out;
  out.val = update_group(val_loss, groups, groups.alpha, *alpha_opt, 0.0, LossKind::val_alpha, versions, observer,
                         "validation (α pass)");
  ++versions.alpha;
  if (update == ArchUpdate::alpha_only) return out;
  update_group(val_beta_loss ? val_beta_loss : val_loss, groups, groups.beta, *beta_opt, 0.0, LossKind::val_beta,
               versions, observer, "validation (β pass)");
  ++versions.beta;
  return out;
}

// --- full search -----------------------------------------------------------------

namespace {

std::string describe_supernet(const SupernetConfig& n) {
  std::ostringstream out;
  out << "nodes=" << n.space.num_intermediate_nodes << "\nedges_per_node=" << n.space.edges_selected_per_node
      << "\ncell_types=" << n.space.cell_types << "\nfactorized=" << n.space.factorized << "\nregular_ops=";
  for (auto op : n.space.regular_ops) out << regular_op_name(op) << ",";
  out << "\nactivations=";
  for (auto a : n.space.activation_ops) out << activation_name(a) << ",";
  out << "\nedge_mode=" << static_cast<int>(n.edge_mode) << "\nfixed_activation=" << activation_name(n.fixed_activation)
      << "\ninput_channels=" << n.input_channels << "\nclasses=" << n.num_classes << "\nchannels=" << n.channels
      << "\ncells=" << n.cells << "\nstem_multiplier=" << n.stem_multiplier << "\n";
  return out.str();
}

SupernetConfig checked_net(const SearchConfig& cfg, const SupernetConfig& net, const Dataset& data) {
  cfg.validate();
  SupernetConfig out = supernet_for_mode(net, cfg);
  out.validate();
  data.validate();
  if (data.images.rank() != 4) throw InputError("search: images must be [N, C, H, W]");
  if (data.classes != out.num_classes) {
    throw ConfigError("search: dataset has " + std::to_string(data.classes) + " classes, network expects " +
                      std::to_string(out.num_classes));
  }
  if (data.channels() != out.input_channels) {
    throw ConfigError("search: dataset has " + std::to_string(data.channels()) + " channels, network expects " +
                      std::to_string(out.input_channels));
  }
  std::size_t h = data.height(), w = data.width();
  for (bool r : reduction_layout(out.cells)) {
    if (!r) continue;
    if (h % 2 != 0 || w % 2 != 0) throw ConfigError("search: image size does not survive the reduction cells");
    h /= 2;
    w /= 2;
  }
  if (cfg.mode == SearchMode::frozen_beta) {
    const SpaceConfig& s = out.space;
    if (cfg.frozen_beta.size() != s.cell_types) throw ConfigError("search: β snapshot has the wrong cell-type count");
    for (const auto& t : cfg.frozen_beta) {
      if (t.shape() != Shape{s.edge_count(), s.activation_ops.size()}) {
        throw ConfigError("search: β snapshot has shape " + shape_str(t.shape()) + ", expected " +
                          shape_str({s.edge_count(), s.activation_ops.size()}));
      }
    }
  }
  return out;
}

std::string format_double(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

}  // namespace

Search::Search(SearchConfig cfg, SupernetConfig net, const Dataset& data)
    : cfg_(std::move(cfg)),
      net_cfg_(checked_net(cfg_, net, data)),
      init_rng_(cfg_.seed, "init"),
      data_rng_(cfg_.seed, "data"),
      rrelu_rng_(cfg_.seed, "rrelu") {
  auto [train, val] = split_dataset(data, cfg_.train_fraction, cfg_.val_fraction, cfg_.seed);
  train_ = std::move(train);
  val_ = std::move(val);
  net_ = std::make_unique<SuperNetwork>(net_cfg_, init_rng_);
  arch_ = ArchParams(net_cfg_.space, net_cfg_.edge_mode);
  arch_.randomize(derive_seed(cfg_.seed, "arch"));
  if (cfg_.mode == SearchMode::frozen_beta) {
    for (std::size_t t = 0; t < arch_.beta.size(); ++t) {
      auto src = cfg_.frozen_beta[t].data();
      std::copy(src.begin(), src.end(), arch_.beta[t].mutable_data().begin());
      arch_.beta[t].set_requires_grad(false);
    }
  }
  omega_opt_ = std::make_unique<Optimizer>(
      Optimizer::sgd(net_->parameters(), cfg_.w_lr_max, cfg_.w_momentum, cfg_.w_weight_decay));
  const auto& alpha_bank = net_cfg_.edge_mode == EdgeMode::flat ? arch_.flat : arch_.alpha;
  alpha_opt_ = std::make_unique<Optimizer>(
      Optimizer::adam(alpha_bank, cfg_.arch_lr, cfg_.arch_beta1, cfg_.arch_beta2, cfg_.arch_weight_decay));
  if (cfg_.mode == SearchMode::factorized) {
    beta_opt_ = std::make_unique<Optimizer>(
        Optimizer::adam(arch_.beta, cfg_.arch_lr, cfg_.arch_beta1, cfg_.arch_beta2, cfg_.arch_weight_decay));
  }
}

std::size_t Search::steps_per_epoch() const {
  return std::max<std::size_t>(1, std::min(train_.size(), val_.size()) / cfg_.batch);
}

Tensor Search::batch_loss(const std::vector<std::size_t>& order, const Dataset& ds, std::size_t step, Mode mode) {
  const std::size_t count = std::min(cfg_.batch, order.size());
  const std::size_t first = (step * count) % (order.size() - count + 1);
  Tensor images = ds.batch_images(order, first, count);
  const auto labels = ds.batch_labels(order, first, count);
  ForwardContext ctx{mode, &rrelu_rng_};
  return cross_entropy(net_->forward(images, arch_, ctx), labels);
}

void Search::run_epoch() {
  if (done()) throw UsageError("search: all epochs already ran");
  const std::size_t steps = steps_per_epoch();
  auto shuffled = [&](std::size_t n) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[data_rng_.below(i)]);
    return order;
  };
  const auto train_order = shuffled(train_.size());
  const auto val_order = shuffled(val_.size());
  omega_opt_->set_lr(cosine_lr(static_cast<double>(epoch_), static_cast<double>(cfg_.epochs), cfg_.w_lr_max,
                               cfg_.w_lr_min));

  const bool warmup = epoch_ < cfg_.warmup_epochs;
  ArchUpdate update = ArchUpdate::alpha_only;
  if (warmup) {
    update = ArchUpdate::none;
  } else if (cfg_.mode == SearchMode::factorized) {
    update = ArchUpdate::alpha_then_beta;
  }
  ParameterGroups groups;
  groups.omega = net_->parameters();
  groups.alpha = net_cfg_.edge_mode == EdgeMode::flat ? arch_.flat : arch_.alpha;
  groups.beta = arch_.beta;

  double train_sum = 0.0, val_sum = 0.0;
  for (std::size_t s = 0; s < steps; ++s) {
    auto train_fn = [&] { return batch_loss(train_order, train_, s, Mode::train); };
    auto val_fn = [&] { return batch_loss(val_order, val_, s, Mode::train); };
    std::function<Tensor()> val_beta_fn;
    if (!cfg_.same_val_batch) val_beta_fn = [&] { return batch_loss(val_order, val_, (s + 1) % steps, Mode::train); };
    StepLosses losses;
    try {
      losses = trilevel_step(train_fn, val_fn, val_beta_fn, groups, *omega_opt_, alpha_opt_.get(), beta_opt_.get(),
                             update, cfg_.grad_clip, versions_, observer_);
      if (warmup) {
        NoGradGuard guard;
        losses.val = checked(val_fn(), "validation");
      }
    } catch (const NumericalError& e) {
      throw NumericalError("search epoch " + std::to_string(epoch_ + 1) + " step " + std::to_string(s + 1) + ": " +
                           e.what());
    }
    train_sum += losses.train;
    val_sum += losses.val;
  }

  SearchHistoryRow row;
  row.epoch = epoch_ + 1;
  row.train_loss = train_sum / static_cast<double>(steps);
  row.val_loss = val_sum / static_cast<double>(steps);
  row.alpha_entropy_mean = mean_row_entropy(net_cfg_.edge_mode == EdgeMode::flat ? arch_.flat : arch_.alpha);
  row.beta_entropy_mean = arch_.beta.empty() ? 0.0 : mean_row_entropy(arch_.beta);
  row.genotype_digest = genotype_digest(genotype());
  history_.push_back(row);
  ++epoch_;
}

Genotype Search::genotype() const {
  if (net_cfg_.edge_mode == EdgeMode::flat) return derive_flat_genotype(arch_.flat, net_cfg_.space);
  return derive_genotype(arch_.alpha, arch_.beta, net_cfg_.space, net_cfg_.fixed_activation);
}

SearchResult Search::result() const { return {arch_.clone(), genotype(), history_}; }

std::string Search::history_csv() const {
  std::ostringstream out;
  out << "# mode=" << search_mode_name(cfg_.mode) << " super_operators=" << super_operator_count(net_cfg_.space)
      << "\n";
  out << "epoch,train_loss,val_loss,alpha_entropy_mean,beta_entropy_mean,genotype_digest\n";
  for (const auto& r : history_) {
    out << r.epoch << "," << format_double(r.train_loss) << "," << format_double(r.val_loss) << ","
        << format_double(r.alpha_entropy_mean) << "," << format_double(r.beta_entropy_mean) << ","
        << r.genotype_digest << "\n";
  }
  return out.str();
}

std::string Search::config_digest() const { return digest_hex(cfg_.describe() + describe_supernet(net_cfg_)); }

namespace {

std::vector<double> values_of(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

std::string history_text(const std::vector<SearchHistoryRow>& rows) {
  std::ostringstream out;
  for (const auto& r : rows) {
    out << r.epoch << " " << format_double(r.train_loss) << " " << format_double(r.val_loss) << " "
        << format_double(r.alpha_entropy_mean) << " " << format_double(r.beta_entropy_mean) << " "
        << r.genotype_digest << "\n";
  }
  return out.str();
}

std::vector<SearchHistoryRow> parse_history(const std::string& text) {
  std::vector<SearchHistoryRow> rows;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    SearchHistoryRow r;
    std::string train, val, ae, be;
    if (!(ls >> r.epoch >> train >> val >> ae >> be >> r.genotype_digest)) {
      throw FormatError("checkpoint history row is malformed: '" + line + "'");
    }
    r.train_loss = std::stod(train);
    r.val_loss = std::stod(val);
    r.alpha_entropy_mean = std::stod(ae);
    r.beta_entropy_mean = std::stod(be);
    rows.push_back(r);
  }
  return rows;
}

}  // namespace

Checkpoint Search::checkpoint() const {
  Checkpoint ck;
  ck.config_digest = config_digest();
  ck.set_meta("kind", "search");
  ck.set_meta("config", cfg_.describe() + describe_supernet(net_cfg_));
  ck.set_meta("epoch", std::to_string(epoch_));
  ck.set_meta("versions", std::to_string(versions_.omega) + " " + std::to_string(versions_.alpha) + " " +
                              std::to_string(versions_.beta));
  ck.set_meta("rng.data", data_rng_.serialize());
  ck.set_meta("rng.rrelu", rrelu_rng_.serialize());
  ck.set_meta("history", history_text(history_));
  ck.set_meta("genotype", serialize_genotype(genotype()));
  for (const auto& p : net_->named_parameters()) ck.add_array("omega." + p.name, p.tensor.shape(), values_of(p.tensor));
  for (const auto& b : net_->named_buffers()) ck.add_array("buffer." + b.name, {b.values->size()}, *b.values);
  for (const auto& a : arch_.named()) ck.add_array("arch." + a.name, a.tensor.shape(), values_of(a.tensor));
  store_optimizer(ck, "opt.omega", *omega_opt_);
  store_optimizer(ck, "opt.alpha", *alpha_opt_);
  if (beta_opt_) store_optimizer(ck, "opt.beta", *beta_opt_);
  return ck;
}

void Search::restore(const Checkpoint& ck) {
  if (ck.config_digest != config_digest()) {
    throw ConfigError("checkpoint was written by a different search configuration (digest " + ck.config_digest +
                      ", expected " + config_digest() + ")");
  }
  if (ck.meta_value("kind") != "search") throw FormatError("checkpoint is not a search checkpoint");
  const std::size_t epoch = std::stoull(ck.meta_value("epoch"));
  if (epoch > cfg_.epochs) throw FormatError("checkpoint epoch exceeds the configured epochs");
  for (auto& p : net_->named_parameters()) ck.restore_into("omega." + p.name, p.tensor);
  for (auto& b : net_->named_buffers()) ck.restore_into("buffer." + b.name, *b.values);
  for (auto& a : arch_.named()) ck.restore_into("arch." + a.name, a.tensor);
  restore_optimizer(ck, "opt.omega", *omega_opt_);
  restore_optimizer(ck, "opt.alpha", *alpha_opt_);
  if (beta_opt_) restore_optimizer(ck, "opt.beta", *beta_opt_);
  data_rng_.deserialize(ck.meta_value("rng.data"));
  rrelu_rng_.deserialize(ck.meta_value("rng.rrelu"));
  std::istringstream vs(ck.meta_value("versions"));
  if (!(vs >> versions_.omega >> versions_.alpha >> versions_.beta)) throw FormatError("checkpoint versions malformed");
  history_ = parse_history(ck.meta_value("history"));
  epoch_ = epoch;
}

SearchResult run_search(const SearchConfig& cfg, const SupernetConfig& net, const Dataset& data,
                        const std::string& checkpoint_path) {
  Search search(cfg, net, data);
  if (!checkpoint_path.empty() && std::filesystem::exists(checkpoint_path)) {
    search.restore(load_checkpoint(checkpoint_path));
  }
  while (!search.done()) {
    search.run_epoch();
    if (!checkpoint_path.empty()) save_checkpoint(search.checkpoint(), checkpoint_path);
  }
  return search.result();
}

}  // namespace fnas
