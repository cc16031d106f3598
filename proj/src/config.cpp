#include "fnas/config.hpp"

#include <charconv>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "fnas/errors.hpp"

namespace fnas {

void RunConfig::propagate_seed() {
  search.seed = seed;
  train.seed = seed;
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string fmt(double v) {
  char buf[64];
  auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

double to_double(const std::string& v) {
  double out = 0.0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

std::uint64_t to_uint(const std::string& v) {
  std::uint64_t out = 0;
  auto r = std::from_chars(v.data(), v.data() + v.size(), out);
  if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
    throw ConfigError("expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::stringstream in(v);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const char* source_name(DataSource s) {
  switch (s) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::idx: return "idx";
    case DataSource::cifar: return "cifar";
  }
  return "?";
}

DataSource parse_source(const std::string& v) {
  for (auto s : {DataSource::synthetic, DataSource::idx, DataSource::cifar}) {
    if (v == source_name(s)) return s;
  }
  throw ConfigError("unknown data source '" + v + "' (expected synthetic, idx or cifar)");
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

#define FNAS_SIZE(KEY, MEMBER)                                                                    \
  Field {                                                                                         \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = static_cast<std::size_t>(to_uint(v)); }, \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                               \
  }
#define FNAS_U64(KEY, MEMBER)                                                          \
  Field {                                                                              \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_uint(v); },            \
        [](const RunConfig& c) { return std::to_string(c.MEMBER); }                    \
  }
#define FNAS_DOUBLE(KEY, MEMBER)                                                       \
  Field {                                                                              \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_double(v); },          \
        [](const RunConfig& c) { return fmt(c.MEMBER); }                               \
  }
#define FNAS_BOOL(KEY, MEMBER)                                                         \
  Field {                                                                              \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = to_bool(v); },            \
        [](const RunConfig& c) { return std::string(c.MEMBER ? "true" : "false"); }    \
  }
#define FNAS_STRING(KEY, MEMBER)                                                       \
  Field {                                                                              \
    KEY, [](RunConfig& c, const std::string& v) { c.MEMBER = v; },                     \
        [](const RunConfig& c) { return c.MEMBER; }                                    \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      FNAS_U64("seed", seed),
      FNAS_STRING("output_dir", output_dir),
      {"data.source", [](RunConfig& c, const std::string& v) { c.data.source = parse_source(v); },
       [](const RunConfig& c) { return std::string(source_name(c.data.source)); }},
      FNAS_STRING("data.path", data.path),
      FNAS_STRING("data.test_path", data.test_path),
      FNAS_DOUBLE("data.test_fraction", data.test_fraction),
      FNAS_SIZE("data.classes", data.synth.classes),
      FNAS_SIZE("data.samples", data.synth.samples),
      FNAS_SIZE("data.size", data.synth.size),
      FNAS_SIZE("data.channels", data.synth.channels),
      FNAS_U64("data.seed", data.synth.seed),
      {"data.difficulty", [](RunConfig& c, const std::string& v) { c.data.synth.difficulty = parse_difficulty(v); },
       [](const RunConfig& c) { return std::string(difficulty_name(c.data.synth.difficulty)); }},
      FNAS_SIZE("space.nodes", supernet.space.num_intermediate_nodes),
      FNAS_SIZE("space.edges_per_node", supernet.space.edges_selected_per_node),
      FNAS_SIZE("space.cell_types", supernet.space.cell_types),
      {"space.regular_ops",
       [](RunConfig& c, const std::string& v) {
         c.supernet.space.regular_ops.clear();
         for (const auto& name : split_list(v)) c.supernet.space.regular_ops.push_back(parse_regular_op(name));
       },
       [](const RunConfig& c) {
         std::string out;
         for (auto op : c.supernet.space.regular_ops) out += (out.empty() ? "" : ",") + std::string(regular_op_name(op));
         return out;
       }},
      {"space.activations",
       [](RunConfig& c, const std::string& v) {
         c.supernet.space.activation_ops.clear();
         for (const auto& name : split_list(v)) c.supernet.space.activation_ops.push_back(parse_activation(name));
       },
       [](const RunConfig& c) {
         std::string out;
         for (auto a : c.supernet.space.activation_ops) out += (out.empty() ? "" : ",") + std::string(activation_name(a));
         return out;
       }},
      {"space.factorized", [](RunConfig& c, const std::string& v) { c.supernet.space.factorized = to_bool(v); },
       [](const RunConfig& c) { return std::string(c.supernet.space.factorized ? "true" : "false"); }},
      FNAS_SIZE("search.channels", supernet.channels),
      FNAS_SIZE("search.cells", supernet.cells),
      FNAS_SIZE("search.stem_multiplier", supernet.stem_multiplier),
      {"search.mode", [](RunConfig& c, const std::string& v) { c.search.mode = parse_search_mode(v); },
       [](const RunConfig& c) { return std::string(search_mode_name(c.search.mode)); }},
      {"search.fixed_activation",
       [](RunConfig& c, const std::string& v) { c.search.fixed_activation = parse_activation(v); },
       [](const RunConfig& c) { return std::string(activation_name(c.search.fixed_activation)); }},
      FNAS_STRING("search.frozen_beta", frozen_beta_path),
      FNAS_SIZE("search.epochs", search.epochs),
      FNAS_SIZE("search.batch", search.batch),
      FNAS_DOUBLE("search.train_fraction", search.train_fraction),
      FNAS_DOUBLE("search.val_fraction", search.val_fraction),
      FNAS_DOUBLE("search.w_lr_max", search.w_lr_max),
      FNAS_DOUBLE("search.w_lr_min", search.w_lr_min),
      FNAS_DOUBLE("search.w_momentum", search.w_momentum),
      FNAS_DOUBLE("search.w_weight_decay", search.w_weight_decay),
      FNAS_DOUBLE("search.grad_clip", search.grad_clip),
      FNAS_DOUBLE("search.arch_lr", search.arch_lr),
      FNAS_DOUBLE("search.arch_beta1", search.arch_beta1),
      FNAS_DOUBLE("search.arch_beta2", search.arch_beta2),
      FNAS_DOUBLE("search.arch_weight_decay", search.arch_weight_decay),
      FNAS_SIZE("search.warmup_epochs", search.warmup_epochs),
      FNAS_BOOL("search.same_val_batch", search.same_val_batch),
      FNAS_BOOL("search.resume", resume),
      FNAS_SIZE("train.cells", train.cells),
      FNAS_SIZE("train.channels", train.channels),
      FNAS_SIZE("train.stem_multiplier", train.stem_multiplier),
      FNAS_SIZE("train.epochs", train.epochs),
      FNAS_SIZE("train.batch", train.batch),
      FNAS_DOUBLE("train.lr_max", train.lr_max),
      FNAS_DOUBLE("train.lr_min", train.lr_min),
      FNAS_DOUBLE("train.momentum", train.momentum),
      FNAS_DOUBLE("train.weight_decay", train.weight_decay),
      FNAS_DOUBLE("train.grad_clip", train.grad_clip),
      FNAS_DOUBLE("train.droppath", train.droppath),
      FNAS_SIZE("train.cutout", train.cutout),
      FNAS_SIZE("train.pad", train.pad),
      FNAS_DOUBLE("train.flip_prob", train.flip_prob),
      FNAS_BOOL("train.auxiliary", train.auxiliary),
      FNAS_DOUBLE("train.aux_weight", train.aux_weight),
      FNAS_DOUBLE("train.label_smoothing", train.label_smoothing),
      FNAS_SIZE("train.eval_batch", train.eval_batch),
      {"train.activation",
       [](RunConfig& c, const std::string& v) {
         if (v == "searched") {
           c.retrain_activation.reset();
         } else {
           c.retrain_activation = parse_activation(v);
         }
       },
       [](const RunConfig& c) {
         return c.retrain_activation ? std::string(activation_name(*c.retrain_activation)) : std::string("searched");
       }},
      FNAS_STRING("genotype", genotype_path),
      FNAS_STRING("checkpoint", checkpoint_path),
      FNAS_STRING("model", model_path),
  };
  return table;
}

#undef FNAS_SIZE
#undef FNAS_U64
#undef FNAS_DOUBLE
#undef FNAS_BOOL
#undef FNAS_STRING

}  // namespace

std::vector<std::string> config_keys() {
  std::vector<std::string> out{"schema_version"};
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

RunConfig parse_run_config(const std::string& text) {
  std::map<std::string, const Field*> by_key;
  for (const auto& f : fields()) by_key[f.key] = &f;
  RunConfig cfg;
  std::set<std::string> seen;
  bool have_version = false;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError(number, "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw ParseError(number, "missing key before '='");
    if (!seen.insert(key).second) throw ParseError(number, "key '" + key + "' given twice");
    if (key == "schema_version") {
      if (value != std::to_string(kConfigSchemaVersion)) {
        throw ParseError(number, "unsupported schema_version '" + value + "' (expected " +
                                     std::to_string(kConfigSchemaVersion) + ")");
      }
      have_version = true;
      continue;
    }
    auto it = by_key.find(key);
    if (it == by_key.end()) throw ParseError(number, "unknown key '" + key + "'");
    try {
      it->second->set(cfg, value);
    } catch (const ParseError&) {
      throw;
    } catch (const Error& e) {
      throw ParseError(number, "key '" + key + "': " + e.what());
    }
  }
  if (!have_version) throw ParseError(number == 0 ? 1 : number, "missing schema_version");
  cfg.propagate_seed();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open config '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string serialize_run_config(const RunConfig& cfg) {
  std::string out = "schema_version = " + std::to_string(kConfigSchemaVersion) + "\n";
  for (const auto& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

std::pair<Dataset, Dataset> load_run_data(const DataConfig& cfg, std::uint64_t split_seed) {
  auto load = [&](const std::string& path) {
    if (path.empty()) throw ConfigError("data.path is required for source " + std::string(source_name(cfg.source)));
    return cfg.source == DataSource::idx ? load_idx(path) : load_cifar_binary(path);
  };
  Dataset train, test;
  if (cfg.source == DataSource::synthetic) {
    if (!cfg.path.empty() || !cfg.test_path.empty()) throw ConfigError("synthetic data takes no data.path");
    Dataset all = synth_generate(cfg.synth);
    auto [a, b] = split_indices(all.labels, all.classes, 1.0 - cfg.test_fraction, cfg.test_fraction, split_seed);
    train = all.subset(a);
    test = all.subset(b);
  } else if (!cfg.test_path.empty()) {
    train = load(cfg.path);
    test = load(cfg.test_path);
  } else if (cfg.source == DataSource::cifar && std::filesystem::is_directory(cfg.path) &&
             std::filesystem::exists(std::filesystem::path(cfg.path) / "test_batch.bin")) {
    train = load(cfg.path);
    test = load_cifar_binary((std::filesystem::path(cfg.path) / "test_batch.bin").string());
  } else {
    Dataset all = load(cfg.path);
    auto [a, b] = split_indices(all.labels, all.classes, 1.0 - cfg.test_fraction, cfg.test_fraction, split_seed);
    train = all.subset(a);
    test = all.subset(b);
  }
  if (test.classes != train.classes) test.classes = train.classes = std::max(train.classes, test.classes);
  std::vector<double> mean, stddev;
  compute_standardization(train, mean, stddev);
  apply_standardization(train, mean, stddev);
  apply_standardization(test, mean, stddev);
  return {std::move(train), std::move(test)};
}

}  // namespace fnas
