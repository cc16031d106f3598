#include "fnas/cli.hpp"

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "fnas/errors.hpp"
#include "json.hpp"

namespace fnas {

namespace fs = std::filesystem;

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const ConfigError*>(&e) || dynamic_cast<const ParseError*>(&e) ||
      dynamic_cast<const ValidationError*>(&e) || dynamic_cast<const InputError*>(&e) ||
      dynamic_cast<const UsageError*>(&e)) {
    return kExitUsage;
  }
  return kExitRuntime;
}

std::string space_size_text(const SpaceConfig& space) {
  const BigInt n = space_cardinality(space);
  return n.str() + " ≈" + to_scientific(n, 3);
}

Genotype derive_from_checkpoint(const Checkpoint& ck, const SpaceConfig& space, ActivationKind fixed_activation) {
  if (!ck.has_meta("kind") || ck.meta_value("kind") != "search") {
    throw InputError("not a search checkpoint (kind " + (ck.has_meta("kind") ? ck.meta_value("kind") : "?") + ")");
  }
  auto bank = [&](const std::string& prefix) {
    std::vector<Tensor> out;
    for (std::size_t t = 0; t < 2; ++t) {
      const std::string name = "arch." + prefix + "." + cell_type_name(t);
      if (!ck.has_array(name)) break;
      const auto& a = ck.array(name);
      out.emplace_back(a.shape, a.values);
    }
    return out;
  };
  if (ck.has_meta("config")) {
    std::istringstream in(ck.meta_value("config"));
    std::string line;
    while (std::getline(in, line)) {
      if (line.rfind("fixed_activation=", 0) == 0) {
        fixed_activation = parse_activation(line.substr(std::string("fixed_activation=").size()));
        break;
      }
    }
  }
  const auto flat = bank("flat");
  if (!flat.empty()) {
    SpaceConfig flat_space = space;
    flat_space.factorized = false;
    return derive_flat_genotype(flat, flat_space);
  }
  const auto alpha = bank("alpha");
  if (alpha.empty()) throw FormatError("search checkpoint holds no architecture parameters");
  return derive_genotype(alpha, bank("beta"), space, fixed_activation);
}

namespace {

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string mode;
  std::string out;
  std::string input;
  bool random = false;
};

std::string read_text(const std::string& path, const std::string& what) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + what + " '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Timestamped progress lines; the only output that varies between runs.
class SidecarLog {
 public:
  explicit SidecarLog(const fs::path& path) : out_(path, std::ios::trunc) {}
  void line(const std::string& text) {
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    gmtime_r(&now, &tm);
    out_ << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ") << ' ' << text << '\n';
    out_.flush();
  }

 private:
  std::ofstream out_;
};

struct Context {
  RunConfig cfg;
  fs::path out_dir;
  std::unique_ptr<SidecarLog> log;

  std::string artifact(const std::string& name) const { return (out_dir / name).string(); }
  void write(const std::string& name, const std::string& contents) const {
    write_file_atomic(artifact(name), contents);
  }
};

void apply_mode(RunConfig& cfg, const std::string& mode) {
  if (mode.empty()) return;
  const auto colon = mode.find(':');
  const std::string head = mode.substr(0, colon);
  cfg.search.mode = parse_search_mode(head);
  if (colon == std::string::npos) return;
  const std::string payload = mode.substr(colon + 1);
  switch (cfg.search.mode) {
    case SearchMode::fixed_activation: cfg.search.fixed_activation = parse_activation(payload); break;
    case SearchMode::frozen_beta: cfg.frozen_beta_path = payload; break;
    default: throw ConfigError("mode '" + head + "' takes no ':' payload");
  }
}

Context open_context(const Options& opt, const std::string& command) {
  Context ctx;
  if (!opt.config.empty()) {
    try {
      ctx.cfg = load_run_config(opt.config);
    } catch (const ParseError& e) {
      throw ConfigError(opt.config + ": " + e.what());
    }
  }
  if (opt.seed) ctx.cfg.seed = *opt.seed;
  apply_mode(ctx.cfg, opt.mode);
  ctx.cfg.propagate_seed();
  ctx.cfg.train.constants = ctx.cfg.supernet.constants;
  if (!opt.out.empty()) {
    ctx.out_dir = opt.out;
  } else if (!ctx.cfg.output_dir.empty()) {
    ctx.out_dir = ctx.cfg.output_dir;
  } else if (const char* env = std::getenv(kOutputEnv); env && *env) {
    ctx.out_dir = env;
  } else {
    ctx.out_dir = "fnas_out";
  }
  fs::create_directories(ctx.out_dir);
  ctx.log = std::make_unique<SidecarLog>(ctx.out_dir / (command + ".log"));
  ctx.log->line(command + " started" + (opt.config.empty() ? "" : " with config " + opt.config));
  return ctx;
}

std::string pick_input(const Options& opt, const std::string& configured, const Context& ctx,
                       const std::string& fallback) {
  if (!opt.input.empty()) return opt.input;
  if (!configured.empty()) return configured;
  return ctx.artifact(fallback);
}

std::string fixed(double v, int digits) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(digits) << v;
  return s.str();
}

std::vector<Tensor> load_frozen_beta(const std::string& path) {
  const Checkpoint ck = load_checkpoint(path);
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < 2; ++t) {
    const std::string name = std::string("arch.beta.") + cell_type_name(t);
    if (!ck.has_array(name)) break;
    out.emplace_back(ck.array(name).shape, ck.array(name).values);
  }
  if (out.empty()) throw InputError("checkpoint '" + path + "' holds no β tables");
  return out;
}

int cmd_search(const Options& opt, std::ostream& out) {
  Context ctx = open_context(opt, "search");
  RunConfig& cfg = ctx.cfg;
  if (cfg.search.mode == SearchMode::frozen_beta) {
    if (cfg.frozen_beta_path.empty()) cfg.frozen_beta_path = opt.input;
    if (cfg.frozen_beta_path.empty()) throw ConfigError("frozen-beta mode needs search.frozen_beta or an input checkpoint");
    cfg.search.frozen_beta = load_frozen_beta(cfg.frozen_beta_path);
  }
  auto [train, test] = load_run_data(cfg.data, cfg.data.synth.seed);
  SupernetConfig net = cfg.supernet;
  net.input_channels = train.channels();
  net.num_classes = train.classes;
  const std::string ckpt = ctx.artifact("search.ckpt");
  if (!cfg.resume && fs::exists(ckpt)) fs::remove(ckpt);
  Search search(cfg.search, net, train);
  if (fs::exists(ckpt)) {
    search.restore(load_checkpoint(ckpt));
    ctx.log->line("resumed at epoch " + std::to_string(search.epoch()));
  }
  ctx.write("search_config.txt", serialize_run_config(cfg));
  while (!search.done()) {
    search.run_epoch();
    save_checkpoint(search.checkpoint(), ckpt);
    const auto& row = search.history().back();
    ctx.log->line("epoch " + std::to_string(row.epoch) + " train_loss " + fixed(row.train_loss, 4) + " val_loss " +
                  fixed(row.val_loss, 4) + " genotype " + row.genotype_digest);
  }
  const Genotype g = search.genotype();
  ctx.write("history.csv", search.history_csv());
  ctx.write("genotype.txt", serialize_genotype(g));
  ctx.log->line("search finished");
  out << "mode " << search_mode_name(cfg.search.mode) << ", " << search.epoch() << " epochs\n"
      << "genotype " << genotype_digest(g) << " written to " << ctx.artifact("genotype.txt") << "\n";
  return kExitOk;
}

int cmd_derive(const Options& opt, std::ostream& out) {
  Context ctx = open_context(opt, "derive");
  Genotype g;
  if (opt.random) {
    Rng rng(ctx.cfg.seed, "random-genotype");
    g = random_genotype(ctx.cfg.supernet.space, rng);
  } else {
    const std::string path = pick_input(opt, ctx.cfg.checkpoint_path, ctx, "search.ckpt");
    if (!fs::exists(path)) throw InputError("search checkpoint '" + path + "' not found");
    g = derive_from_checkpoint(load_checkpoint(path), ctx.cfg.supernet.space, ctx.cfg.search.fixed_activation);
  }
  validate_genotype(g);
  ctx.write("genotype.txt", serialize_genotype(g));
  ctx.log->line("derived genotype " + genotype_digest(g));
  out << serialize_genotype(g);
  return kExitOk;
}

Genotype load_genotype(const Options& opt, const Context& ctx) {
  const std::string path = pick_input(opt, ctx.cfg.genotype_path, ctx, "genotype.txt");
  return parse_genotype(read_text(path, "genotype"));
}

int cmd_retrain(const Options& opt, std::ostream& out) {
  Context ctx = open_context(opt, "retrain");
  const RunConfig& cfg = ctx.cfg;
  Genotype g = load_genotype(opt, ctx);
  if (cfg.retrain_activation) g = with_fixed_activation(g, *cfg.retrain_activation);
  validate_genotype(g);
  auto [train, test] = load_run_data(cfg.data, cfg.data.synth.seed);
  ctx.write("retrain_config.txt", serialize_run_config(cfg));
  auto result = retrain(g, train, test, cfg.train, [&](const EpochMetrics& m) {
    ctx.log->line("epoch " + std::to_string(m.epoch) + " train_loss " + fixed(m.train_loss, 4) + " train_err " +
                  fixed(m.train_err, 2) + " test_err " + fixed(m.test_err, 2));
  });
  const std::string digest = genotype_digest(g);
  ctx.write("metrics.csv", result.metrics.csv());
  ctx.write("summary.json", result.metrics.summary_json(digest));
  save_checkpoint(model_checkpoint(*result.network, cfg.train, train.channels(), train.classes),
                  ctx.artifact("model.ckpt"));
  ctx.log->line("retrain finished");
  out << "genotype " << digest << " test error " << fixed(result.metrics.final_test_err, 2) << "% params "
      << result.metrics.params << " macs " << result.metrics.macs << "\n";
  return kExitOk;
}

int cmd_eval(const Options& opt, std::ostream& out) {
  Context ctx = open_context(opt, "eval");
  const std::string path = pick_input(opt, ctx.cfg.model_path, ctx, "model.ckpt");
  if (!fs::exists(path)) throw InputError("model '" + path + "' not found");
  TrainConfig model_cfg;
  auto net = load_model(load_checkpoint(path), model_cfg);
  auto [train, test] = load_run_data(ctx.cfg.data, ctx.cfg.data.synth.seed);
  const EvalResult r = evaluate(*net, test, ctx.cfg.train.eval_batch);
  nlohmann::ordered_json j;
  j["genotype_digest"] = genotype_digest(net->genotype());
  j["samples"] = test.size();
  j["test_loss"] = r.loss;
  j["test_err"] = r.error;
  ctx.write("eval.json", j.dump(2) + "\n");
  ctx.log->line("evaluated " + path);
  out << "test error " << fixed(r.error, 2) << "% (" << test.size() << " samples)\n";
  return kExitOk;
}

int cmd_space_size(const Options& opt, std::ostream& out) {
  Context ctx = open_context(opt, "space-size");
  ctx.cfg.supernet.space.validate();
  const std::string text = space_size_text(ctx.cfg.supernet.space);
  ctx.write("space_size.txt", text + "\n");
  out << text << "\n";
  return kExitOk;
}

int cmd_render(const Options& opt, std::ostream& out) {
  Context ctx = open_context(opt, "render");
  const Genotype g = load_genotype(opt, ctx);
  ctx.write("genotype.dot", export_dot(g));
  out << "wrote " << ctx.artifact("genotype.dot") << "\n";
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Factorized differentiable architecture search", "fnas"};
  app.require_subcommand(1);
  Options opt;
  struct Command {
    const char* name;
    const char* help;
    const char* input;
    int (*run)(const Options&, std::ostream&);
  };
  const std::vector<Command> commands = {
      {"search", "Run the architecture search", "frozen-beta source checkpoint", cmd_search},
      {"derive", "Derive a genotype from a search checkpoint", "search checkpoint", cmd_derive},
      {"retrain", "Retrain a genotype from scratch", "genotype file", cmd_retrain},
      {"eval", "Evaluate a trained model on the test split", "model checkpoint", cmd_eval},
      {"space-size", "Print the exact size of the search space", nullptr, cmd_space_size},
      {"render", "Export a genotype as Graphviz DOT", "genotype file", cmd_render},
  };
  std::vector<std::pair<CLI::App*, const Command*>> subs;
  for (const auto& c : commands) {
    CLI::App* sub = app.add_subcommand(c.name, c.help);
    sub->add_option("--config", opt.config, "Run configuration file");
    sub->add_option("--seed", opt.seed, "Override the run seed");
    sub->add_option("--mode", opt.mode, "Search mode, e.g. fixed-activation:selu");
    sub->add_option("--out", opt.out, std::string("Output directory (default: $") + kOutputEnv + ")");
    if (c.input) sub->add_option("input", opt.input, c.input);
    if (std::string(c.name) == "derive") {
      sub->add_flag("--random", opt.random, "Sample a uniformly random genotype from the configured space");
    }
    subs.emplace_back(sub, &c);
  }
  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    for (const auto& [sub, c] : subs) {
      if (sub->parsed()) {
        err << "error: " << e.what() << "\n" << sub->help();
        return kExitUsage;
      }
    }
    err << "error: " << e.what() << "\n" << app.help();
    return kExitUsage;
  }
  for (const auto& [sub, c] : subs) {
    if (!sub->parsed()) continue;
    try {
      return c->run(opt, out);
    } catch (const std::exception& e) {
      err << "error: " << c->name << ": " << e.what() << "\n";
      return exit_code_for(e);
    }
  }
  return kExitUsage;
}

}  // namespace fnas
