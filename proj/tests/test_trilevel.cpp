#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "fnas/errors.hpp"
#include "fnas/ops.hpp"
#include "fnas/trilevel_search.hpp"

using namespace fnas;

namespace {

Dataset tiny_data(std::size_t n = 48, std::uint64_t seed = 3) {
  SynthSpec spec;
  spec.classes = 4;
  spec.samples = n;
  spec.size = 8;
  spec.seed = seed;
  spec.difficulty = Difficulty::easy;
  return synth_generate(spec);
}

SupernetConfig tiny_net() {
  SupernetConfig net;
  net.num_classes = 4;
  net.channels = 2;
  net.cells = 3;
  net.stem_multiplier = 1;
  return net;
}

SearchConfig tiny_search(SearchMode mode = SearchMode::factorized) {
  SearchConfig cfg;
  cfg.epochs = 2;
  cfg.batch = 8;
  cfg.mode = mode;
  cfg.seed = 11;
  cfg.arch_lr = 0.05;
  return cfg;
}

std::vector<double> flat_values(const std::vector<Tensor>& ts) {
  std::vector<double> out;
  for (const auto& t : ts) out.insert(out.end(), t.data().begin(), t.data().end());
  return out;
}

struct Toy {
  Tensor w = Tensor::scalar(0.5, true);
  Tensor a = Tensor::scalar(0.2, true);
  Tensor b = Tensor::scalar(0.1, true);

  Tensor train() const {
    Tensor d = sub(sub(w, a), b);
    return mul(d, d);
  }
  Tensor val() const {
    Tensor d1 = sub(w, Tensor::scalar(1.0));
    Tensor d2 = sub(a, b);
    return add(mul(d1, d1), mul(d2, d2));
  }
  ParameterGroups groups() const { return {{w}, {a}, {b}}; }
};

}  // namespace

TEST_CASE("split sizes, balance and determinism") {
  std::vector<int> labels;
  for (int i = 0; i < 100; ++i) labels.push_back(i % 10);
  auto [tr, va] = split_indices(labels, 10, 0.5, 0.5, 4);
  CHECK(tr.size() == 50);
  CHECK(va.size() == 50);
  std::vector<int> count_tr(10, 0), count_va(10, 0);
  for (auto i : tr) count_tr[labels[i]]++;
  for (auto i : va) count_va[labels[i]]++;
  for (int c = 0; c < 10; ++c) {
    CHECK(count_tr[c] == 5);
    CHECK(count_va[c] == 5);
  }
  std::vector<bool> seen(100, false);
  for (auto i : tr) seen[i] = true;
  for (auto i : va) {
    CHECK_FALSE(seen[i]);
    seen[i] = true;
  }
  auto again = split_indices(labels, 10, 0.5, 0.5, 4);
  CHECK(again.first == tr);
  CHECK(again.second == va);
  CHECK(split_indices(labels, 10, 0.5, 0.5, 5).first != tr);

  std::vector<int> big;
  for (int i = 0; i < 1000; ++i) big.push_back(i % 10);
  auto [p, q] = split_indices(big, 10, 0.1, 0.025, 1);
  CHECK(p.size() == 100);
  CHECK(q.size() == 25);
}

TEST_CASE("split errors") {
  std::vector<int> labels{0, 1, 0, 1};
  CHECK_THROWS_AS(split_indices(labels, 2, 0.1, 0.5, 0), ConfigError);
  CHECK_THROWS_AS(split_indices(labels, 2, 0.7, 0.7, 0), ConfigError);
  CHECK_THROWS_AS(split_indices(labels, 2, 0.0, 0.5, 0), ConfigError);
  CHECK_THROWS_AS(split_indices({}, 2, 0.5, 0.5, 0), ConfigError);
}

TEST_CASE("toy step matches the hand computation exactly") {
  Toy toy;
  const double lr = 0.1;
  auto wo = Optimizer::sgd({toy.w}, lr);
  auto ao = Optimizer::sgd({toy.a}, lr);
  auto bo = Optimizer::sgd({toy.b}, lr);
  Versions v;
  trilevel_step([&] { return toy.train(); }, [&] { return toy.val(); }, {}, toy.groups(), wo, &ao, &bo,
                ArchUpdate::alpha_then_beta, 0.0, v);
  // hand step: ω uses (ω_t, α_t, β_t); α uses ω_{t+1}; β uses α_{t+1}
  const double w0 = 0.5, a0 = 0.2, b0 = 0.1;
  const double d0 = (w0 - a0) - b0;
  const double w1 = w0 - lr * (d0 + d0);
  const double e0 = a0 - b0;
  const double a1 = a0 - lr * (e0 + e0);
  const double e1 = a1 - b0;
  const double b1 = b0 - lr * -(e1 + e1);
  CHECK(toy.w.item() == w1);
  CHECK(toy.a.item() == a1);
  CHECK(toy.b.item() == b1);
  CHECK(v == Versions{1, 1, 1});
  CHECK(toy.w.requires_grad());
  CHECK(toy.b.requires_grad());
}

TEST_CASE("loss evaluation order and parameter versions") {
  Toy toy;
  auto wo = Optimizer::sgd({toy.w}, 0.1);
  auto ao = Optimizer::sgd({toy.a}, 0.1);
  auto bo = Optimizer::sgd({toy.b}, 0.1);
  Versions v{7, 7, 7};
  std::vector<LossEvent> events;
  trilevel_step([&] { return toy.train(); }, [&] { return toy.val(); }, {}, toy.groups(), wo, &ao, &bo,
                ArchUpdate::alpha_then_beta, 0.0, v, [&](const LossEvent& e) { events.push_back(e); });
  REQUIRE(events.size() == 3);
  CHECK(events[0].kind == LossKind::train);
  CHECK(events[1].kind == LossKind::val_alpha);
  CHECK(events[2].kind == LossKind::val_beta);
  CHECK(events[0].versions == Versions{7, 7, 7});
  CHECK(events[1].versions == Versions{8, 7, 7});
  CHECK(events[2].versions == Versions{8, 8, 7});
  CHECK(v == Versions{8, 8, 8});
}

TEST_CASE("each pass only differentiates its own group") {
  Toy toy;
  auto wo = Optimizer::sgd({toy.w}, 0.1);
  auto ao = Optimizer::sgd({toy.a}, 0.1);
  auto bo = Optimizer::sgd({toy.b}, 0.1);
  Versions v;
  std::vector<std::array<bool, 3>> flags;
  auto probe = [&](auto fn) {
    return [&, fn] {
      flags.push_back({toy.w.requires_grad(), toy.a.requires_grad(), toy.b.requires_grad()});
      return fn();
    };
  };
  trilevel_step(probe([&] { return toy.train(); }), probe([&] { return toy.val(); }), {}, toy.groups(), wo, &ao, &bo,
                ArchUpdate::alpha_then_beta, 0.0, v);
  REQUIRE(flags.size() == 3);
  CHECK(flags[0] == std::array<bool, 3>{true, false, false});
  CHECK(flags[1] == std::array<bool, 3>{false, true, false});
  CHECK(flags[2] == std::array<bool, 3>{false, false, true});
}

TEST_CASE("constant loss leaves parameters unchanged") {
  Toy toy;
  auto wo = Optimizer::sgd({toy.w}, 0.1, 0.9);
  auto ao = Optimizer::adam({toy.a}, 0.1);
  auto bo = Optimizer::adam({toy.b}, 0.1);
  Versions v;
  auto constant = [&] { return scale(add(add(toy.w, toy.a), toy.b), 0.0); };
  for (int i = 0; i < 3; ++i) {
    trilevel_step(constant, constant, {}, toy.groups(), wo, &ao, &bo, ArchUpdate::alpha_then_beta, 5.0, v);
  }
  CHECK(toy.w.item() == 0.5);
  CHECK(toy.a.item() == 0.2);
  CHECK(toy.b.item() == 0.1);
}

TEST_CASE("toy validation loss is non-increasing for small learning rates") {
  // α and β only pull toward each other, so ω must start below a sum α+β < 1
  const std::array<std::array<double, 3>, 3> starts{{{0.5, 0.6, 0.3}, {0.0, 0.1, 0.7}, {0.2, 0.45, 0.35}}};
  for (const auto& start : starts) for (double lr : {1e-2, 5e-3, 1e-3}) {
    Toy toy;
    toy.w.mutable_data()[0] = start[0];
    toy.a.mutable_data()[0] = start[1];
    toy.b.mutable_data()[0] = start[2];
    auto wo = Optimizer::sgd({toy.w}, lr);
    auto ao = Optimizer::sgd({toy.a}, lr);
    auto bo = Optimizer::sgd({toy.b}, lr);
    Versions v;
    double prev = toy.val().item();
    for (int s = 0; s < 100; ++s) {
      trilevel_step([&] { return toy.train(); }, [&] { return toy.val(); }, {}, toy.groups(), wo, &ao, &bo,
                    ArchUpdate::alpha_then_beta, 0.0, v);
      const double now = toy.val().item();
      CHECK(now <= prev);
      prev = now;
    }
  }
}

TEST_CASE("non-finite loss aborts") {
  Toy toy;
  auto wo = Optimizer::sgd({toy.w}, 0.1);
  Versions v;
  auto bad = [&] { return scale(toy.w, std::nan("")); };
  CHECK_THROWS_AS(trilevel_step(bad, bad, {}, toy.groups(), wo, nullptr, nullptr, ArchUpdate::none, 0.0, v),
                  NumericalError);
  CHECK(toy.w.requires_grad());
}

TEST_CASE("config validation happens before compute") {
  auto data = tiny_data();
  SearchConfig cfg = tiny_search();
  cfg.epochs = 0;
  CHECK_THROWS_AS(Search(cfg, tiny_net(), data), ConfigError);
  cfg = tiny_search(SearchMode::frozen_beta);
  CHECK_THROWS_AS(Search(cfg, tiny_net(), data), ConfigError);
  cfg = tiny_search();
  cfg.train_fraction = 0.8;
  CHECK_THROWS_AS(Search(cfg, tiny_net(), data), ConfigError);
  auto net = tiny_net();
  net.num_classes = 5;
  CHECK_THROWS_AS(Search(tiny_search(), net, data), ConfigError);
  CHECK_THROWS_AS(parse_search_mode("bogus"), ConfigError);
  CHECK(parse_search_mode("non-factorized") == SearchMode::non_factorized);
}

TEST_CASE("one-epoch smoke run") {
  auto data = tiny_data();
  SearchConfig cfg = tiny_search();
  cfg.epochs = 1;
  auto result = run_search(cfg, tiny_net(), data);
  REQUIRE(result.history.size() == 1);
  CHECK(result.history[0].epoch == 1);
  CHECK(std::isfinite(result.history[0].train_loss));
  CHECK(std::isfinite(result.history[0].val_loss));
  CHECK(result.history[0].genotype_digest == genotype_digest(result.genotype));
  CHECK_NOTHROW(validate_genotype(result.genotype));
}

TEST_CASE("same seed gives bitwise identical architecture") {
  auto data = tiny_data();
  auto a = run_search(tiny_search(), tiny_net(), data);
  auto b = run_search(tiny_search(), tiny_net(), data);
  CHECK(flat_values(a.arch.all()) == flat_values(b.arch.all()));
  CHECK(a.genotype == b.genotype);
  SearchConfig other = tiny_search();
  other.seed = 12;
  auto c = run_search(other, tiny_net(), data);
  CHECK(flat_values(a.arch.all()) != flat_values(c.arch.all()));
}

TEST_CASE("steps update α and β at the expected counts") {
  auto data = tiny_data();
  Search s(tiny_search(), tiny_net(), data);
  const auto before_alpha = flat_values(s.arch().alpha);
  const auto before_beta = flat_values(s.arch().beta);
  s.run_epoch();
  const std::uint64_t steps = s.steps_per_epoch();
  CHECK(steps == 3);
  CHECK(s.versions() == Versions{steps, steps, steps});
  CHECK(flat_values(s.arch().alpha) != before_alpha);
  CHECK(flat_values(s.arch().beta) != before_beta);
}

TEST_CASE("frozen β is reproduced exactly") {
  auto data = tiny_data();
  auto net = tiny_net();
  SearchConfig cfg = tiny_search(SearchMode::frozen_beta);
  ArchParams snapshot(net.space, EdgeMode::mixed);
  Rng rng(5);
  for (auto& t : snapshot.beta) {
    for (auto& v : t.mutable_data()) v = rng.normal();
  }
  cfg.frozen_beta = snapshot.beta;
  Search s(cfg, net, data);
  s.run();
  CHECK(flat_values(s.arch().beta) == flat_values(snapshot.beta));
  CHECK(s.versions().beta == 0);
  CHECK(s.versions().alpha == 2 * s.steps_per_epoch());
  auto g = s.genotype();
  CHECK_NOTHROW(validate_genotype(g));
  CHECK(g == derive_genotype(s.arch().alpha, snapshot.beta, net.space));
}

TEST_CASE("fixed-activation runs for every kind") {
  auto data = tiny_data(32);
  for (auto kind : kAllActivations) {
    SearchConfig cfg = tiny_search(SearchMode::fixed_activation);
    cfg.epochs = 1;
    cfg.fixed_activation = kind;
    Search s(cfg, tiny_net(), data);
    CHECK(s.arch().beta.empty());
    s.run();
    auto g = s.genotype();
    CHECK_NOTHROW(validate_genotype(g));
    for (const auto& cell : g.cells) {
      for (const auto& sel : cell) {
        if (sel.activation) CHECK(*sel.activation == kind);
      }
    }
  }
}

TEST_CASE("non-factorized search uses the flat pool") {
  auto data = tiny_data();
  Search s(tiny_search(SearchMode::non_factorized), tiny_net(), data);
  CHECK(s.arch().alpha.empty());
  REQUIRE(s.arch().flat.size() == 2);
  CHECK(s.arch().flat[0].dim(1) == 40);
  s.run();
  CHECK_NOTHROW(validate_genotype(s.genotype()));
  CHECK(s.history_csv().rfind("# mode=non-factorized super_operators=40\n", 0) == 0);
}

TEST_CASE("single-activation factorized search follows the fixed path bitwise") {
  auto data = tiny_data();
  auto net = tiny_net();
  net.space.activation_ops = {ActivationKind::relu};
  Search factorized(tiny_search(SearchMode::factorized), net, data);
  Search fixed(tiny_search(SearchMode::fixed_activation), net, data);
  factorized.run();
  fixed.run();
  CHECK(flat_values(factorized.arch().alpha) == flat_values(fixed.arch().alpha));
  CHECK(flat_values(factorized.network().parameters()) == flat_values(fixed.network().parameters()));
  CHECK(factorized.genotype() == fixed.genotype());
  for (std::size_t e = 0; e < factorized.history().size(); ++e) {
    CHECK(factorized.history()[e].train_loss == fixed.history()[e].train_loss);
    CHECK(factorized.history()[e].val_loss == fixed.history()[e].val_loss);
  }
}

TEST_CASE("warm-up epochs keep the architecture fixed") {
  auto data = tiny_data();
  SearchConfig cfg = tiny_search();
  cfg.warmup_epochs = 1;
  Search s(cfg, tiny_net(), data);
  const auto before = flat_values(s.arch().all());
  s.run_epoch();
  CHECK(flat_values(s.arch().all()) == before);
  CHECK(s.versions().alpha == 0);
  CHECK(std::isfinite(s.history()[0].val_loss));
  CHECK(s.history()[0].val_loss > 0.0);
  s.run_epoch();
  CHECK(flat_values(s.arch().all()) != before);
}

TEST_CASE("separate validation batches change the β pass") {
  auto data = tiny_data();
  SearchConfig cfg = tiny_search();
  cfg.epochs = 1;
  auto same = run_search(cfg, tiny_net(), data);
  cfg.same_val_batch = false;
  auto fresh = run_search(cfg, tiny_net(), data);
  CHECK(flat_values(same.arch.beta) != flat_values(fresh.arch.beta));
  CHECK_NOTHROW(validate_genotype(fresh.genotype));
}

TEST_CASE("checkpoint continuation is bitwise identical") {
  auto data = tiny_data();
  SearchConfig cfg = tiny_search();
  cfg.epochs = 3;
  Search straight(cfg, tiny_net(), data);
  straight.run();

  const auto path = (std::filesystem::temp_directory_path() / "fnas_test_trilevel.ckpt").string();
  std::filesystem::remove(path);
  {
    Search first(cfg, tiny_net(), data);
    first.run_epoch();
    save_checkpoint(first.checkpoint(), path);
  }
  Search resumed(cfg, tiny_net(), data);
  resumed.restore(load_checkpoint(path));
  CHECK(resumed.epoch() == 1);
  resumed.run();
  CHECK(flat_values(resumed.arch().all()) == flat_values(straight.arch().all()));
  CHECK(flat_values(resumed.network().parameters()) == flat_values(straight.network().parameters()));
  CHECK(resumed.history_csv() == straight.history_csv());
  CHECK(encode_checkpoint(resumed.checkpoint()) == encode_checkpoint(straight.checkpoint()));

  SearchConfig other = cfg;
  other.seed = 99;
  Search mismatched(other, tiny_net(), data);
  CHECK_THROWS_AS(mismatched.restore(load_checkpoint(path)), ConfigError);

  auto via_driver = run_search(cfg, tiny_net(), data, path);
  CHECK(flat_values(via_driver.arch.all()) == flat_values(straight.arch().all()));
  std::filesystem::remove(path);
}

TEST_CASE("history csv layout") {
  auto data = tiny_data();
  Search s(tiny_search(), tiny_net(), data);
  s.run();
  const auto csv = s.history_csv();
  CHECK(csv.rfind("# mode=factorized super_operators=40\n"
                  "epoch,train_loss,val_loss,alpha_entropy_mean,beta_entropy_mean,genotype_digest\n1,",
                  0) == 0);
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);
  CHECK(s.history()[1].alpha_entropy_mean < std::log(8.0));
}
