#include "doctest.h"
#include "dot_grammar.hpp"
#include "fnas/errors.hpp"
#include "fnas/genotype.hpp"
#include "fnas/supernet.hpp"
#include "gradcheck.hpp"
#include "selection_oracle.hpp"

using namespace fnas;
using fnas::testing::random_tensor;

namespace {

SpaceConfig mini_space(std::size_t cell_types = 1) {
  SpaceConfig cfg;
  cfg.num_intermediate_nodes = 2;
  cfg.regular_ops = {RegularOpKind::sep_conv_3x3, RegularOpKind::skip_connect, RegularOpKind::none};
  cfg.activation_ops = {ActivationKind::relu, ActivationKind::selu};
  cfg.cell_types = cell_types;
  return cfg;
}

std::vector<Tensor> random_bank(const SpaceConfig& space, std::size_t cols, Rng& rng, double scale = 2.0) {
  std::vector<Tensor> out;
  for (std::size_t t = 0; t < space.cell_types; ++t) {
    out.push_back(random_tensor({space.edge_count(), cols}, rng, 0.0, scale, false));
  }
  return out;
}

std::size_t column(const std::vector<RegularOpKind>& ops, RegularOpKind k) {
  return static_cast<std::size_t>(std::find(ops.begin(), ops.end(), k) - ops.begin());
}

Genotype all_skip() {
  Genotype g;
  for (int t = 0; t < 2; ++t) {
    std::vector<Selection> cell;
    for (std::size_t j = 2; j < 6; ++j) {
      cell.push_back({j, 0, RegularOpKind::skip_connect, std::nullopt});
      cell.push_back({j, 1, RegularOpKind::skip_connect, std::nullopt});
    }
    g.cells.push_back(cell);
  }
  return g;
}

}  // namespace

TEST_CASE("strong skip-connect on the first node's edges") {
  SpaceConfig space;
  ArchParams arch(space, EdgeMode::mixed);
  const std::size_t skip = column(space.regular_ops, RegularOpKind::skip_connect);
  for (std::size_t e : {edge_index(0, 0), edge_index(0, 1)}) arch.alpha[0].mutable_data()[e * 8 + skip] = 10.0;
  auto g = derive_genotype(arch.alpha, arch.beta, space);
  REQUIRE(g.cells.size() == 2);
  CHECK(g.cells[0][0] == Selection{2, 0, RegularOpKind::skip_connect, std::nullopt});
  CHECK(g.cells[0][1] == Selection{2, 1, RegularOpKind::skip_connect, std::nullopt});
}

TEST_CASE("activation comes from the edge's β argmax") {
  SpaceConfig space;
  ArchParams arch(space, EdgeMode::mixed);
  const std::size_t e = edge_index(1, 2);
  arch.alpha[1].mutable_data()[e * 8 + 0] = 10.0;  // sep_conv_3x3
  arch.beta[1].mutable_data()[e * 9 + 7] = 10.0;   // selu
  auto g = derive_genotype(arch.alpha, arch.beta, space);
  bool found = false;
  for (const auto& s : g.cells[1]) {
    if (s.target == 3 && s.predecessor == 2) {
      found = true;
      CHECK(s.op == RegularOpKind::sep_conv_3x3);
      CHECK(s.activation == ActivationKind::selu);
    }
  }
  CHECK(found);
  // ties fall to the lowest index: all-zero logits pick sep_conv_3x3 @relu on (0,1)
  auto tied = derive_genotype(ArchParams(space, EdgeMode::mixed).alpha, ArchParams(space, EdgeMode::mixed).beta, space);
  CHECK(tied.cells[0][0] == Selection{2, 0, RegularOpKind::sep_conv_3x3, ActivationKind::relu});
  CHECK(tied.cells[0][1] == Selection{2, 1, RegularOpKind::sep_conv_3x3, ActivationKind::relu});
}

TEST_CASE("derived genotypes always validate and ignore per-row shifts") {
  SpaceConfig space;
  Rng rng(3);
  for (int draw = 0; draw < 200; ++draw) {
    auto alpha = random_bank(space, 8, rng);
    auto beta = random_bank(space, 9, rng);
    auto g = derive_genotype(alpha, beta, space);
    CHECK_NOTHROW(validate_genotype(g));
    for (const auto& cell : g.cells) CHECK(cell.size() == 8);
    for (auto& t : alpha) {
      auto d = t.mutable_data();
      for (std::size_t r = 0; r < t.dim(0); ++r) {
        const double c = rng.uniform(-5.0, 5.0);
        for (std::size_t j = 0; j < 8; ++j) d[r * 8 + j] += c;
      }
    }
    for (auto& t : beta) {
      for (auto& v : t.mutable_data()) v += 2.5;
    }
    CHECK(derive_genotype(alpha, beta, space) == g);
  }
}

TEST_CASE("greedy derivation equals exhaustive scoring on the mini space") {
  int draws = 0;
  for (std::size_t types : {1u, 2u}) {
    const auto space = mini_space(types);
    Rng rng(100 + types);
    for (int draw = 0; draw < 100; ++draw) {
      auto alpha = random_bank(space, 3, rng);
      auto beta = random_bank(space, 2, rng);
      CHECK(derive_genotype(alpha, beta, space) == fnas::testing::oracle_genotype(alpha, beta, space));
      ++draws;
    }
  }
  CHECK(draws >= 100);
}

TEST_CASE("single-activation space derives plain genotypes") {
  SpaceConfig space;
  space.activation_ops = {ActivationKind::relu};
  Rng rng(5);
  for (int draw = 0; draw < 20; ++draw) {
    auto g = derive_genotype(random_bank(space, 8, rng), random_bank(space, 1, rng), space);
    for (const auto& cell : g.cells) {
      for (const auto& s : cell) {
        if (s.activation) CHECK(*s.activation == ActivationKind::relu);
      }
    }
  }
}

TEST_CASE("fixed-activation derivation and transform") {
  SpaceConfig space;
  Rng rng(6);
  auto alpha = random_bank(space, 8, rng);
  auto g = derive_genotype(alpha, {}, space, ActivationKind::selu);
  for (const auto& cell : g.cells) {
    for (const auto& s : cell) CHECK((s.activation ? *s.activation == ActivationKind::selu : !is_parameterized(s.op)));
  }
  auto mixed = derive_genotype(alpha, random_bank(space, 9, rng), space);
  for (auto kind : {ActivationKind::relu, ActivationKind::selu}) {
    auto fixed = with_fixed_activation(mixed, kind);
    CHECK_NOTHROW(validate_genotype(fixed));
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t i = 0; i < fixed.cells[t].size(); ++i) {
        CHECK(fixed.cells[t][i].op == mixed.cells[t][i].op);
        CHECK(fixed.cells[t][i].activation.has_value() == mixed.cells[t][i].activation.has_value());
        if (fixed.cells[t][i].activation) CHECK(*fixed.cells[t][i].activation == kind);
      }
    }
  }
}

TEST_CASE("flat derivation reads super-operator columns") {
  SpaceConfig space;
  space.factorized = false;
  ArchParams arch(space, EdgeMode::flat);
  const std::size_t e = edge_index(0, 0);
  arch.flat[0].mutable_data()[e * 40 + 1 * 9 + 7] = 10.0;  // sep_conv_5x5 @selu
  auto g = derive_flat_genotype(arch.flat, space);
  CHECK(g.cells[0][0] == Selection{2, 0, RegularOpKind::sep_conv_5x5, ActivationKind::selu});
  Rng rng(7);
  for (int draw = 0; draw < 20; ++draw) CHECK_NOTHROW(validate_genotype(derive_flat_genotype(random_bank(space, 40, rng), space)));
}

TEST_CASE("bank shapes are checked") {
  SpaceConfig space;
  ArchParams arch(space, EdgeMode::mixed);
  CHECK_THROWS_AS(derive_genotype({arch.alpha[0]}, arch.beta, space), ConfigError);
  CHECK_THROWS_AS(derive_genotype(arch.alpha, {Tensor::zeros({14, 3}), Tensor::zeros({14, 3})}, space), ConfigError);
}

TEST_CASE("text round trip") {
  Rng rng(8);
  SpaceConfig space;
  for (int draw = 0; draw < 50; ++draw) {
    auto g = random_genotype(space, rng);
    CHECK(parse_genotype(serialize_genotype(g)) == g);
  }
  auto mini = random_genotype(mini_space(), rng);
  CHECK(parse_genotype(serialize_genotype(mini)) == mini);

  Rng a(9), b(9);
  CHECK(random_genotype(space, a) == random_genotype(space, b));
  auto text = serialize_genotype(random_genotype(space, a));
  CHECK(text.find("normal 2 <- ") == 0);
  CHECK(genotype_digest(parse_genotype(text)).size() == 16);
}

TEST_CASE("hand-written genotype parses and validates") {
  const std::string text = R"(# factorized search, normal and reduction cells
normal 2 <- 0 sep_conv_3x3 @selu
normal 2 <- 1 sep_conv_3x3 @swish
normal 3 <- 0 sep_conv_5x5 @relu
normal 3 <- 1 skip_connect
normal 4 <- 1 dil_conv_3x3 @elu
normal 4 <- 0 skip_connect
normal 5 <- 0 sep_conv_3x3 @leaky_relu
normal 5 <- 2 dil_conv_5x5 @selu
reduce 2 <- 0 max_pool_3x3
reduce 2 <- 1 sep_conv_5x5 @prelu
reduce 3 <- 2 skip_connect
reduce 3 <- 0 max_pool_3x3
reduce 4 <- 2 skip_connect
reduce 4 <- 1 avg_pool_3x3
reduce 5 <- 3 dil_conv_3x3 @celu
reduce 5 <- 2 skip_connect
)";
  auto g = parse_genotype(text);
  CHECK(g.cells.size() == 2);
  CHECK(g.nodes == 4);
  CHECK(g.cells[0][0].activation == ActivationKind::selu);
  CHECK(g.cells[1][1].activation == ActivationKind::prelu);
}

TEST_CASE("parse errors carry line numbers, invariants raise validation errors") {
  try {
    parse_genotype("normal 2 <- 0 skip_connect\nnormal 2 -> 1 skip_connect\n");
    FAIL("expected a ParseError");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 conv_9x9\n"), ParseError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 sep_conv_3x3 selu\n"), ParseError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 sep_conv_3x3 @tanh\n"), ParseError);
  CHECK_THROWS_AS(parse_genotype("widget 2 <- 0 skip_connect\n"), ParseError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 2 skip_connect\nnormal 2 <- 0 skip_connect\n"), ValidationError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 sep_conv_3x3\nnormal 2 <- 1 skip_connect\n"), ValidationError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 skip_connect @relu\nnormal 2 <- 1 skip_connect\n"), ValidationError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 none\nnormal 2 <- 1 skip_connect\n"), ValidationError);
  CHECK_THROWS_AS(parse_genotype("normal 2 <- 0 skip_connect\nnormal 2 <- 0 max_pool_3x3\n"), ValidationError);
  CHECK_THROWS_AS(parse_genotype("# nothing\n"), ValidationError);
}

TEST_CASE("DOT export") {
  auto g = all_skip();
  auto dot = export_dot(g);
  fnas::testing::DotAcceptor acceptor(dot);
  CHECK(acceptor.count_graphs() == 2);
  CHECK(acceptor.edges() == 2 * (8 + 4));
  CHECK(dot.find("digraph normal") != std::string::npos);
  CHECK(dot.find("digraph reduce") != std::string::npos);
  CHECK(export_dot(g) == dot);

  Rng rng(10);
  for (int draw = 0; draw < 20; ++draw) {
    auto r = random_genotype(SpaceConfig{}, rng);
    auto text = export_dot(r);
    fnas::testing::DotAcceptor acc(text);
    CHECK(acc.count_graphs() == 2);
    for (const auto& s : r.cells[0]) {
      if (s.activation) {
        const std::string label = std::string(regular_op_name(s.op)) + " " + std::string(activation_name(*s.activation));
        CHECK(text.find("label=\"" + label + "\"") != std::string::npos);
      }
    }
  }
  const std::string broken = "digraph x { a -> ; }";
  CHECK(fnas::testing::DotAcceptor(broken).count_graphs() == -1);
}
