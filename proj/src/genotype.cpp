#include "fnas/genotype.hpp"

#include <algorithm>
#include <numeric>
#include <sstream>

#include "fnas/errors.hpp"
#include "fnas/ops.hpp"
#include "fnas/supernet.hpp"

namespace fnas {
namespace {

std::string node_where(std::size_t type, std::size_t target) {
  return std::string(cell_type_name(type)) + " node " + std::to_string(target);
}

// Lowest index among the maxima of values[i] for i in candidates.
std::size_t argmax_of(std::span<const double> values, const std::vector<std::size_t>& candidates) {
  std::size_t best = candidates.front();
  for (auto i : candidates) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

void check_bank(const std::vector<Tensor>& bank, const SpaceConfig& space, std::size_t cols, const char* what) {
  if (bank.size() != space.cell_types) {
    throw ConfigError(std::string(what) + ": expected " + std::to_string(space.cell_types) + " cell types, got " +
                      std::to_string(bank.size()));
  }
  for (const auto& t : bank) {
    if (t.rank() != 2 || t.dim(0) != space.edge_count() || t.dim(1) != cols) {
      throw ConfigError(std::string(what) + ": expected shape [" + std::to_string(space.edge_count()) + "," +
                        std::to_string(cols) + "], got " + shape_str(t.shape()));
    }
  }
}

struct EdgeChoice {
  double strength;
  std::size_t column;  // argmax column among non-none candidates
};

// Keeps the k strongest predecessors of each node; `choose` maps an edge row of
// softmax weights to its strength and chosen column.
template <typename Choose, typename Label>
std::vector<Selection> select_cell(const SpaceConfig& space, const Tensor& weights, Choose&& choose, Label&& label) {
  const std::size_t cols = weights.dim(1);
  std::vector<Selection> out;
  for (std::size_t j = 0; j < space.num_intermediate_nodes; ++j) {
    std::vector<std::pair<std::size_t, EdgeChoice>> edges;
    for (std::size_t i = 0; i < j + 2; ++i) {
      const std::size_t e = edge_index(j, i);
      edges.emplace_back(i, choose(weights.data().subspan(e * cols, cols), e));
    }
    std::stable_sort(edges.begin(), edges.end(),
                     [](const auto& a, const auto& b) { return a.second.strength > b.second.strength; });
    edges.resize(space.edges_selected_per_node);
    std::sort(edges.begin(), edges.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
    for (const auto& [pred, choice] : edges) {
      Selection s = label(choice.column, edge_index(j, pred));
      s.target = j + 2;
      s.predecessor = pred;
      out.push_back(s);
    }
  }
  return out;
}

Genotype empty_genotype(const SpaceConfig& space) {
  Genotype g;
  g.nodes = space.num_intermediate_nodes;
  g.edges_per_node = space.edges_selected_per_node;
  return g;
}

}  // namespace

void validate_genotype(const Genotype& g) {
  if (g.cells.empty() || g.cells.size() > 2) {
    throw ValidationError("genotype needs one or two cell types, got " + std::to_string(g.cells.size()));
  }
  if (g.nodes == 0 || g.edges_per_node == 0) throw ValidationError("genotype has no intermediate nodes");
  for (std::size_t t = 0; t < g.cells.size(); ++t) {
    std::vector<std::vector<std::size_t>> preds(g.nodes);
    for (const auto& s : g.cells[t]) {
      if (s.target < 2 || s.target >= g.nodes + 2) {
        throw ValidationError(node_where(t, s.target) + ": target outside 2.." + std::to_string(g.nodes + 1));
      }
      if (s.predecessor >= s.target) {
        throw ValidationError(node_where(t, s.target) + ": predecessor " + std::to_string(s.predecessor) +
                              (s.predecessor == s.target ? " is a self-loop" : " is not an earlier node"));
      }
      if (s.op == RegularOpKind::none) throw ValidationError(node_where(t, s.target) + ": 'none' cannot be selected");
      if (is_parameterized(s.op) != s.activation.has_value()) {
        throw ValidationError(node_where(t, s.target) + ": " + std::string(regular_op_name(s.op)) +
                              (s.activation ? " takes no activation" : " needs an activation"));
      }
      auto& p = preds[s.target - 2];
      if (std::find(p.begin(), p.end(), s.predecessor) != p.end()) {
        throw ValidationError(node_where(t, s.target) + ": predecessor " + std::to_string(s.predecessor) +
                              " selected twice");
      }
      p.push_back(s.predecessor);
    }
    for (std::size_t j = 0; j < g.nodes; ++j) {
      if (preds[j].size() != g.edges_per_node) {
        throw ValidationError(node_where(t, j + 2) + ": " + std::to_string(preds[j].size()) + " selections, expected " +
                              std::to_string(g.edges_per_node));
      }
    }
  }
}

Genotype derive_genotype(const std::vector<Tensor>& alpha, const std::vector<Tensor>& beta, const SpaceConfig& space,
                         ActivationKind fixed_activation) {
  space.validate();
  check_bank(alpha, space, space.regular_ops.size(), "alpha");
  if (!beta.empty()) check_bank(beta, space, space.activation_ops.size(), "beta");
  std::vector<std::size_t> real_ops, all_acts(space.activation_ops.size());
  for (std::size_t k = 0; k < space.regular_ops.size(); ++k) {
    if (space.regular_ops[k] != RegularOpKind::none) real_ops.push_back(k);
  }
  std::iota(all_acts.begin(), all_acts.end(), 0);

  Genotype g = empty_genotype(space);
  for (std::size_t t = 0; t < space.cell_types; ++t) {
    const Tensor w = softmax_rows(alpha[t].detach());
    const Tensor b = beta.empty() ? Tensor() : softmax_rows(beta[t].detach());
    auto choose = [&](std::span<const double> row, std::size_t) {
      const std::size_t k = argmax_of(row, real_ops);
      return EdgeChoice{row[k], k};
    };
    auto label = [&](std::size_t column, std::size_t e) {
      Selection s;
      s.op = space.regular_ops[column];
      if (is_parameterized(s.op)) {
        if (b.defined()) {
          const std::size_t na = space.activation_ops.size();
          s.activation = space.activation_ops[argmax_of(b.data().subspan(e * na, na), all_acts)];
        } else {
          s.activation = fixed_activation;
        }
      }
      return s;
    };
    g.cells.push_back(select_cell(space, w, choose, label));
  }
  validate_genotype(g);
  return g;
}

Genotype derive_flat_genotype(const std::vector<Tensor>& flat, const SpaceConfig& space) {
  space.validate();
  const auto pool = super_operators(space);
  check_bank(flat, space, pool.size(), "flat");
  std::vector<std::size_t> real;
  for (std::size_t k = 0; k < pool.size(); ++k) {
    if (pool[k].op != RegularOpKind::none) real.push_back(k);
  }
  Genotype g = empty_genotype(space);
  for (std::size_t t = 0; t < space.cell_types; ++t) {
    const Tensor w = softmax_rows(flat[t].detach());
    auto choose = [&](std::span<const double> row, std::size_t) {
      const std::size_t k = argmax_of(row, real);
      return EdgeChoice{row[k], k};
    };
    auto label = [&](std::size_t column, std::size_t) {
      Selection s;
      s.op = pool[column].op;
      s.activation = pool[column].activation;
      return s;
    };
    g.cells.push_back(select_cell(space, w, choose, label));
  }
  validate_genotype(g);
  return g;
}

Genotype with_fixed_activation(Genotype g, ActivationKind kind) {
  for (auto& cell : g.cells) {
    for (auto& s : cell) {
      if (s.activation) s.activation = kind;
    }
  }
  return g;
}

Genotype random_genotype(const SpaceConfig& space, Rng& rng) {
  space.validate();
  std::vector<Selection> labels;
  for (auto op : space.regular_ops) {
    if (op == RegularOpKind::none) continue;
    if (is_parameterized(op)) {
      for (auto act : space.activation_ops) labels.push_back({2, 0, op, act});
    } else {
      labels.push_back({2, 0, op, std::nullopt});
    }
  }
  Genotype g = empty_genotype(space);
  for (std::size_t t = 0; t < space.cell_types; ++t) {
    std::vector<Selection> cell;
    for (std::size_t j = 0; j < space.num_intermediate_nodes; ++j) {
      std::vector<std::size_t> preds(j + 2);
      std::iota(preds.begin(), preds.end(), 0);
      for (std::size_t i = 0; i < space.edges_selected_per_node; ++i) {
        std::swap(preds[i], preds[i + rng.below(preds.size() - i)]);
      }
      preds.resize(space.edges_selected_per_node);
      std::sort(preds.begin(), preds.end());
      for (auto p : preds) {
        Selection s = labels[rng.below(labels.size())];
        s.target = j + 2;
        s.predecessor = p;
        cell.push_back(s);
      }
    }
    g.cells.push_back(std::move(cell));
  }
  validate_genotype(g);
  return g;
}

std::string serialize_genotype(const Genotype& g) {
  std::ostringstream out;
  for (std::size_t t = 0; t < g.cells.size(); ++t) {
    for (const auto& s : g.cells[t]) {
      out << cell_type_name(t) << ' ' << s.target << " <- " << s.predecessor << ' ' << regular_op_name(s.op);
      if (s.activation) out << " @" << activation_name(*s.activation);
      out << '\n';
    }
  }
  return out.str();
}

Genotype parse_genotype(const std::string& text) {
  Genotype g;
  g.cells.clear();
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  std::vector<std::vector<Selection>> cells(2);
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::vector<std::string> tok;
    for (std::string w; ls >> w;) tok.push_back(w);
    if (tok.empty()) continue;
    if (tok.size() < 5 || tok.size() > 6 || tok[2] != "<-") {
      throw ParseError(line_no, "expected '<cell> <target> <- <predecessor> <op> [@activation]'");
    }
    std::size_t type;
    if (tok[0] == "normal") {
      type = 0;
    } else if (tok[0] == "reduce") {
      type = 1;
    } else {
      throw ParseError(line_no, "unknown cell type '" + tok[0] + "'");
    }
    auto number = [&](const std::string& s) {
      if (s.empty() || s.size() > 6 || !std::all_of(s.begin(), s.end(), [](char c) { return c >= '0' && c <= '9'; })) {
        throw ParseError(line_no, "expected a node index, got '" + s + "'");
      }
      return static_cast<std::size_t>(std::stoul(s));
    };
    Selection s;
    s.target = number(tok[1]);
    s.predecessor = number(tok[3]);
    auto op = find_regular_op(tok[4]);
    if (!op) throw ParseError(line_no, "unknown operator '" + tok[4] + "'");
    s.op = *op;
    if (tok.size() == 6) {
      if (tok[5].size() < 2 || tok[5][0] != '@') throw ParseError(line_no, "activation must be written '@name'");
      auto act = find_activation(std::string_view(tok[5]).substr(1));
      if (!act) throw ParseError(line_no, "unknown activation '" + tok[5].substr(1) + "'");
      s.activation = *act;
    }
    cells[type].push_back(s);
  }
  if (cells[0].empty()) throw ValidationError("genotype has no normal cell");
  g.cells.push_back(cells[0]);
  if (!cells[1].empty()) g.cells.push_back(cells[1]);
  std::size_t max_target = 1;
  for (const auto& cell : g.cells) {
    for (const auto& s : cell) max_target = std::max(max_target, s.target);
  }
  g.nodes = max_target - 1;
  g.edges_per_node = g.cells[0].size() / g.nodes;
  if (g.edges_per_node == 0) g.edges_per_node = 1;
  validate_genotype(g);
  return g;
}

std::string genotype_digest(const Genotype& g) { return digest_hex(serialize_genotype(g)); }

std::string export_dot(const Genotype& g) {
  validate_genotype(g);
  auto node_name = [](std::size_t n) -> std::string {
    if (n == 0) return "\"c_{k-2}\"";
    if (n == 1) return "\"c_{k-1}\"";
    return "\"" + std::to_string(n - 2) + "\"";
  };
  std::ostringstream out;
  for (std::size_t t = 0; t < g.cells.size(); ++t) {
    out << "digraph " << cell_type_name(t) << " {\n";
    out << "  rankdir=LR;\n";
    out << "  node [shape=box];\n";
    out << "  " << node_name(0) << ";\n  " << node_name(1) << ";\n";
    for (std::size_t j = 0; j < g.nodes; ++j) out << "  " << node_name(j + 2) << ";\n";
    out << "  \"c_{k}\";\n";
    for (const auto& s : g.cells[t]) {
      std::string label(regular_op_name(s.op));
      if (s.activation) label += " " + std::string(activation_name(*s.activation));
      out << "  " << node_name(s.predecessor) << " -> " << node_name(s.target) << " [label=\"" << label << "\"];\n";
    }
    for (std::size_t j = 0; j < g.nodes; ++j) out << "  " << node_name(j + 2) << " -> \"c_{k}\";\n";
    out << "}\n";
  }
  return out.str();
}

}  // namespace fnas
