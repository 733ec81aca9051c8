#pragma once

#include <algorithm>
#include <sstream>

#include "relaxation.hpp"
#include "search_space.hpp"

namespace entran {

// One derived connection: source node (1-based) plus the operation on it.
struct Connection {
    int src = 0;
    Op op = Op::zero;
    friend bool operator==(const Connection&, const Connection&) = default;
};

// Per intermediate node (slot 0 is node 3), the set of kept connections.
struct CellGenotype {
    std::vector<std::vector<Connection>> nodes;
    friend bool operator==(const CellGenotype&, const CellGenotype&) = default;

    int connection_count() const {
        int total = 0;
        for (const auto& s : nodes) total += int(s.size());
        return total;
    }

    std::vector<int> per_node_counts() const {
        std::vector<int> counts;
        counts.reserve(nodes.size());
        for (const auto& s : nodes) counts.push_back(int(s.size()));
        return counts;
    }
};

struct Genotype {
    CellGenotype normal;
    CellGenotype reduction;
    friend bool operator==(const Genotype&, const Genotype&) = default;
};

inline void validate_cell_genotype(const CellGenotype& g, const SearchSpace& space) {
    if (int(g.nodes.size()) != space.n_intermediate())
        throw std::invalid_argument("genotype has " + std::to_string(g.nodes.size()) + " nodes, space expects " +
                                    std::to_string(space.n_intermediate()));
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot) {
        int dst = int(slot) + 3;
        const auto& conns = g.nodes[slot];
        if (conns.empty())
            throw std::invalid_argument("genotype node " + std::to_string(dst) + " has no connections");
        for (std::size_t a = 0; a < conns.size(); ++a) {
            const auto& c = conns[a];
            if (c.src < 1 || c.src >= dst)
                throw std::invalid_argument("genotype node " + std::to_string(dst) + " references invalid source " +
                                            std::to_string(c.src));
            if (!space.has_op(c.op))
                throw std::invalid_argument(std::string("genotype uses operation ") + op_name(c.op) +
                                            " which is not in the search space");
            for (std::size_t b = a + 1; b < conns.size(); ++b)
                if (conns[b] == c)
                    throw std::invalid_argument("genotype node " + std::to_string(dst) + " has duplicate connection (" +
                                                std::to_string(c.src) + "," + op_name(c.op) + ")");
        }
    }
}

inline void validate_genotype(const Genotype& g, const SearchSpace& space) {
    validate_cell_genotype(g.normal, space);
    validate_cell_genotype(g.reduction, space);
}

// Hand-crafted rule: per intermediate node keep the two strongest (source,
// operation) entries of p, never the zero op. Ties break toward lower source,
// then lower op index.
inline CellGenotype derive_top2(const ConnectionActivations& acts, const SearchSpace& space) {
    CellGenotype g;
    g.nodes.resize(std::size_t(space.n_intermediate()));
    for (int slot = 0; slot < space.n_intermediate(); ++slot) {
        struct Cand {
            double score;
            int src;
            int k;
        };
        std::vector<Cand> cands;
        for (int e : space.in_edges[std::size_t(slot)]) {
            const auto& row = acts.p[std::size_t(e)];
            for (int k = 0; k < space.K; ++k) {
                if (space.ops[std::size_t(k)] == Op::zero) continue;
                cands.push_back({row->data[std::size_t(k)], space.edges[std::size_t(e)].src, k});
            }
        }
        std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.score != b.score) return a.score > b.score;
            if (a.src != b.src) return a.src < b.src;
            return a.k < b.k;
        });
        std::size_t keep = std::min<std::size_t>(2, cands.size());
        for (std::size_t i = 0; i < keep; ++i)
            g.nodes[std::size_t(slot)].push_back({cands[i].src, space.ops[std::size_t(cands[i].k)]});
        std::sort(g.nodes[std::size_t(slot)].begin(), g.nodes[std::size_t(slot)].end(),
                  [&](const Connection& a, const Connection& b) {
                      if (a.src != b.src) return a.src < b.src;
                      return space.op_index(a.op) < space.op_index(b.op);
                  });
    }
    return g;
}

// DST rule: keep every connection with a non-zero coefficient. The safety
// guarantee of the chain means every node keeps at least one.
inline CellGenotype derive_dst(const ConnectionActivations& acts, const SearchSpace& space) {
    if (!acts.dst) throw std::invalid_argument("derive_dst: activations were not produced by the DST chain");
    CellGenotype g;
    g.nodes.resize(std::size_t(space.n_intermediate()));
    for (int slot = 0; slot < space.n_intermediate(); ++slot)
        for (int e : space.in_edges[std::size_t(slot)]) {
            const auto& row = acts.q_hat[std::size_t(e)];
            for (int k = 0; k < space.K; ++k)
                if (row->data[std::size_t(k)] > 0.0)
                    g.nodes[std::size_t(slot)].push_back({space.edges[std::size_t(e)].src, space.ops[std::size_t(k)]});
        }
    return g;
}

// ---------------------------------------------------------------------------
// serialization
// ---------------------------------------------------------------------------

// Schema: {"normal": [[j, [[i, "op"], ...]], ...], "reduction": [...]}
inline nlohmann::json cell_genotype_to_json(const CellGenotype& g) {
    auto arr = nlohmann::json::array();
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot) {
        auto conns = nlohmann::json::array();
        for (const auto& c : g.nodes[slot]) conns.push_back({c.src, op_name(c.op)});
        arr.push_back({int(slot) + 3, conns});
    }
    return arr;
}

inline nlohmann::json genotype_to_json(const Genotype& g) {
    return {{"normal", cell_genotype_to_json(g.normal)}, {"reduction", cell_genotype_to_json(g.reduction)}};
}

inline CellGenotype cell_genotype_from_json(const nlohmann::json& j) {
    CellGenotype g;
    for (const auto& entry : j) {
        int node = entry.at(0).get<int>();
        if (node != int(g.nodes.size()) + 3)
            throw std::invalid_argument("genotype JSON nodes must be consecutive from 3, got " + std::to_string(node));
        std::vector<Connection> conns;
        for (const auto& c : entry.at(1)) conns.push_back({c.at(0).get<int>(), op_from_name(c.at(1).get<std::string>())});
        g.nodes.push_back(std::move(conns));
    }
    return g;
}

inline Genotype genotype_from_json(const nlohmann::json& j) {
    return {cell_genotype_from_json(j.at("normal")), cell_genotype_from_json(j.at("reduction"))};
}

// Deterministic DOT rendering; byte-identical for equal genotypes.
inline std::string export_dot(const CellGenotype& g, const std::string& kind) {
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot)
        if (g.nodes[slot].empty())
            throw std::invalid_argument("export_dot: node " + std::to_string(slot + 3) + " has no connections");
    auto node_name = [&](int i) -> std::string {
        if (i == 1) return "c_{k-2}";
        if (i == 2) return "c_{k-1}";
        return "n" + std::to_string(i - 2);
    };
    std::ostringstream os;
    os << "digraph " << kind << " {\n";
    os << "  rankdir=LR;\n";
    os << "  node [shape=box style=rounded];\n";
    os << "  \"c_{k-2}\" [shape=oval];\n";
    os << "  \"c_{k-1}\" [shape=oval];\n";
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot) os << "  \"n" << (slot + 1) << "\";\n";
    os << "  \"out\" [shape=oval];\n";
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot)
        for (const auto& c : g.nodes[slot])
            os << "  \"" << node_name(c.src) << "\" -> \"n" << (slot + 1) << "\" [label=\"" << op_name(c.op)
               << "\"];\n";
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot)
        os << "  \"n" << (slot + 1) << "\" -> \"out\";\n";
    os << "}\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// per-epoch history
// ---------------------------------------------------------------------------

struct HistoryEntry {
    int epoch = 0;
    Genotype genotype;
    std::vector<int> counts_normal;
    std::vector<int> counts_reduction;
};

struct DerivationHistory {
    std::vector<HistoryEntry> entries;

    void record(int epoch, const Genotype& g) {
        if (!entries.empty() && epoch <= entries.back().epoch)
            throw std::invalid_argument("history epochs must increase: got " + std::to_string(epoch) + " after " +
                                        std::to_string(entries.back().epoch));
        entries.push_back({epoch, g, g.normal.per_node_counts(), g.reduction.per_node_counts()});
    }

    std::size_t size() const { return entries.size(); }

    nlohmann::json to_json() const {
        auto arr = nlohmann::json::array();
        for (const auto& e : entries)
            arr.push_back({{"epoch", e.epoch},
                           {"genotype", genotype_to_json(e.genotype)},
                           {"counts_normal", e.counts_normal},
                           {"counts_reduction", e.counts_reduction}});
        return arr;
    }

    static DerivationHistory from_json(const nlohmann::json& j) {
        DerivationHistory h;
        for (const auto& e : j) {
            HistoryEntry he;
            he.epoch = e.at("epoch").get<int>();
            he.genotype = genotype_from_json(e.at("genotype"));
            he.counts_normal = e.at("counts_normal").get<std::vector<int>>();
            he.counts_reduction = e.at("counts_reduction").get<std::vector<int>>();
            h.entries.push_back(std::move(he));
        }
        return h;
    }
};

}  // namespace entran
