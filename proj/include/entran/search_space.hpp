#pragma once

#include <array>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace entran {

// Candidate operations in fixed declaration order; the first 8 form the
// standard space, all 13 the extended one. Alpha column indices follow this
// order, so it must never be reshuffled.
enum class Op {
    zero,
    sep_conv_3x3,
    sep_conv_5x5,
    dil_conv_3x3,
    dil_conv_5x5,
    max_pool_3x3,
    avg_pool_3x3,
    identity,
    conv_1x1,
    conv_3x3,
    conv_1x3_3x1,
    conv_1x5_5x1,
    conv_1x7_7x1,
};

inline constexpr std::array<Op, 13> kAllOps = {
    Op::zero,         Op::sep_conv_3x3, Op::sep_conv_5x5, Op::dil_conv_3x3, Op::dil_conv_5x5,
    Op::max_pool_3x3, Op::avg_pool_3x3, Op::identity,     Op::conv_1x1,     Op::conv_3x3,
    Op::conv_1x3_3x1, Op::conv_1x5_5x1, Op::conv_1x7_7x1,
};

inline const char* op_name(Op op) {
    switch (op) {
        case Op::zero: return "zero";
        case Op::sep_conv_3x3: return "sep_conv_3x3";
        case Op::sep_conv_5x5: return "sep_conv_5x5";
        case Op::dil_conv_3x3: return "dil_conv_3x3";
        case Op::dil_conv_5x5: return "dil_conv_5x5";
        case Op::max_pool_3x3: return "max_pool_3x3";
        case Op::avg_pool_3x3: return "avg_pool_3x3";
        case Op::identity: return "identity";
        case Op::conv_1x1: return "conv_1x1";
        case Op::conv_3x3: return "conv_3x3";
        case Op::conv_1x3_3x1: return "conv_1x3_3x1";
        case Op::conv_1x5_5x1: return "conv_1x5_5x1";
        case Op::conv_1x7_7x1: return "conv_1x7_7x1";
    }
    throw std::logic_error("op_name: unknown operation");
}

inline Op op_from_name(const std::string& name) {
    for (Op op : kAllOps)
        if (name == op_name(op)) return op;
    throw std::invalid_argument("unknown operation tag: " + name);
}

// Only convolutions carry trainable kernels.
inline bool op_parameterized(Op op) {
    switch (op) {
        case Op::zero:
        case Op::max_pool_3x3:
        case Op::avg_pool_3x3:
        case Op::identity: return false;
        default: return true;
    }
}

enum class OpSet { standard, extended, custom };

inline const char* op_set_name(OpSet s) {
    switch (s) {
        case OpSet::standard: return "standard";
        case OpSet::extended: return "extended";
        case OpSet::custom: return "custom";
    }
    throw std::logic_error("op_set_name: unknown op set");
}

inline OpSet op_set_from_name(const std::string& name) {
    if (name == "standard") return OpSet::standard;
    if (name == "extended") return OpSet::extended;
    if (name == "custom") return OpSet::custom;
    throw std::invalid_argument("unknown op_set: " + name + " (expected standard/extended/custom)");
}

struct SearchSpaceConfig {
    int n_nodes = 6;  // total nodes per cell; the first two are inputs
    OpSet op_set = OpSet::standard;
    bool include_zero = true;
    std::vector<Op> custom_ops;  // used only when op_set == custom
};

// 1-based node indices; dst >= 3 is always an intermediate node.
struct Edge {
    int src = 0;
    int dst = 0;
    friend bool operator==(const Edge&, const Edge&) = default;
};

inline std::vector<Op> op_catalog(const SearchSpaceConfig& cfg) {
    std::vector<Op> ops;
    switch (cfg.op_set) {
        case OpSet::standard: ops.assign(kAllOps.begin(), kAllOps.begin() + 8); break;
        case OpSet::extended: ops.assign(kAllOps.begin(), kAllOps.end()); break;
        case OpSet::custom: ops = cfg.custom_ops; break;
    }
    if (!cfg.include_zero)
        std::erase(ops, Op::zero);
    return ops;
}

// Sorted by (dst, src); the input-input pair (1,2) is never an edge.
inline std::vector<Edge> list_edges(const SearchSpaceConfig& cfg) {
    if (cfg.n_nodes < 3)
        throw std::invalid_argument("search space needs n_nodes >= 3, got " + std::to_string(cfg.n_nodes));
    std::vector<Edge> edges;
    for (int dst = 3; dst <= cfg.n_nodes; ++dst)
        for (int src = 1; src < dst; ++src) edges.push_back({src, dst});
    return edges;
}

struct WeightCountReport {
    long unshared = 0;  // |E| x K_bar with the paper-style |E| = C(n,2)
    long shared = 0;    // (n-1) x K_bar
};

inline WeightCountReport shared_weight_count(const SearchSpaceConfig& cfg) {
    long kbar = 0;
    for (Op op : op_catalog(cfg))
        if (op_parameterized(op)) ++kbar;
    long n = cfg.n_nodes;
    return {n * (n - 1) / 2 * kbar, (n - 1) * kbar};
}

// Validated, resolved view of a SearchSpaceConfig.
struct SearchSpace {
    SearchSpaceConfig config;
    std::vector<Edge> edges;
    std::vector<Op> ops;
    int K = 0;
    int K_bar = 0;
    std::vector<std::vector<int>> in_edges;  // per intermediate node, indices into edges

    int n_nodes() const { return config.n_nodes; }
    int n_intermediate() const { return config.n_nodes - 2; }

    // 0-based slot of intermediate node j (1-based node id, j >= 3)
    int node_slot(int j) const {
        if (j < 3 || j > config.n_nodes)
            throw std::out_of_range("node " + std::to_string(j) + " is not an intermediate node of a " +
                                    std::to_string(config.n_nodes) + "-node cell");
        return j - 3;
    }

    int edge_index(int src, int dst) const {
        for (std::size_t i = 0; i < edges.size(); ++i)
            if (edges[i].src == src && edges[i].dst == dst) return int(i);
        throw std::out_of_range("no edge (" + std::to_string(src) + "," + std::to_string(dst) + ") in this space");
    }

    int op_index(Op op) const {
        for (std::size_t k = 0; k < ops.size(); ++k)
            if (ops[k] == op) return int(k);
        throw std::out_of_range(std::string("operation ") + op_name(op) + " is not in this space");
    }

    bool has_op(Op op) const {
        for (Op o : ops)
            if (o == op) return true;
        return false;
    }

    static SearchSpace build(const SearchSpaceConfig& cfg) {
        SearchSpace s;
        s.config = cfg;
        s.edges = list_edges(cfg);
        s.ops = op_catalog(cfg);
        if (s.ops.empty()) throw std::invalid_argument("search space has an empty operation catalog");
        s.K = int(s.ops.size());
        for (Op op : s.ops)
            if (op_parameterized(op)) ++s.K_bar;
        s.in_edges.assign(std::size_t(cfg.n_nodes - 2), {});
        for (std::size_t e = 0; e < s.edges.size(); ++e) s.in_edges[std::size_t(s.edges[e].dst - 3)].push_back(int(e));
        return s;
    }
};

inline nlohmann::json search_space_to_json(const SearchSpaceConfig& cfg) {
    nlohmann::json j;
    j["n_nodes"] = cfg.n_nodes;
    j["op_set"] = op_set_name(cfg.op_set);
    j["include_zero"] = cfg.include_zero;
    if (cfg.op_set == OpSet::custom) {
        auto ops = nlohmann::json::array();
        for (Op op : cfg.custom_ops) ops.push_back(op_name(op));
        j["ops"] = ops;
    }
    auto edges = nlohmann::json::array();
    for (const Edge& e : list_edges(cfg)) edges.push_back({e.src, e.dst});
    j["edges"] = edges;
    return j;
}

inline SearchSpaceConfig search_space_from_json(const nlohmann::json& j) {
    SearchSpaceConfig cfg;
    cfg.n_nodes = j.at("n_nodes").get<int>();
    cfg.op_set = op_set_from_name(j.at("op_set").get<std::string>());
    cfg.include_zero = j.at("include_zero").get<bool>();
    if (j.contains("ops"))
        for (const auto& name : j.at("ops")) cfg.custom_ops.push_back(op_from_name(name.get<std::string>()));
    return cfg;
}

}  // namespace entran
