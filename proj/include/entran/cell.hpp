#pragma once

#include <functional>
#include <optional>

#include "genotype.hpp"
#include "ops.hpp"
#include "relaxation.hpp"
#include "rng.hpp"
#include "search_space.hpp"

namespace entran {

struct ForwardCounters {
    long op_invocations = 0;  // candidate-op applications
    long macs = 0;            // multiply-accumulate estimate, convolutions only
};

// Trainable tensors for one candidate operation at a given channel width.
struct OpWeights {
    std::vector<ad::TensorPtr> tensors;
};

namespace detail {

inline ad::TensorPtr conv_kernel(int cout, int cin, int kh, int kw, Rng& rng) {
    auto w = ad::make_tensor({cout, cin, kh, kw}, true);
    double scale = 1.0 / std::sqrt(double(cin) * kh * kw);
    for (auto& v : w->data) v = scale * rng.normal();
    return w;
}

inline long conv_macs(const std::vector<int>& out_shape, int cin_per_group, int kh, int kw) {
    return ad::numel(out_shape) * long(cin_per_group) * kh * kw;
}

inline ad::TensorPtr counted_conv(ad::Tape& tape, const ad::TensorPtr& x, const ad::TensorPtr& w,
                                  const ad::Conv2dAttrs& a, ForwardCounters* counters) {
    auto y = ad::conv2d(tape, x, w, a);
    if (counters) counters->macs += conv_macs(y->shape, w->shape[1], w->shape[2], w->shape[3]);
    return y;
}

}  // namespace detail

inline OpWeights init_op_weights(Op op, int channels, Rng& rng) {
    OpWeights w;
    switch (op) {
        case Op::zero:
        case Op::identity:
        case Op::max_pool_3x3:
        case Op::avg_pool_3x3: break;
        case Op::sep_conv_3x3:
        case Op::dil_conv_3x3:
            w.tensors = {detail::conv_kernel(channels, 1, 3, 3, rng), detail::conv_kernel(channels, channels, 1, 1, rng)};
            break;
        case Op::sep_conv_5x5:
        case Op::dil_conv_5x5:
            w.tensors = {detail::conv_kernel(channels, 1, 5, 5, rng), detail::conv_kernel(channels, channels, 1, 1, rng)};
            break;
        case Op::conv_1x1: w.tensors = {detail::conv_kernel(channels, channels, 1, 1, rng)}; break;
        case Op::conv_3x3: w.tensors = {detail::conv_kernel(channels, channels, 3, 3, rng)}; break;
        case Op::conv_1x3_3x1:
            w.tensors = {detail::conv_kernel(channels, channels, 1, 3, rng), detail::conv_kernel(channels, channels, 3, 1, rng)};
            break;
        case Op::conv_1x5_5x1:
            w.tensors = {detail::conv_kernel(channels, channels, 1, 5, rng), detail::conv_kernel(channels, channels, 5, 1, rng)};
            break;
        case Op::conv_1x7_7x1:
            w.tensors = {detail::conv_kernel(channels, channels, 1, 7, rng), detail::conv_kernel(channels, channels, 7, 1, rng)};
            break;
    }
    return w;
}

// Applies one candidate operation. Every op maps C channels to C channels;
// stride 2 halves the spatial dims (used for reduction-cell edges whose
// source is a cell input).
inline ad::TensorPtr apply_op(ad::Tape& tape, Op op, const OpWeights& w, const ad::TensorPtr& x, int stride,
                              ForwardCounters* counters) {
    if (counters) ++counters->op_invocations;
    int channels = x->shape.size() == 4 ? x->shape[1] : 0;
    auto dw_attrs = [&](int pad, int dilation) {
        ad::Conv2dAttrs a;
        a.stride_h = a.stride_w = stride;
        a.pad_h = a.pad_w = pad;
        a.dilation = dilation;
        a.groups = channels;
        return a;
    };
    switch (op) {
        case Op::zero: {
            int oh = (x->shape[2] - 1) / stride + 1;
            int ow = (x->shape[3] - 1) / stride + 1;
            return ad::zeros_like_shape({x->shape[0], channels, oh, ow});
        }
        case Op::identity: return stride == 1 ? x : ad::subsample2(tape, x);
        case Op::max_pool_3x3: return ad::max_pool2d(tape, x, 3, stride, 1);
        case Op::avg_pool_3x3: return ad::avg_pool2d(tape, x, 3, stride, 1);
        case Op::sep_conv_3x3: {
            auto y = detail::counted_conv(tape, x, w.tensors[0], dw_attrs(1, 1), counters);
            return detail::counted_conv(tape, y, w.tensors[1], {}, counters);
        }
        case Op::sep_conv_5x5: {
            auto y = detail::counted_conv(tape, x, w.tensors[0], dw_attrs(2, 1), counters);
            return detail::counted_conv(tape, y, w.tensors[1], {}, counters);
        }
        case Op::dil_conv_3x3: {
            auto y = detail::counted_conv(tape, x, w.tensors[0], dw_attrs(2, 2), counters);
            return detail::counted_conv(tape, y, w.tensors[1], {}, counters);
        }
        case Op::dil_conv_5x5: {
            auto y = detail::counted_conv(tape, x, w.tensors[0], dw_attrs(4, 2), counters);
            return detail::counted_conv(tape, y, w.tensors[1], {}, counters);
        }
        case Op::conv_1x1: {
            ad::Conv2dAttrs a;
            a.stride_h = a.stride_w = stride;
            return detail::counted_conv(tape, x, w.tensors[0], a, counters);
        }
        case Op::conv_3x3: {
            ad::Conv2dAttrs a;
            a.stride_h = a.stride_w = stride;
            a.pad_h = a.pad_w = 1;
            return detail::counted_conv(tape, x, w.tensors[0], a, counters);
        }
        case Op::conv_1x3_3x1:
        case Op::conv_1x5_5x1:
        case Op::conv_1x7_7x1: {
            int k = op == Op::conv_1x3_3x1 ? 3 : op == Op::conv_1x5_5x1 ? 5 : 7;
            ad::Conv2dAttrs a1;
            a1.stride_w = stride;
            a1.pad_w = (k - 1) / 2;
            ad::Conv2dAttrs a2;
            a2.stride_h = stride;
            a2.pad_h = (k - 1) / 2;
            auto y = detail::counted_conv(tape, x, w.tensors[0], a1, counters);
            return detail::counted_conv(tape, y, w.tensors[1], a2, counters);
        }
    }
    throw std::logic_error("apply_op: unknown operation");
}

// All trainable tensors of one cell. Candidate-op bundles live at C/ratio
// channels; with feature sharing they are keyed by source node, otherwise by
// edge (the per-edge layout of the plain relaxed super-net).
struct CellWeights {
    int channels = 0;  // operating width C
    int ratio = 1;
    bool shared = true;
    ad::TensorPtr pre0, pre1;  // 1x1 projections of the two cell inputs to C
    int pre0_stride = 1;
    std::vector<ad::TensorPtr> reduce;    // per source node: C -> C/ratio
    std::vector<ad::TensorPtr> recover;   // per intermediate node: C/ratio -> C
    std::vector<std::vector<OpWeights>> op_w;  // [source-1][k] or [edge][k]

    static CellWeights init(const SearchSpace& space, int in0_channels, int in1_channels, int channels, int ratio,
                            int pre0_stride, bool shared, Rng& rng) {
        if (ratio < 1) throw std::invalid_argument("bottleneck ratio must be >= 1, got " + std::to_string(ratio));
        if (channels % ratio != 0)
            throw std::invalid_argument("cell channels " + std::to_string(channels) +
                                        " not divisible by bottleneck ratio " + std::to_string(ratio));
        CellWeights w;
        w.channels = channels;
        w.ratio = ratio;
        w.shared = shared;
        w.pre0_stride = pre0_stride;
        w.pre0 = detail::conv_kernel(channels, in0_channels, 1, 1, rng);
        w.pre1 = detail::conv_kernel(channels, in1_channels, 1, 1, rng);
        int inner = channels / ratio;
        int n = space.n_nodes();
        for (int src = 1; src <= n - 1; ++src) w.reduce.push_back(detail::conv_kernel(inner, channels, 1, 1, rng));
        for (int slot = 0; slot < space.n_intermediate(); ++slot)
            w.recover.push_back(detail::conv_kernel(channels, inner, 1, 1, rng));
        std::size_t bundles = shared ? std::size_t(n - 1) : space.edges.size();
        w.op_w.resize(bundles);
        for (auto& per_op : w.op_w) {
            per_op.reserve(std::size_t(space.K));
            for (Op op : space.ops) per_op.push_back(init_op_weights(op, inner, rng));
        }
        return w;
    }

    void append_tensors(std::vector<std::pair<std::string, ad::TensorPtr>>& out, const std::string& prefix,
                        const SearchSpace& space) const {
        out.emplace_back(prefix + "/pre0", pre0);
        out.emplace_back(prefix + "/pre1", pre1);
        for (std::size_t i = 0; i < reduce.size(); ++i)
            out.emplace_back(prefix + "/reduce" + std::to_string(i + 1), reduce[i]);
        for (std::size_t i = 0; i < recover.size(); ++i)
            out.emplace_back(prefix + "/recover" + std::to_string(i + 3), recover[i]);
        for (std::size_t b = 0; b < op_w.size(); ++b) {
            std::string bname = shared ? "/src" + std::to_string(b + 1)
                                       : "/edge" + std::to_string(space.edges[b].src) + "-" +
                                             std::to_string(space.edges[b].dst);
            for (std::size_t k = 0; k < op_w[b].size(); ++k)
                for (std::size_t t = 0; t < op_w[b][k].tensors.size(); ++t)
                    out.emplace_back(prefix + bname + "/" + op_name(space.ops[k]) + "/w" + std::to_string(t),
                                     op_w[b][k].tensors[t]);
        }
    }
};

// How one (edge, op) connection enters the node sum.
struct Coeff {
    enum Kind { skip, unit, weighted } kind = skip;
    ad::TensorPtr value;  // scalar, set when kind == weighted

    static Coeff make_skip() { return {}; }
    static Coeff make_unit() { return {unit, nullptr}; }
    static Coeff make_weighted(ad::TensorPtr v) { return {weighted, std::move(v)}; }
};

using CoeffFn = std::function<Coeff(int edge, int k)>;

// Shared DAG evaluation for Engine-cells, Transit-cells and plain relaxed
// cells; the coefficient callback decides which connections participate and
// with what weight. Features are computed at most once per (source, op) when
// sharing is on — once per (edge, op) otherwise — and only on demand, so
// skipped connections cost nothing and receive no gradient.
inline ad::TensorPtr cell_forward(ad::Tape& tape, const SearchSpace& space, const CellWeights& w, bool reduction_cell,
                                  const ad::TensorPtr& in0, const ad::TensorPtr& in1, const CoeffFn& coeff_of,
                                  ForwardCounters* counters = nullptr, bool node_norm = false) {
    int n = space.n_nodes();
    std::vector<ad::TensorPtr> node(std::size_t(n) + 1);
    {
        ad::Conv2dAttrs a0;
        a0.stride_h = a0.stride_w = w.pre0_stride;
        node[1] = detail::counted_conv(tape, in0, w.pre0, a0, counters);
        node[2] = detail::counted_conv(tape, in1, w.pre1, {}, counters);
    }
    if (node[1]->shape != node[2]->shape)
        throw ad::ShapeError("cell inputs disagree after preprocessing: " + ad::shape_str(node[1]->shape) + " vs " +
                             ad::shape_str(node[2]->shape));

    std::vector<ad::TensorPtr> reduced(std::size_t(n) + 1);
    auto reduced_source = [&](int src) {
        if (!reduced[std::size_t(src)])
            reduced[std::size_t(src)] =
                detail::counted_conv(tape, node[std::size_t(src)], w.reduce[std::size_t(src - 1)], {}, counters);
        return reduced[std::size_t(src)];
    };

    std::vector<std::vector<ad::TensorPtr>> cache(w.op_w.size(), std::vector<ad::TensorPtr>(std::size_t(space.K)));
    auto feature = [&](int e, int k) {
        int src = space.edges[std::size_t(e)].src;
        int stride = (reduction_cell && src <= 2) ? 2 : 1;
        std::size_t bundle = w.shared ? std::size_t(src - 1) : std::size_t(e);
        auto& slot = cache[bundle][std::size_t(k)];
        if (!slot)
            slot = apply_op(tape, space.ops[std::size_t(k)], w.op_w[bundle][std::size_t(k)], reduced_source(src),
                            stride, counters);
        return slot;
    };

    std::vector<ad::TensorPtr> intermediates;
    for (int j = 3; j <= n; ++j) {
        std::vector<ad::TensorPtr> terms;
        for (int e : space.in_edges[std::size_t(j - 3)])
            for (int k = 0; k < space.K; ++k) {
                Coeff c = coeff_of(e, k);
                if (c.kind == Coeff::skip) continue;
                auto feat = feature(e, k);
                terms.push_back(c.kind == Coeff::unit ? feat : ad::scale(tape, feat, c.value));
            }
        if (terms.empty())
            throw std::invalid_argument("cell node " + std::to_string(j) + " has no active connections");
        auto raw = terms.size() == 1 ? terms[0] : ad::add_n(tape, terms);
        auto recovered = detail::counted_conv(tape, raw, w.recover[std::size_t(j - 3)], {}, counters);
        node[std::size_t(j)] = node_norm ? ad::rms_norm(tape, recovered) : recovered;
        intermediates.push_back(node[std::size_t(j)]);
    }
    return intermediates.size() == 1 ? intermediates[0] : ad::concat_channels(tape, intermediates);
}

// Coefficient callbacks -------------------------------------------------------

// relaxed DAG: every connection weighted by p (Engine-cell outside DST mode)
inline CoeffFn engine_p_coeffs(ad::Tape& tape, const ConnectionActivations& acts) {
    return [&tape, &acts](int e, int k) {
        return Coeff::make_weighted(ad::index(tape, acts.p[std::size_t(e)], k));
    };
}

// DST Engine-cell: q_hat-weighted; zero coefficients are skipped outright so
// their paths contribute exactly zero forward and backward
inline CoeffFn engine_qhat_coeffs(ad::Tape& tape, const ConnectionActivations& acts) {
    return [&tape, &acts](int e, int k) {
        const auto& row = acts.q_hat[std::size_t(e)];
        if (row->data[std::size_t(k)] == 0.0) return Coeff::make_skip();
        return Coeff::make_weighted(ad::index(tape, row, k));
    };
}

// membership mask of a genotype, indexed [edge][k]
inline std::vector<std::vector<bool>> genotype_mask(const CellGenotype& g, const SearchSpace& space) {
    std::vector<std::vector<bool>> keep(space.edges.size(), std::vector<bool>(std::size_t(space.K), false));
    for (std::size_t slot = 0; slot < g.nodes.size(); ++slot)
        for (const auto& c : g.nodes[slot]) {
            int e = space.edge_index(c.src, int(slot) + 3);
            keep[std::size_t(e)][std::size_t(space.op_index(c.op))] = true;
        }
    return keep;
}

// Transit-cell, unit coefficients (the derived sub-graph summed as-is)
inline CoeffFn transit_unit_coeffs(std::shared_ptr<std::vector<std::vector<bool>>> mask) {
    return [mask](int e, int k) {
        return (*mask)[std::size_t(e)][std::size_t(k)] ? Coeff::make_unit() : Coeff::make_skip();
    };
}

// Transit-cell, q_hat coefficients (exactly mirrors the DST Engine-cell)
inline CoeffFn transit_qhat_coeffs(ad::Tape& tape, const ConnectionActivations& acts,
                                   std::shared_ptr<std::vector<std::vector<bool>>> mask) {
    return [&tape, &acts, mask](int e, int k) {
        if (!(*mask)[std::size_t(e)][std::size_t(k)]) return Coeff::make_skip();
        return Coeff::make_weighted(ad::index(tape, acts.q_hat[std::size_t(e)], k));
    };
}

}  // namespace entran
