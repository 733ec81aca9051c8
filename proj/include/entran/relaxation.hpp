#pragma once

#include "grad_check.hpp"
#include "ops.hpp"
#include "rng.hpp"
#include "search_space.hpp"

namespace entran {

struct TemperatureSchedule {
    double initial = 5.0;
    double decay = 0.923;  // multiplicative, applied once per epoch

    void validate() const {
        if (initial <= 0.0) throw std::invalid_argument("temperature schedule: initial must be positive");
        if (decay <= 0.0 || decay > 1.0) throw std::invalid_argument("temperature schedule: decay must be in (0,1]");
    }
};

inline double anneal(double tau, const TemperatureSchedule& schedule) {
    if (tau <= 0.0) throw std::invalid_argument("anneal: temperature must be positive");
    return tau * schedule.decay;
}

// Trainable architecture parameters for one cell kind. alpha is |E| x K,
// beta holds one logit per intermediate node (used in DST mode only).
struct ArchParams {
    ad::TensorPtr alpha;
    ad::TensorPtr beta;
    double tau = 5.0;

    static ArchParams init(const SearchSpace& space, Rng& rng, double tau0, double noise_scale = 1e-3) {
        ArchParams p;
        p.alpha = ad::make_tensor({int(space.edges.size()), space.K}, true);
        for (auto& v : p.alpha->data) v = noise_scale * rng.normal();
        p.beta = ad::make_tensor({space.n_intermediate()}, true);
        p.tau = tau0;
        return p;
    }
};

// Taped activations derived from ArchParams. p is always populated; the DST
// fields (p_hat, t, q, q_hat) only when the chain ran.
struct ConnectionActivations {
    std::vector<ad::TensorPtr> p;      // per edge, length K
    std::vector<ad::TensorPtr> p_hat;  // per edge
    std::vector<ad::TensorPtr> t;      // per intermediate node, scalar
    std::vector<ad::TensorPtr> q;      // per edge
    std::vector<ad::TensorPtr> q_hat;  // per edge; all-zero rows for inactive edges
    bool dst = false;
};

inline ad::TensorPtr softmax_temperature(ad::Tape& tape, const ad::TensorPtr& alpha_row, double tau) {
    return ad::softmax_t(tape, alpha_row, tau);
}

// Divide every activation entering node j by the node-wide maximum; the
// strongest connection maps to exactly 1. Rows must be ordered by edge index.
inline std::vector<ad::TensorPtr> connection_normalize(ad::Tape& tape, const std::vector<ad::TensorPtr>& p_rows) {
    if (p_rows.empty()) throw std::invalid_argument("connection_normalize: node has no incoming connections");
    auto m = ad::max_all(tape, ad::concat(tape, p_rows));
    std::vector<ad::TensorPtr> out;
    out.reserve(p_rows.size());
    for (const auto& row : p_rows) out.push_back(ad::div_scalar(tape, row, m));
    return out;
}

inline ad::TensorPtr node_threshold(ad::Tape& tape, const ad::TensorPtr& beta_j) {
    ad::detail::check_scalar("node_threshold", beta_j);
    return ad::sigmoid(tape, beta_j);
}

inline ad::TensorPtr prune(ad::Tape& tape, const ad::TensorPtr& p_hat_row, const ad::TensorPtr& t_j) {
    return ad::relu(tape, ad::sub_scalar(tape, p_hat_row, t_j));
}

// Renormalize surviving coefficients of one edge to sum to 1; edges whose q
// is all-zero stay all-zero and contribute nothing forward or backward.
inline ad::TensorPtr operation_normalize(ad::Tape& tape, const ad::TensorPtr& q_row) {
    double total = 0.0;
    for (double v : q_row->data) total += v;
    if (total > 0.0) return ad::div_scalar(tape, q_row, ad::sum(tape, q_row));
    return ad::zeros_like_shape(q_row->shape);
}

// lambda * mean(-log t) over intermediate nodes; its beta gradient is
// strictly negative for t in (0,1), pushing thresholds toward 1.
inline ad::TensorPtr sparsity_penalty(ad::Tape& tape, const std::vector<ad::TensorPtr>& thresholds, double lambda) {
    if (lambda < 0.0) throw std::invalid_argument("sparsity_penalty: lambda must be non-negative");
    if (thresholds.empty()) throw std::invalid_argument("sparsity_penalty: no thresholds");
    auto mean_log_t = ad::mean(tape, ad::log_op(tape, ad::concat(tape, thresholds)));
    return ad::scale_const(tape, mean_log_t, -lambda);
}

// Per-edge tempered softmax only (EnTranNAS / DARTS-baseline coefficients).
inline ConnectionActivations relaxed_activations(ad::Tape& tape, const ArchParams& arch, const SearchSpace& space,
                                                 double tau) {
    ConnectionActivations acts;
    acts.p.reserve(space.edges.size());
    for (std::size_t e = 0; e < space.edges.size(); ++e)
        acts.p.push_back(softmax_temperature(tape, ad::slice_row(tape, arch.alpha, int(e)), tau));
    return acts;
}

// Softmax -> connection normalization -> sigmoid thresholds -> ReLU pruning
// -> operation normalization. Fully taped; every intermediate node keeps at
// least one connection with q_hat > 0 because max p_hat = 1 > t.
inline ConnectionActivations full_dst_chain(ad::Tape& tape, const ArchParams& arch, const SearchSpace& space) {
    if (space.config.include_zero)
        throw std::invalid_argument("full_dst_chain: DST requires a search space without the zero operation");
    ConnectionActivations acts = relaxed_activations(tape, arch, space, arch.tau);
    acts.dst = true;
    acts.p_hat.resize(space.edges.size());
    acts.q.resize(space.edges.size());
    acts.q_hat.resize(space.edges.size());
    acts.t.reserve(std::size_t(space.n_intermediate()));
    for (int slot = 0; slot < space.n_intermediate(); ++slot) {
        const auto& in = space.in_edges[std::size_t(slot)];
        std::vector<ad::TensorPtr> node_p;
        node_p.reserve(in.size());
        for (int e : in) node_p.push_back(acts.p[std::size_t(e)]);
        auto normalized = connection_normalize(tape, node_p);
        auto t_j = node_threshold(tape, ad::index(tape, arch.beta, slot));
        acts.t.push_back(t_j);
        for (std::size_t i = 0; i < in.size(); ++i) {
            std::size_t e = std::size_t(in[i]);
            acts.p_hat[e] = normalized[i];
            acts.q[e] = prune(tape, acts.p_hat[e], t_j);
            acts.q_hat[e] = operation_normalize(tape, acts.q[e]);
        }
    }
    return acts;
}

}  // namespace entran
