#pragma once

#include <set>

#include "trainer.hpp"

namespace entran {

// ---------------------------------------------------------------------------
// consistency (super-net vs child-net)
// ---------------------------------------------------------------------------

struct ConsistencyReport {
    double supernet_acc = 0;
    double childnet_acc = 0;
    double drop = 0;  // supernet_acc - childnet_acc
    std::string placement;
};

// Inference through the derived paths only, reusing the super-net's weights.
inline double childnet_inference(Supernet& net, const Genotype& genotype, const Dataset& eval_set,
                                 TransitCoeff coeff) {
    validate_genotype(genotype, net.space);
    Supernet::ForwardOptions opts;
    opts.all_transit = true;
    opts.genotype = &genotype;
    opts.transit_coeff = coeff;
    return evaluate_accuracy(net, eval_set, opts);
}

// DST consistency is evaluated with q_hat coefficients on both sides, where
// search and evaluation graphs coincide exactly; the other modes use the
// unit-coefficient evaluation semantics of the derived architecture.
inline ConsistencyReport consistency_report(Supernet& net, const Dataset& eval_set) {
    TransitCoeff tc = net.config.mode == Mode::dst ? TransitCoeff::qhat : TransitCoeff::unit;
    Supernet::ForwardOptions super_opts;
    super_opts.transit_coeff = tc;
    ConsistencyReport rep;
    rep.placement = placement_name(net.config.mode == Mode::darts_baseline ? Placement::all
                                                                           : net.config.engine_placement);
    rep.supernet_acc = evaluate_accuracy(net, eval_set, super_opts);
    rep.childnet_acc = childnet_inference(net, net.derive(), eval_set, tc);
    rep.drop = rep.supernet_acc - rep.childnet_acc;
    return rep;
}

// ---------------------------------------------------------------------------
// Kendall rank correlation
// ---------------------------------------------------------------------------

struct RankPair {
    double proxy_score = 0;  // super-net accuracy
    double true_score = 0;   // retrained accuracy
};

namespace detail {

inline long count_inversions(std::vector<double>& v, std::vector<double>& scratch, std::size_t lo, std::size_t hi) {
    if (hi - lo < 2) return 0;
    std::size_t mid = lo + (hi - lo) / 2;
    long inv = count_inversions(v, scratch, lo, mid) + count_inversions(v, scratch, mid, hi);
    std::size_t a = lo, b = mid, o = lo;
    while (a < mid && b < hi) {
        if (v[a] <= v[b]) scratch[o++] = v[a++];
        else {
            inv += long(mid - a);
            scratch[o++] = v[b++];
        }
    }
    while (a < mid) scratch[o++] = v[a++];
    while (b < hi) scratch[o++] = v[b++];
    std::copy(scratch.begin() + std::ptrdiff_t(lo), scratch.begin() + std::ptrdiff_t(hi), v.begin() + std::ptrdiff_t(lo));
    return inv;
}

}  // namespace detail

// (concordant - discordant) / (m(m-1)/2), computed by inversion counting.
// Tied scores are rejected: perturb the scores or evaluate on more samples.
inline double kendall_tau(const std::vector<RankPair>& pairs) {
    std::size_t m = pairs.size();
    if (m < 2) throw std::invalid_argument("kendall_tau: need at least 2 pairs");
    for (auto sel : {0, 1}) {
        std::vector<double> v;
        v.reserve(m);
        for (const auto& p : pairs) v.push_back(sel == 0 ? p.proxy_score : p.true_score);
        std::sort(v.begin(), v.end());
        for (std::size_t i = 1; i < m; ++i)
            if (v[i] == v[i - 1])
                throw std::invalid_argument(std::string("kendall_tau: tied ") +
                                            (sel == 0 ? "proxy" : "true") +
                                            " scores; perturb the scores or evaluate on more samples");
    }
    std::vector<RankPair> sorted = pairs;
    std::sort(sorted.begin(), sorted.end(),
              [](const RankPair& a, const RankPair& b) { return a.proxy_score < b.proxy_score; });
    std::vector<double> trues;
    trues.reserve(m);
    for (const auto& p : sorted) trues.push_back(p.true_score);
    std::vector<double> scratch(m);
    long discordant = detail::count_inversions(trues, scratch, 0, m);
    long total = long(m) * long(m - 1) / 2;
    return double(total - 2 * discordant) / double(total);
}

// ---------------------------------------------------------------------------
// efficiency counters
// ---------------------------------------------------------------------------

struct EfficiencyRow {
    std::string setting;
    int engine_cells = 0;
    long op_invocations = 0;  // candidate-op applications per forward
    long params = 0;
    long macs = 0;
};

// The three components accumulate from top to bottom, starting from the plain
// relaxed super-net: engine/transit split, feature sharing, bottleneck.
inline std::vector<EfficiencyRow> efficiency_counters(const RunConfig& base, const Dataset& data, int batch_size = 2) {
    struct Setting {
        std::string name;
        Mode mode;
        Placement placement;
        bool sharing;
        int ratio;
    };
    std::vector<Setting> settings = {
        {"darts_baseline", Mode::darts_baseline, Placement::all, false, 1},
        {"+engine_transit", Mode::entran, Placement::first, false, 1},
        {"+feature_sharing", Mode::entran, Placement::first, true, 1},
        {"+bottleneck", Mode::entran, Placement::first, true, base.supernet.bottleneck_ratio},
    };
    std::vector<int> idx;
    for (int i = 0; i < std::min<int>(batch_size, int(data.size())); ++i) idx.push_back(i);
    Batch b = make_batch(data, idx);

    std::vector<EfficiencyRow> rows;
    for (const auto& s : settings) {
        RunConfig cfg = base;
        cfg.supernet.mode = s.mode;
        cfg.supernet.engine_placement = s.placement;
        cfg.supernet.feature_sharing = s.sharing;
        cfg.supernet.bottleneck_ratio = s.ratio;
        if (s.mode == Mode::dst) cfg.space.include_zero = false;
        SearchSpace space = SearchSpace::build(cfg.space);
        Rng rng = Rng::from(cfg.trainer.seed, 1);
        DataDims dims{data.channels, data.height, data.width, data.classes};
        Supernet net(space, cfg.supernet, dims, rng, cfg.trainer.temperature.initial);
        ForwardCounters counters;
        Supernet::ForwardOptions opts;
        opts.counters = &counters;
        ad::Tape tape(false);
        net.forward(tape, b.images, opts);
        EfficiencyRow row;
        row.setting = s.name;
        for (const auto& spec : net.specs)
            if (spec.role == CellSpec::Role::engine) ++row.engine_cells;
        row.op_invocations = counters.op_invocations;
        row.params = net.parameter_count();
        row.macs = counters.macs;
        rows.push_back(row);
    }
    return rows;
}

// ---------------------------------------------------------------------------
// retraining and the lambda sweep
// ---------------------------------------------------------------------------

// Fresh-weight training of the derived architecture: a transit-only stack of
// configurable depth, plain SGD with cosine decay. Returns held-out accuracy.
inline double retrain(const Genotype& genotype, const RunConfig& cfg, const Dataset& data, std::uint64_t seed) {
    SearchSpace space = SearchSpace::build(cfg.space);
    validate_genotype(genotype, space);
    SupernetConfig net_cfg = cfg.supernet;
    net_cfg.n_cells = cfg.retrain.n_cells;
    net_cfg.init_channels = cfg.retrain.init_channels;
    net_cfg.bottleneck_ratio = 1;  // derived nets run at full width
    net_cfg.mode = Mode::entran;
    net_cfg.feature_sharing = true;
    net_cfg.transit_coeff = TransitCoeff::unit;

    auto halves = split_dataset(data, seed);
    const Dataset& train = halves.first;
    const Dataset& test = halves.second;
    DataDims dims{data.channels, data.height, data.width, data.classes};
    Rng init_rng = Rng::from(seed, 11);
    Supernet net(space, net_cfg, dims, init_rng, 1.0);
    SgdMomentum opt(net.weight_tensors(), cfg.trainer.w_momentum, cfg.trainer.w_weight_decay);
    Rng batch_rng = Rng::from(seed, 12);

    Supernet::ForwardOptions opts;
    opts.all_transit = true;
    opts.genotype = &genotype;
    int bs = std::min<int>(cfg.trainer.batch_size, int(train.size()));
    for (int epoch = 0; epoch < cfg.retrain.epochs; ++epoch) {
        double lr = cosine_lr(cfg.trainer.w_lr, epoch, cfg.retrain.epochs);
        std::vector<int> order(train.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = int(i);
        deterministic_shuffle(order, batch_rng);
        int steps = std::max(1, int(train.size()) / bs);
        for (int s = 0; s < steps; ++s) {
            std::vector<int> ids(order.begin() + std::ptrdiff_t(s * bs), order.begin() + std::ptrdiff_t((s + 1) * bs));
            Batch batch = make_batch(train, ids);
            zero_grads(opt.params());
            ad::Tape tape;
            auto loss = ad::cross_entropy(tape, net.forward(tape, batch.images, opts), batch.labels);
            if (!std::isfinite(loss->item())) throw std::runtime_error("non-finite retrain loss");
            tape.backward(loss);
            clip_grad_norm(opt.params(), cfg.trainer.grad_clip);
            opt.step(lr);
        }
    }
    return evaluate_accuracy(net, test, opts);
}

// Parameter count of the derived architecture at retrain dimensions.
inline long derived_parameter_count(const Genotype& genotype, const RunConfig& cfg, const DataDims& dims) {
    SearchSpace space = SearchSpace::build(cfg.space);
    SupernetConfig net_cfg = cfg.supernet;
    net_cfg.n_cells = cfg.retrain.n_cells;
    net_cfg.init_channels = cfg.retrain.init_channels;
    net_cfg.bottleneck_ratio = 1;
    net_cfg.mode = Mode::entran;
    net_cfg.feature_sharing = true;
    Rng rng = Rng::from(0, 0);
    Supernet net(space, net_cfg, dims, rng, 1.0);
    long total = net.stem_w->size() + net.fc_w->size() + net.fc_b->size();
    for (std::size_t i = 0; i < net.cells.size(); ++i) {
        const auto& cw = net.cells[i];
        const CellGenotype& cg =
            net.specs[i].kind == CellSpec::Kind::reduction ? genotype.reduction : genotype.normal;
        total += cw.pre0->size() + cw.pre1->size();
        std::set<int> sources;
        std::set<std::pair<int, int>> used;
        for (std::size_t slot = 0; slot < cg.nodes.size(); ++slot)
            for (const auto& c : cg.nodes[slot]) {
                sources.insert(c.src);
                used.insert({c.src, space.op_index(c.op)});
            }
        for (int s : sources) total += cw.reduce[std::size_t(s - 1)]->size();
        for (const auto& r : cw.recover) total += r->size();
        for (const auto& [s, k] : used)
            for (const auto& t : cw.op_w[std::size_t(s - 1)][std::size_t(k)].tensors) total += t->size();
    }
    return total;
}

struct LambdaSweepRow {
    double lambda = 0;
    double mean_edges_normal = 0;
    double mean_edges_reduction = 0;
    double mean_params = 0;
};

// Runs one search per (lambda, seed) and reports per-lambda means of the
// kept-connection counts and the derived parameter count.
inline std::vector<LambdaSweepRow> lambda_sweep(const RunConfig& base, const std::vector<double>& lambdas,
                                                const std::vector<std::uint64_t>& seeds, const Dataset& data) {
    if (base.supernet.mode != Mode::dst)
        throw std::invalid_argument("lambda_sweep requires mode=dst");
    std::vector<LambdaSweepRow> rows;
    DataDims dims{data.channels, data.height, data.width, data.classes};
    for (double lambda : lambdas) {
        LambdaSweepRow row;
        row.lambda = lambda;
        for (std::uint64_t seed : seeds) {
            RunConfig cfg = base;
            cfg.trainer.lambda = lambda;
            cfg.trainer.seed = seed;
            SearchResult res = run_search(cfg, data);
            row.mean_edges_normal += res.genotype.normal.connection_count();
            row.mean_edges_reduction += res.genotype.reduction.connection_count();
            row.mean_params += double(derived_parameter_count(res.genotype, cfg, dims));
        }
        row.mean_edges_normal /= double(seeds.size());
        row.mean_edges_reduction /= double(seeds.size());
        row.mean_params /= double(seeds.size());
        rows.push_back(row);
    }
    return rows;
}

}  // namespace entran
