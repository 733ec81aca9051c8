#pragma once

#include "cell.hpp"

namespace entran {

enum class Placement { first, last, half, all };
enum class Mode { entran, dst, darts_baseline };
enum class TransitCoeff { unit, qhat };

inline const char* placement_name(Placement p) {
    switch (p) {
        case Placement::first: return "first";
        case Placement::last: return "last";
        case Placement::half: return "half";
        case Placement::all: return "all";
    }
    throw std::logic_error("placement_name");
}

inline Placement placement_from_name(const std::string& s) {
    if (s == "first") return Placement::first;
    if (s == "last") return Placement::last;
    if (s == "half") return Placement::half;
    if (s == "all") return Placement::all;
    throw std::invalid_argument("unknown engine_placement: " + s + " (expected first/last/half/all)");
}

inline const char* mode_name(Mode m) {
    switch (m) {
        case Mode::entran: return "entran";
        case Mode::dst: return "dst";
        case Mode::darts_baseline: return "darts_baseline";
    }
    throw std::logic_error("mode_name");
}

inline Mode mode_from_name(const std::string& s) {
    if (s == "entran") return Mode::entran;
    if (s == "dst") return Mode::dst;
    if (s == "darts_baseline") return Mode::darts_baseline;
    throw std::invalid_argument("unknown mode: " + s + " (expected entran/dst/darts_baseline)");
}

inline const char* transit_coeff_name(TransitCoeff t) { return t == TransitCoeff::unit ? "unit" : "qhat"; }

inline TransitCoeff transit_coeff_from_name(const std::string& s) {
    if (s == "unit") return TransitCoeff::unit;
    if (s == "qhat") return TransitCoeff::qhat;
    throw std::invalid_argument("unknown transit_coeff: " + s + " (expected unit/qhat)");
}

struct SupernetConfig {
    int n_cells = 8;
    int init_channels = 16;
    int bottleneck_ratio = 4;
    Placement engine_placement = Placement::first;
    Mode mode = Mode::entran;
    bool feature_sharing = true;
    bool node_norm = true;  // RMS-normalize intermediate node outputs
    TransitCoeff transit_coeff = TransitCoeff::unit;

    void validate() const {
        if (n_cells < 1) throw std::invalid_argument("supernet needs n_cells >= 1");
        if (init_channels < 1) throw std::invalid_argument("supernet needs init_channels >= 1");
        if (bottleneck_ratio < 1) throw std::invalid_argument("bottleneck_ratio must be >= 1");
    }
};

struct CellSpec {
    enum class Role { engine, transit } role = Role::transit;
    enum class Kind { normal, reduction } kind = Kind::normal;
    int index = 0;
};

struct DataDims {
    int channels = 1;
    int height = 8;
    int width = 8;
    int classes = 4;
};

// Reduction cells sit at one and two thirds of the stack.
inline std::vector<int> reduction_positions(int n_cells) {
    if (n_cells < 3) return {};
    return {n_cells / 3, 2 * n_cells / 3};
}

inline std::vector<CellSpec> plan_cells(const SupernetConfig& cfg) {
    auto red = reduction_positions(cfg.n_cells);
    std::vector<CellSpec> specs(std::size_t(cfg.n_cells));
    for (int i = 0; i < cfg.n_cells; ++i) {
        specs[std::size_t(i)].index = i;
        bool is_red = std::find(red.begin(), red.end(), i) != red.end();
        specs[std::size_t(i)].kind = is_red ? CellSpec::Kind::reduction : CellSpec::Kind::normal;
    }
    for (auto kind : {CellSpec::Kind::normal, CellSpec::Kind::reduction}) {
        std::vector<int> of_kind;
        for (const auto& s : specs)
            if (s.kind == kind) of_kind.push_back(s.index);
        if (of_kind.empty()) continue;
        std::vector<int> engines;
        Placement p = cfg.mode == Mode::darts_baseline ? Placement::all : cfg.engine_placement;
        switch (p) {
            case Placement::first: engines = {of_kind.front()}; break;
            case Placement::last: engines = {of_kind.back()}; break;
            case Placement::half:
                engines.assign(of_kind.begin(), of_kind.begin() + std::max<std::size_t>(1, of_kind.size() / 2));
                break;
            case Placement::all: engines = of_kind; break;
        }
        for (int i : engines) specs[std::size_t(i)].role = CellSpec::Role::engine;
    }
    return specs;
}

// The macro network: stem convolution, a stack of Engine-/Transit-cells with
// architecture parameters shared per cell kind, global average pooling and a
// linear classifier.
class Supernet {
public:
    SearchSpace space;
    SupernetConfig config;
    DataDims dims;

    ad::TensorPtr stem_w;
    std::vector<CellSpec> specs;
    std::vector<CellWeights> cells;
    ad::TensorPtr fc_w, fc_b;
    ArchParams arch_normal, arch_reduction;

    Supernet(const SearchSpace& space_, const SupernetConfig& cfg, const DataDims& dims_, Rng& rng, double tau0)
        : space(space_), config(cfg), dims(dims_) {
        config.validate();
        if (config.mode == Mode::dst && space.config.include_zero)
            throw std::invalid_argument("mode=dst requires include_zero=false");
        if (config.init_channels % config.bottleneck_ratio != 0)
            throw std::invalid_argument("init_channels " + std::to_string(config.init_channels) +
                                        " not divisible by bottleneck_ratio " +
                                        std::to_string(config.bottleneck_ratio));
        specs = plan_cells(config);
        stem_w = detail::conv_kernel(config.init_channels, dims.channels, 3, 3, rng);

        int c_pp = config.init_channels, c_p = config.init_channels;
        int h_pp = dims.height, h_p = dims.height;
        int c_cur = config.init_channels;
        for (const auto& spec : specs) {
            bool red = spec.kind == CellSpec::Kind::reduction;
            if (red) c_cur *= 2;
            int pre0_stride = h_pp > h_p ? 2 : 1;
            cells.push_back(CellWeights::init(space, c_pp, c_p, c_cur, config.bottleneck_ratio, pre0_stride,
                                              config.feature_sharing, rng));
            int c_out = space.n_intermediate() * c_cur;
            int h_out = red ? (h_p - 1) / 2 + 1 : h_p;
            c_pp = c_p;
            c_p = c_out;
            h_pp = h_p;
            h_p = h_out;
        }
        fc_w = ad::make_tensor({c_p, dims.classes}, true);
        double s = 1.0 / std::sqrt(double(c_p));
        for (auto& v : fc_w->data) v = s * rng.normal();
        fc_b = ad::make_tensor({dims.classes}, true);

        double tn = config.mode == Mode::darts_baseline ? 1.0 : tau0;
        arch_normal = ArchParams::init(space, rng, tn);
        arch_reduction = ArchParams::init(space, rng, tn);
    }

    struct ForwardOptions {
        bool all_transit = false;                 // child-net inference: derived paths only
        const Genotype* genotype = nullptr;       // default: derive from current parameters
        std::optional<TransitCoeff> transit_coeff;  // default: config value
        ForwardCounters* counters = nullptr;
        // taped activations, exposed for loss terms that need them (sparsity penalty)
        ConnectionActivations* acts_normal_out = nullptr;
        ConnectionActivations* acts_reduction_out = nullptr;
    };

    const ArchParams& arch_for(CellSpec::Kind kind) const {
        return kind == CellSpec::Kind::normal ? arch_normal : arch_reduction;
    }
    ArchParams& arch_for(CellSpec::Kind kind) {
        return kind == CellSpec::Kind::normal ? arch_normal : arch_reduction;
    }

    ConnectionActivations activations_for(ad::Tape& tape, CellSpec::Kind kind) const {
        const ArchParams& a = arch_for(kind);
        switch (config.mode) {
            case Mode::darts_baseline: return relaxed_activations(tape, a, space, 1.0);
            case Mode::entran: return relaxed_activations(tape, a, space, a.tau);
            case Mode::dst: return full_dst_chain(tape, a, space);
        }
        throw std::logic_error("activations_for");
    }

    CellGenotype derive_cell(const ConnectionActivations& acts) const {
        return config.mode == Mode::dst ? derive_dst(acts, space) : derive_top2(acts, space);
    }

    // Discrete architecture from the current parameters (per-iteration rule).
    Genotype derive() const {
        ad::Tape scratch(false);
        auto n = activations_for(scratch, CellSpec::Kind::normal);
        auto r = activations_for(scratch, CellSpec::Kind::reduction);
        return {derive_cell(n), derive_cell(r)};
    }

    ad::TensorPtr forward(ad::Tape& tape, const ad::TensorPtr& batch) {
        return forward(tape, batch, ForwardOptions());
    }

    ad::TensorPtr forward(ad::Tape& tape, const ad::TensorPtr& batch, const ForwardOptions& opts) {
        if (batch->shape.size() != 4 || batch->shape[1] != dims.channels || batch->shape[2] != dims.height ||
            batch->shape[3] != dims.width)
            throw ad::ShapeError("stem expects (N," + std::to_string(dims.channels) + "," +
                                 std::to_string(dims.height) + "," + std::to_string(dims.width) + "), got " +
                                 ad::shape_str(batch->shape));
        TransitCoeff tc = opts.transit_coeff.value_or(config.transit_coeff);
        if (tc == TransitCoeff::qhat && config.mode != Mode::dst)
            throw std::invalid_argument("qhat transit coefficients are only defined in dst mode");

        bool any_engine = false;
        for (const auto& s : specs)
            if (!opts.all_transit && s.role == CellSpec::Role::engine) any_engine = true;
        bool need_acts = any_engine || tc == TransitCoeff::qhat || opts.genotype == nullptr ||
                         opts.acts_normal_out || opts.acts_reduction_out;

        std::optional<ConnectionActivations> acts_n, acts_r;
        if (need_acts) {
            acts_n = activations_for(tape, CellSpec::Kind::normal);
            acts_r = activations_for(tape, CellSpec::Kind::reduction);
            if (opts.acts_normal_out) *opts.acts_normal_out = *acts_n;
            if (opts.acts_reduction_out) *opts.acts_reduction_out = *acts_r;
        }
        Genotype derived;
        const Genotype* geno = opts.genotype;
        if (!geno) {
            derived = {derive_cell(*acts_n), derive_cell(*acts_r)};
            geno = &derived;
        }
        auto mask_n = std::make_shared<std::vector<std::vector<bool>>>(genotype_mask(geno->normal, space));
        auto mask_r = std::make_shared<std::vector<std::vector<bool>>>(genotype_mask(geno->reduction, space));

        ad::Conv2dAttrs stem_attrs;
        stem_attrs.pad_h = stem_attrs.pad_w = 1;
        auto stem = detail::counted_conv(tape, batch, stem_w, stem_attrs, opts.counters);
        ad::TensorPtr prev_prev = stem, prev = stem;
        for (std::size_t i = 0; i < cells.size(); ++i) {
            const auto& spec = specs[i];
            bool red = spec.kind == CellSpec::Kind::reduction;
            const auto& acts = red ? acts_r : acts_n;
            const auto& mask = red ? mask_r : mask_n;
            bool engine = !opts.all_transit && spec.role == CellSpec::Role::engine;
            CoeffFn coeffs;
            if (engine)
                coeffs = config.mode == Mode::dst ? engine_qhat_coeffs(tape, *acts) : engine_p_coeffs(tape, *acts);
            else if (tc == TransitCoeff::qhat)
                coeffs = transit_qhat_coeffs(tape, *acts, mask);
            else
                coeffs = transit_unit_coeffs(mask);
            auto out = cell_forward(tape, space, cells[i], red, prev_prev, prev, coeffs, opts.counters,
                                    config.node_norm);
            prev_prev = prev;
            prev = out;
        }
        auto pooled = ad::global_avg_pool(tape, prev);
        return ad::linear(tape, pooled, fc_w, fc_b);
    }

    std::vector<std::pair<std::string, ad::TensorPtr>> named_weights() const {
        std::vector<std::pair<std::string, ad::TensorPtr>> out;
        out.emplace_back("stem", stem_w);
        for (std::size_t i = 0; i < cells.size(); ++i)
            cells[i].append_tensors(out, "cell" + std::to_string(i), space);
        out.emplace_back("fc_w", fc_w);
        out.emplace_back("fc_b", fc_b);
        return out;
    }

    std::vector<std::pair<std::string, ad::TensorPtr>> named_arch_params() const {
        return {{"alpha_normal", arch_normal.alpha},
                {"beta_normal", arch_normal.beta},
                {"alpha_reduction", arch_reduction.alpha},
                {"beta_reduction", arch_reduction.beta}};
    }

    std::vector<ad::TensorPtr> weight_tensors() const {
        std::vector<ad::TensorPtr> out;
        for (auto& [name, t] : named_weights()) out.push_back(t);
        return out;
    }

    std::vector<ad::TensorPtr> arch_tensors(bool include_beta) const {
        std::vector<ad::TensorPtr> out = {arch_normal.alpha, arch_reduction.alpha};
        if (include_beta) {
            out.push_back(arch_normal.beta);
            out.push_back(arch_reduction.beta);
        }
        return out;
    }

    long parameter_count() const {
        long total = 0;
        for (auto& [name, t] : named_weights()) total += t->size();
        return total;
    }
};

}  // namespace entran
