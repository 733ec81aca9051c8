#include <catch2/catch.hpp>
#include <entran/supernet.hpp>

using namespace entran;

namespace {

SearchSpace standard_space(int n_nodes) {
    SearchSpaceConfig cfg;
    cfg.n_nodes = n_nodes;
    return SearchSpace::build(cfg);
}

SearchSpace tiny_dst_space() {
    SearchSpaceConfig cfg;
    cfg.n_nodes = 4;
    cfg.op_set = OpSet::custom;
    cfg.include_zero = false;
    cfg.custom_ops = {Op::sep_conv_3x3, Op::max_pool_3x3, Op::identity};
    return SearchSpace::build(cfg);
}

ad::TensorPtr ones_batch(int n, int c, int h, int w, double v = 1.0) {
    auto t = ad::make_tensor({n, c, h, w});
    std::fill(t->data.begin(), t->data.end(), v);
    return t;
}

void set_identity_1x1(const ad::TensorPtr& kernel) {
    // square 1x1 conv becomes a channel-wise identity
    int cout = kernel->shape[0], cin = kernel->shape[1];
    REQUIRE(cout == cin);
    std::fill(kernel->data.begin(), kernel->data.end(), 0.0);
    for (int c = 0; c < cout; ++c) kernel->data[std::size_t(c) * cin + c] = 1.0;
}

}  // namespace

TEST_CASE("feature sharing computes each (source, op) once: 40 vs 112 invocations") {
    auto space = standard_space(6);
    for (bool sharing : {true, false}) {
        SupernetConfig cfg;
        cfg.n_cells = 1;
        cfg.init_channels = 8;
        cfg.bottleneck_ratio = 4;
        cfg.mode = Mode::entran;
        cfg.engine_placement = Placement::all;
        cfg.feature_sharing = sharing;
        Rng rng = Rng::from(1, 1);
        Supernet net(space, cfg, {1, 8, 8, 4}, rng, 5.0);
        ForwardCounters counters;
        Supernet::ForwardOptions opts;
        opts.counters = &counters;
        ad::Tape t(false);
        net.forward(t, ones_batch(2, 1, 8, 8), opts);
        CHECK(counters.op_invocations == (sharing ? 40 : 112));
    }
}

TEST_CASE("two consumers of the same (source, op) reuse one feature tensor") {
    // apply_op(identity, stride 1) hands back the node tensor itself, so a
    // cache hit is observable as pointer identity
    ad::Tape t;
    auto x = ones_batch(1, 2, 4, 4);
    OpWeights none;
    auto f = apply_op(t, Op::identity, none, x, 1, nullptr);
    CHECK(f == x);
}

TEST_CASE("bottleneck runs candidate ops at C/ratio channels") {
    auto space = tiny_dst_space();
    Rng rng = Rng::from(2, 1);
    auto w = CellWeights::init(space, 16, 16, 16, 4, 1, true, rng);
    CHECK(w.reduce[0]->shape == std::vector<int>{4, 16, 1, 1});
    CHECK(w.recover[0]->shape == std::vector<int>{16, 4, 1, 1});
    // sep conv depthwise kernel is sized for the reduced width
    CHECK(w.op_w[0][0].tensors[0]->shape == std::vector<int>{4, 1, 3, 3});

    SECTION("ratio 1 keeps full width but still applies the two 1x1 maps") {
        auto w1 = CellWeights::init(space, 16, 16, 16, 1, 1, true, rng);
        CHECK(w1.reduce[0]->shape == std::vector<int>{16, 16, 1, 1});
        CHECK(w1.recover[0]->shape == std::vector<int>{16, 16, 1, 1});
    }
    SECTION("indivisible channel count is rejected at construction") {
        CHECK_THROWS_WITH(CellWeights::init(space, 6, 6, 6, 4, 1, true, rng), Catch::Contains("divisible"));
    }
}

TEST_CASE("uniform coefficients with identity-like pipeline sum the incoming nodes") {
    // ratio 1, reduce/recover/preprocess forced to channel identities, only
    // the identity op active with coefficient 1: node j equals the sum of all
    // its source nodes, so intermediate node values count their in-edges.
    SearchSpaceConfig sc;
    sc.n_nodes = 4;
    sc.op_set = OpSet::custom;
    sc.custom_ops = {Op::identity};
    auto space = SearchSpace::build(sc);
    Rng rng = Rng::from(3, 1);
    auto w = CellWeights::init(space, 2, 2, 2, 1, 1, true, rng);
    set_identity_1x1(w.pre0);
    set_identity_1x1(w.pre1);
    for (auto& k : w.reduce) set_identity_1x1(k);
    for (auto& k : w.recover) set_identity_1x1(k);
    ad::Tape t;
    auto in = ones_batch(1, 2, 4, 4);
    auto unit = [](int, int) { return Coeff::make_unit(); };
    auto out = cell_forward(t, space, w, false, in, in, unit, nullptr, false);
    REQUIRE(out->shape == std::vector<int>{1, 4, 4, 4});
    // node 3 = in + in = 2; node 4 = in + in + node3 = 4
    for (int i = 0; i < 2 * 16; ++i) CHECK(out->data[std::size_t(i)] == Approx(2.0));
    for (int i = 2 * 16; i < 4 * 16; ++i) CHECK(out->data[std::size_t(i)] == Approx(4.0));
}

TEST_CASE("engine cell with one-hot q_hat equals the derived transit cell exactly") {
    auto space = tiny_dst_space();
    SupernetConfig cfg;
    cfg.n_cells = 2;
    cfg.init_channels = 8;
    cfg.bottleneck_ratio = 2;
    cfg.mode = Mode::dst;
    cfg.engine_placement = Placement::all;
    Rng rng = Rng::from(5, 1);
    Supernet net(space, cfg, {1, 6, 6, 3}, rng, 0.7);
    // push node 3 to a single dominant connection, keep thresholds high
    for (ArchParams* arch : {&net.arch_normal, &net.arch_reduction}) {
        for (auto& v : arch->alpha->data) v = 0.0;
        arch->alpha->data[0] = 12.0;
        for (auto& v : arch->beta->data) v = 5.0;
    }
    auto batch = ones_batch(2, 1, 6, 6, 0.3);
    ad::Tape t1(false), t2(false);
    auto engine = net.forward(t1, batch);
    Genotype g = net.derive();
    Supernet::ForwardOptions opts;
    opts.all_transit = true;
    opts.genotype = &g;
    opts.transit_coeff = TransitCoeff::qhat;
    auto transit = net.forward(t2, batch, opts);
    REQUIRE(engine->data.size() == transit->data.size());
    for (std::size_t i = 0; i < engine->data.size(); ++i) CHECK(engine->data[i] == transit->data[i]);
}

TEST_CASE("converged one-hot p makes the engine cell equal the top-2 transit cell") {
    // with two in-edges per node (n = 3) and per-edge one-hot softmax, the
    // relaxed sum degenerates to the derived two-connection sub-graph
    SearchSpaceConfig sc;
    sc.n_nodes = 3;
    sc.op_set = OpSet::custom;
    sc.custom_ops = {Op::sep_conv_3x3, Op::max_pool_3x3, Op::identity};
    auto space = SearchSpace::build(sc);
    SupernetConfig cfg;
    cfg.n_cells = 1;
    cfg.init_channels = 8;
    cfg.bottleneck_ratio = 2;
    cfg.mode = Mode::entran;
    cfg.engine_placement = Placement::all;
    Rng rng = Rng::from(19, 1);
    Supernet net(space, cfg, {1, 6, 6, 3}, rng, 0.1);
    for (ArchParams* arch : {&net.arch_normal, &net.arch_reduction}) {
        for (auto& v : arch->alpha->data) v = 0.0;
        arch->alpha->data[0] = 400.0;                          // (1,3) -> sep conv
        arch->alpha->data[std::size_t(space.K) + 2] = 400.0;   // (2,3) -> identity
    }
    auto batch = ones_batch(2, 1, 6, 6, 0.3);
    ad::Tape t1(false), t2(false);
    auto engine = net.forward(t1, batch);
    Genotype g = net.derive();
    REQUIRE(g.normal.nodes[0] == std::vector<Connection>{{1, Op::sep_conv_3x3}, {2, Op::identity}});
    Supernet::ForwardOptions opts;
    opts.all_transit = true;
    opts.genotype = &g;
    auto transit = net.forward(t2, batch, opts);
    for (std::size_t i = 0; i < engine->data.size(); ++i)
        CHECK(engine->data[i] == Approx(transit->data[i]).margin(1e-12));
}

TEST_CASE("connections with zero q_hat receive exactly zero weight gradient") {
    SearchSpaceConfig spc;
    spc.n_nodes = 4;
    spc.op_set = OpSet::custom;
    spc.include_zero = false;
    spc.custom_ops = {Op::sep_conv_3x3, Op::conv_1x1, Op::identity};  // two parameterized ops
    auto space = SearchSpace::build(spc);
    SupernetConfig cfg;
    cfg.n_cells = 1;
    cfg.init_channels = 4;
    cfg.bottleneck_ratio = 2;
    cfg.mode = Mode::dst;
    cfg.engine_placement = Placement::all;
    cfg.feature_sharing = false;  // per-edge bundles make the check connection-local
    Rng rng = Rng::from(6, 1);
    Supernet net(space, cfg, {1, 6, 6, 3}, rng, 0.5);
    // dominant op 0 on every edge, high thresholds: only op 0 survives anywhere
    for (ArchParams* arch : {&net.arch_normal, &net.arch_reduction}) {
        for (std::size_t e = 0; e < space.edges.size(); ++e)
            for (int k = 0; k < space.K; ++k)
                arch->alpha->data[e * std::size_t(space.K) + std::size_t(k)] = k == 0 ? 8.0 : 0.0;
        for (auto& v : arch->beta->data) v = 4.0;
    }
    for (auto& [name, tensor] : net.named_weights()) tensor->zero_grad();
    ad::Tape tape;
    auto logits = net.forward(tape, ones_batch(2, 1, 6, 6, 0.4));
    tape.backward(ad::cross_entropy(tape, logits, {0, 1}));
    // q_hat = 0 everywhere except op 0, so pruned sep-conv bundles stay untouched
    long zero_bundles = 0, nonzero_bundles = 0;
    ad::Tape probe(false);
    auto acts = full_dst_chain(probe, net.arch_normal, space);
    for (std::size_t e = 0; e < space.edges.size(); ++e)
        for (int k = 0; k < space.K; ++k) {
            const auto& bundle = net.cells[0].op_w[e][std::size_t(k)];
            if (bundle.tensors.empty()) continue;
            double gsum = 0;
            for (const auto& tensor : bundle.tensors)
                for (double g : tensor->grad) gsum += std::abs(g);
            if (acts.q_hat[e]->data[std::size_t(k)] == 0.0) {
                CHECK(gsum == 0.0);
                ++zero_bundles;
            } else {
                ++nonzero_bundles;
            }
        }
    CHECK(zero_bundles > 0);
    CHECK(nonzero_bundles > 0);
}

TEST_CASE("per-cell weight bundles follow the (n-1) x K layout") {
    auto space = standard_space(6);
    Rng rng = Rng::from(7, 1);
    auto shared = CellWeights::init(space, 8, 8, 8, 1, 1, true, rng);
    CHECK(shared.op_w.size() == 5);  // n-1 sources
    CHECK(shared.op_w[0].size() == 8);
    auto unshared = CellWeights::init(space, 8, 8, 8, 1, 1, false, rng);
    CHECK(unshared.op_w.size() == 14);  // one bundle per edge
}

TEST_CASE("darts baseline with unshared weights keeps per-edge parameters independent") {
    auto space = standard_space(4);
    SupernetConfig cfg;
    cfg.n_cells = 1;
    cfg.init_channels = 4;
    cfg.bottleneck_ratio = 1;
    cfg.mode = Mode::darts_baseline;
    cfg.feature_sharing = false;
    Rng rng = Rng::from(8, 1);
    Supernet net(space, cfg, {1, 6, 6, 3}, rng, 5.0);
    auto batch = ones_batch(1, 1, 6, 6, 0.5);
    auto run = [&] {
        ad::Tape t(false);
        return net.forward(t, batch)->data;
    };
    auto base = run();
    // same op on two different edges from the same source: perturbing one
    // edge's kernel must change the output while the other edge is unaffected
    int e13 = space.edge_index(1, 3);
    REQUIRE(!net.cells[0].op_w[std::size_t(e13)][1].tensors.empty());
    for (auto& v : net.cells[0].op_w[std::size_t(e13)][1].tensors[0]->data) v += 0.5;
    auto changed = run();
    bool differs = false;
    for (std::size_t i = 0; i < base.size(); ++i) differs = differs || base[i] != changed[i];
    CHECK(differs);
}

TEST_CASE("engine placement selects cells per kind") {
    SupernetConfig cfg;
    cfg.n_cells = 8;
    auto roles = [&](Placement p, Mode m) {
        cfg.engine_placement = p;
        cfg.mode = m;
        std::vector<int> engines;
        for (const auto& s : plan_cells(cfg))
            if (s.role == CellSpec::Role::engine) engines.push_back(s.index);
        return engines;
    };
    CHECK(roles(Placement::first, Mode::entran) == std::vector<int>{0, 2});  // reductions at 2 and 5
    CHECK(roles(Placement::last, Mode::entran) == std::vector<int>{5, 7});
    CHECK(roles(Placement::all, Mode::entran) == std::vector<int>{0, 1, 2, 3, 4, 5, 6, 7});
    CHECK(roles(Placement::half, Mode::entran) == std::vector<int>{0, 1, 2, 3});  // first 3 normals + first reduction
    // darts baseline is the all-engine super-net regardless of placement
    CHECK(roles(Placement::first, Mode::darts_baseline).size() == 8);
}

TEST_CASE("a one-cell network produces (batch, classes) logits") {
    SearchSpaceConfig sc;
    sc.n_nodes = 3;
    auto space = SearchSpace::build(sc);
    SupernetConfig cfg;
    cfg.n_cells = 1;
    cfg.init_channels = 4;
    cfg.bottleneck_ratio = 1;
    Rng rng = Rng::from(9, 1);
    Supernet net(space, cfg, {1, 8, 8, 5}, rng, 5.0);
    ad::Tape t(false);
    auto logits = net.forward(t, ones_batch(3, 1, 8, 8, 0.2));
    CHECK(logits->shape == std::vector<int>{3, 5});
}

TEST_CASE("stem shape mismatch is rejected") {
    SearchSpaceConfig sc;
    sc.n_nodes = 3;
    auto space = SearchSpace::build(sc);
    SupernetConfig cfg;
    cfg.n_cells = 1;
    cfg.init_channels = 4;
    cfg.bottleneck_ratio = 1;
    Rng rng = Rng::from(10, 1);
    Supernet net(space, cfg, {1, 8, 8, 4}, rng, 5.0);
    ad::Tape t(false);
    CHECK_THROWS_WITH(net.forward(t, ones_batch(1, 2, 8, 8)), Catch::Contains("stem"));
}

TEST_CASE("transit cells reject genotypes that do not fit the space") {
    auto space = tiny_dst_space();
    SupernetConfig cfg;
    cfg.n_cells = 1;
    cfg.init_channels = 4;
    cfg.bottleneck_ratio = 2;
    cfg.mode = Mode::dst;
    Rng rng = Rng::from(11, 1);
    Supernet net(space, cfg, {1, 6, 6, 3}, rng, 1.0);
    Genotype bad;
    bad.normal.nodes = {{{1, Op::conv_1x7_7x1}}, {{1, Op::identity}}};
    bad.reduction = bad.normal;
    Supernet::ForwardOptions opts;
    opts.all_transit = true;
    opts.genotype = &bad;
    ad::Tape t(false);
    CHECK_THROWS_AS(net.forward(t, ones_batch(1, 1, 6, 6), opts), std::out_of_range);
}

TEST_CASE("reduction cells halve spatial dims and double channels") {
    auto space = tiny_dst_space();
    SupernetConfig cfg;
    cfg.n_cells = 3;  // reduction at positions 1 and 2
    cfg.init_channels = 4;
    cfg.bottleneck_ratio = 2;
    cfg.mode = Mode::dst;
    Rng rng = Rng::from(12, 1);
    Supernet net(space, cfg, {1, 8, 8, 4}, rng, 1.0);
    CHECK(net.specs[0].kind == CellSpec::Kind::normal);
    CHECK(net.specs[1].kind == CellSpec::Kind::reduction);
    CHECK(net.specs[2].kind == CellSpec::Kind::reduction);
    CHECK(net.cells[1].channels == 8);
    CHECK(net.cells[2].channels == 16);
    CHECK(net.cells[2].pre0_stride == 2);  // its older input is at the pre-reduction resolution
    ad::Tape t(false);
    auto logits = net.forward(t, ones_batch(2, 1, 8, 8, 0.1));
    CHECK(logits->shape == std::vector<int>{2, 4});
}
