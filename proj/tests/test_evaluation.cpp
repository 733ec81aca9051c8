#include <catch2/catch.hpp>
#include <entran/evaluation.hpp>

using namespace entran;

namespace {

// exhaustive all-pairs reference
double kendall_oracle(const std::vector<RankPair>& pairs) {
    long concordant = 0, discordant = 0;
    for (std::size_t i = 0; i < pairs.size(); ++i)
        for (std::size_t j = i + 1; j < pairs.size(); ++j) {
            double dp = pairs[i].proxy_score - pairs[j].proxy_score;
            double dt = pairs[i].true_score - pairs[j].true_score;
            if (dp * dt > 0) ++concordant;
            else ++discordant;
        }
    long total = long(pairs.size()) * long(pairs.size() - 1) / 2;
    return double(concordant - discordant) / double(total);
}

RunConfig dst_cfg(std::uint64_t seed = 3) {
    RunConfig cfg;
    cfg.space.n_nodes = 4;
    cfg.space.op_set = OpSet::custom;
    cfg.space.custom_ops = {Op::sep_conv_3x3, Op::max_pool_3x3, Op::identity};
    cfg.space.include_zero = false;
    cfg.supernet.mode = Mode::dst;
    cfg.supernet.n_cells = 3;
    cfg.supernet.init_channels = 8;
    cfg.supernet.bottleneck_ratio = 4;
    cfg.trainer.epochs = 4;
    cfg.trainer.batch_size = 8;
    cfg.trainer.seed = seed;
    return cfg;
}

}  // namespace

TEST_CASE("kendall_tau on canonical orderings") {
    std::vector<RankPair> same = {{1, 10}, {2, 20}, {3, 30}, {4, 40}};
    CHECK(kendall_tau(same) == Approx(1.0));
    std::vector<RankPair> reversed = {{1, 40}, {2, 30}, {3, 20}, {4, 10}};
    CHECK(kendall_tau(reversed) == Approx(-1.0));
    std::vector<RankPair> mixed = {{1, 1}, {2, 3}, {3, 2}};
    CHECK(kendall_tau(mixed) == Approx(1.0 / 3.0));
}

TEST_CASE("kendall_tau rejects ties with advice") {
    std::vector<RankPair> tied = {{1, 5}, {1, 6}, {2, 7}};
    CHECK_THROWS_WITH(kendall_tau(tied), Catch::Contains("perturb"));
    std::vector<RankPair> tied_true = {{1, 5}, {2, 5}, {3, 7}};
    CHECK_THROWS_WITH(kendall_tau(tied_true), Catch::Contains("perturb"));
    CHECK_THROWS_AS(kendall_tau({{1, 1}}), std::invalid_argument);
}

TEST_CASE("kendall_tau matches the exhaustive oracle on random lists") {
    Rng rng = Rng::from(90, 1);
    for (int trial = 0; trial < 300; ++trial) {
        std::size_t m = 2 + rng.below(7);
        std::vector<RankPair> pairs;
        for (std::size_t i = 0; i < m; ++i) pairs.push_back({rng.normal(), rng.normal()});
        CHECK(kendall_tau(pairs) == Approx(kendall_oracle(pairs)).epsilon(1e-12));
        CHECK(kendall_tau(pairs) >= -1.0);
        CHECK(kendall_tau(pairs) <= 1.0);
    }
}

TEST_CASE("an untrained network scores near chance for both super-net and child-net") {
    auto data = make_synthetic(4, 1, 8, 8, 32, 7);
    RunConfig cfg = dst_cfg();
    Searcher s(cfg, data);  // constructed but never stepped
    auto rep = consistency_report(s.net(), s.val_half());
    CHECK(rep.supernet_acc == Approx(0.25).margin(0.2));
    CHECK(rep.childnet_acc == Approx(0.25).margin(0.2));
}

TEST_CASE("dst consistency drop is exactly zero under q_hat evaluation") {
    auto data = make_synthetic(4, 1, 8, 8, 16, 7);
    RunConfig cfg = dst_cfg();
    Searcher s(cfg, data);
    s.run();
    auto rep = consistency_report(s.net(), s.val_half());
    CHECK(rep.drop == 0.0);
    CHECK(rep.supernet_acc == rep.childnet_acc);
}

TEST_CASE("childnet_inference validates the genotype against the space") {
    auto data = make_synthetic(4, 1, 8, 8, 8, 7);
    RunConfig cfg = dst_cfg();
    Searcher s(cfg, data);
    Genotype bad;
    bad.normal.nodes = {{{1, Op::conv_3x3}}, {{1, Op::identity}}};
    bad.reduction = bad.normal;
    CHECK_THROWS_AS(childnet_inference(s.net(), bad, s.val_half(), TransitCoeff::unit), std::invalid_argument);
}

TEST_CASE("efficiency counters reproduce the component-by-component savings") {
    RunConfig base;
    base.space.n_nodes = 6;  // standard space, K = 8
    base.supernet.n_cells = 8;
    base.supernet.init_channels = 8;
    base.supernet.bottleneck_ratio = 4;
    base.trainer.seed = 1;
    auto data = make_synthetic(4, 1, 8, 8, 4, 7);
    auto rows = efficiency_counters(base, data);
    REQUIRE(rows.size() == 4);
    CHECK(rows[0].setting == "darts_baseline");
    CHECK(rows[0].engine_cells == 8);
    CHECK(rows[1].engine_cells == 2);  // first placement: one normal + one reduction
    CHECK(rows[2].engine_cells == 2);
    // relaxed-DAG invocations fall at each step; feature sharing is the big one
    CHECK(rows[1].op_invocations < rows[0].op_invocations);
    CHECK(rows[2].op_invocations < rows[1].op_invocations);
    // parameter count drops with sharing and again with the bottleneck
    CHECK(rows[2].params < rows[1].params);
    CHECK(rows[3].params < rows[2].params);
    // multiply count shrinks under the bottleneck
    CHECK(rows[3].macs < rows[2].macs);
    for (const auto& r : rows) {
        auto again = efficiency_counters(base, data);
        bool found = false;
        for (const auto& r2 : again)
            if (r2.setting == r.setting) {
                found = true;
                CHECK(r2.op_invocations == r.op_invocations);
                CHECK(r2.params == r.params);
            }
        CHECK(found);
    }
}

TEST_CASE("bottleneck scales channel-quadratic op multiplies by ratio squared") {
    ad::Tape t;
    Rng rng = Rng::from(4, 4);
    for (int c : {16, 4}) {
        (void)c;
    }
    auto count_macs = [&](int channels) {
        auto x = ad::make_tensor({1, channels, 8, 8});
        auto w = init_op_weights(Op::conv_1x1, channels, rng);
        ForwardCounters counters;
        apply_op(t, Op::conv_1x1, w, x, 1, &counters);
        return counters.macs;
    };
    long full = count_macs(16), reduced = count_macs(4);
    CHECK(full == 16 * reduced);  // C^2 scaling, ratio 4 -> 1/16 multiplies
}

TEST_CASE("retraining a derived genotype is deterministic and supports arity 1") {
    auto data = make_synthetic(4, 1, 8, 8, 16, 7);
    RunConfig cfg = dst_cfg();
    cfg.retrain.n_cells = 3;
    cfg.retrain.init_channels = 8;
    cfg.retrain.epochs = 4;
    Genotype arity1;
    arity1.normal.nodes = {{{1, Op::sep_conv_3x3}}, {{3, Op::identity}}};
    arity1.reduction.nodes = {{{2, Op::max_pool_3x3}}, {{1, Op::sep_conv_3x3}}};
    double a = retrain(arity1, cfg, data, 5);
    double b = retrain(arity1, cfg, data, 5);
    CHECK(a == b);
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
}

TEST_CASE("retrained accuracy on the separable toy task clears chance comfortably") {
    auto data = make_synthetic(4, 1, 8, 8, 32, 7);
    RunConfig cfg = dst_cfg();
    cfg.retrain.n_cells = 4;
    cfg.retrain.init_channels = 8;
    cfg.retrain.epochs = 20;
    cfg.trainer.w_lr = 0.1;
    Genotype g;
    g.normal.nodes = {{{1, Op::sep_conv_3x3}, {2, Op::identity}}, {{2, Op::sep_conv_3x3}, {3, Op::identity}}};
    g.reduction.nodes = {{{1, Op::max_pool_3x3}, {2, Op::sep_conv_3x3}}, {{2, Op::identity}, {3, Op::sep_conv_3x3}}};
    double acc = retrain(g, cfg, data, 5);
    CHECK(acc >= 0.25 + 0.20);
}

TEST_CASE("lambda_sweep reports one row per lambda and requires dst mode") {
    auto data = make_synthetic(4, 1, 8, 8, 8, 7);
    RunConfig cfg = dst_cfg();
    cfg.trainer.epochs = 2;
    auto rows = lambda_sweep(cfg, {0.1}, {1}, data);
    REQUIRE(rows.size() == 1);
    CHECK(rows[0].lambda == 0.1);
    CHECK(rows[0].mean_edges_normal > 0);
    CHECK(rows[0].mean_params > 0);

    cfg.supernet.mode = Mode::entran;
    CHECK_THROWS_AS(lambda_sweep(cfg, {0.1}, {1}, data), std::invalid_argument);
}

TEST_CASE("derived parameter count grows with kept connections") {
    RunConfig cfg = dst_cfg();
    DataDims dims{1, 8, 8, 4};
    Genotype small;
    small.normal.nodes = {{{1, Op::identity}}, {{1, Op::identity}}};
    small.reduction = small.normal;
    Genotype big = small;
    big.normal.nodes[0].push_back({2, Op::sep_conv_3x3});
    big.normal.nodes[1].push_back({3, Op::sep_conv_3x3});
    CHECK(derived_parameter_count(big, cfg, dims) > derived_parameter_count(small, cfg, dims));
}
