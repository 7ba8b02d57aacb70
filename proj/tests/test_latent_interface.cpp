#include "doctest.h"

#include <set>

#include "elit/backbone.hpp"
#include "test_support.hpp"

using namespace elit;
using namespace elit::testing;

TEST_CASE("group partition is a permutation and merge inverts it") {
    GroupLayout l{2, 4, 4, 8};
    const auto order = l.group_major_order();
    CHECK(std::set<Index>(order.begin(), order.end()).size() == 32);
    for (size_t i = 0; i < order.size(); ++i) CHECK(l.group_of(static_cast<int>(order[i])) == static_cast<int>(i) / 4);

    std::mt19937_64 rng(1);
    SpatialTokens<double> s{random_matrix<double>(32, 3, rng), 4, 8};
    const auto grouped = partition_groups(s, l);
    CHECK(grouped.groups == 8);
    CHECK(grouped.per_group == 4);
    CHECK(merge_groups(grouped, l).values == s.values);
    // group 1 covers rows 0-1, columns 2-3
    CHECK(grouped.values.row(4) == s.values.row(2));
    CHECK(grouped.values.row(7) == s.values.row(11));
}

TEST_CASE("indivisible group grids are rejected") {
    BackboneConfig cfg = tiny_config();
    cfg.group_rows = 3;
    CHECK_THROWS_AS(cfg.validate(), ConfigError);
    CHECK_THROWS_AS((GroupLayout{3, 1, 4, 4}).validate(), ConfigError);
}

TEST_CASE("budget spec validation names the offending field") {
    const auto message = [](BudgetSpec s) {
        try {
            s.validate(8);
        } catch (const ConfigError& e) {
            return std::string(e.what());
        }
        return std::string();
    };
    CHECK(message({0, 4}).find("budget.J_min") != std::string::npos);
    CHECK(message({5, 4}).find("budget.J_min") != std::string::npos);
    CHECK(message({1, 9}).find("budget.J_max") != std::string::npos);
    CHECK(message({1, 8}).empty());
}

TEST_CASE("budget sampler is uniform over the configured range") {
    Rng rng(7);
    const BudgetSpec spec{2, 9};
    const int draws = 40000;
    std::vector<int> counts(10, 0);
    for (int i = 0; i < draws; ++i) {
        const int j = sample_budget(spec, rng).j_tilde;
        REQUIRE(j >= 2);
        REQUIRE(j <= 9);
        ++counts[j];
    }
    const double expected = draws / 8.0;
    double chi2 = 0;
    for (int j = 2; j <= 9; ++j) chi2 += (counts[j] - expected) * (counts[j] - expected) / expected;
    // 7 degrees of freedom, p = 0.001 critical value
    CHECK(chi2 < 24.32);
}

TEST_CASE("retention probability of tail dropping") {
    const BudgetSpec spec{1, 4};
    CHECK(retention_probability(spec, 0) == 1.0);
    CHECK(retention_probability(spec, 1) == 0.75);
    CHECK(retention_probability(spec, 3) == 0.25);
    for (int i = 0; i + 1 < 4; ++i) CHECK(retention_probability(spec, i) >= retention_probability(spec, i + 1));
}

TEST_CASE("tail and random retained indices") {
    CHECK(retained_indices(DropStrategy::tail, 6, Budget{3}) == std::vector<int>{0, 1, 2});
    Rng rng(3);
    std::vector<int> hits(6, 0);
    for (int i = 0; i < 600; ++i)
        for (int j : retained_indices(DropStrategy::random, 6, Budget{2}, &rng)) ++hits[j];
    for (int h : hits) CHECK(h > 100);
    CHECK_THROWS_AS(retained_indices(DropStrategy::tail, 6, Budget{7}), std::out_of_range);
    CHECK_THROWS_AS(retained_indices(DropStrategy::random, 6, Budget{2}), std::invalid_argument);
}

TEST_CASE("expand, drop and row bookkeeping agree") {
    std::mt19937_64 rng(4);
    const Mat<float> shared = random_matrix<float>(4, 3, rng);
    const GroupLayout l{2, 2, 4, 4};
    const auto full = expand_latents(shared, l, Budget{4});
    CHECK(full.values.rows() == 16);
    const auto dropped = drop_tail(full, Budget{2});
    const auto direct = expand_latents(shared, l, Budget{2});
    CHECK(dropped.values == direct.values);
    CHECK(drop_tail_rows(2, 4, 2) == std::vector<Index>{0, 1, 4, 5});
    for (int g = 0; g < 4; ++g) CHECK(full.values.row(g * 4 + 3) == shared.row(3));
}

TEST_CASE("shared latent gradient is the sum over group copies") {
    std::mt19937_64 rng(5);
    Parameter<double> p;
    p.value = random_matrix<double>(3, 4, rng);
    p.zero_grad();
    const int groups = 5;
    Graph<double> g;
    std::vector<Index> rows;
    for (int gi = 0; gi < groups; ++gi)
        for (Index j = 0; j < 3; ++j) rows.push_back(j);
    Var e = g.gather_rows(g.param(p), rows);
    // identical upstream gradient on every copy
    const Mat<double> per_copy = random_matrix<double>(3, 4, rng);
    Mat<double> seed(15, 4);
    for (int gi = 0; gi < groups; ++gi) seed.middleRows(gi * 3, 3) = per_copy;
    g.backward(e, seed);
    CHECK((p.grad - groups * per_copy).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("cross-attention layouts keep groups apart") {
    const auto grouped = cross_attention_layout(2, 3, 2, 4, 4, CrossAttentionImpl::grouped);
    CHECK(grouped.segments.size() == 6);
    CHECK(grouped.masks.empty());
    const auto dense = cross_attention_layout(2, 3, 2, 4, 2, CrossAttentionImpl::dense_masked);
    REQUIRE(dense.segments.size() == 2);
    REQUIRE(dense.masks.size() == 2);
    const KeyMask& m = dense.masks[0];
    CHECK(m.rows() == 6);
    CHECK(m.cols() == 12);
    CHECK(m.count() == 3 * 2 * 2);
    CHECK(m(2, 4));
    CHECK(m(3, 5));
    CHECK_FALSE(m(2, 6));
    CHECK_FALSE(m(2, 0));
    CHECK_THROWS_AS(cross_attention_layout(1, 1, 1, 4, 0, CrossAttentionImpl::grouped), std::out_of_range);
}

template <typename T>
double grouped_vs_dense(int budget, LatentPath path) {
    BackboneConfig cfg = tiny_config();
    Model<T> model(cfg, 50 + budget);
    std::mt19937_64 rng(60 + budget);
    randomize_parameters(model.params(), rng, 0.25);
    const auto batch = random_batch<T>(cfg, 3, budget, rng);
    ForwardOptions a, b;
    a.latent_path = b.latent_path = path;
    b.cross = CrossAttentionImpl::dense_masked;
    return static_cast<double>((model.predict(batch, a) - model.predict(batch, b)).cwiseAbs().maxCoeff());
}

TEST_CASE("grouped cross-attention equals the dense block-diagonal oracle") {
    for (int budget = 1; budget <= 4; ++budget) {
        for (LatentPath path : {LatentPath::prefix, LatentPath::masked_full}) {
            CHECK(grouped_vs_dense<float>(budget, path) < 1e-5);
            CHECK(grouped_vs_dense<double>(budget, path) < 1e-12);
        }
    }
}

TEST_CASE("read attention never crosses groups") {
    BackboneConfig cfg = tiny_config();
    Model<double> model(cfg, 9);
    std::mt19937_64 rng(10);
    randomize_parameters(model.params(), rng, 0.25);
    const auto batch = random_batch<double>(cfg, 1, 3, rng);
    ForwardOptions opts;
    opts.cross = CrossAttentionImpl::dense_masked;
    Graph<double> g(false);
    ForwardTrace trace;
    model.forward(g, batch, opts, &trace);
    const auto probs = g.attention_probs(trace.read_attention);
    REQUIRE(!probs.empty());
    for (const auto& p : probs) {
        for (Index r = 0; r < p.rows(); ++r) {
            const Index grp = r / 3;
            CHECK(p.row(r).sum() == doctest::Approx(1.0));
            CHECK(p.row(r).segment(grp * 4, 4).sum() == doctest::Approx(1.0));
        }
    }
}

TEST_CASE("write layer is the identity at initialization") {
    BackboneConfig cfg = tiny_config();
    ParameterStore<double> store;
    std::mt19937_64 init(1), rng(2);
    WriteLayer<double> write(store, "write", cfg, init);
    InterfaceShape shape;
    shape.samples = 1;
    shape.groups = 4;
    shape.tokens_per_group = 4;
    shape.latent_rows_per_group = 2;
    shape.visible_latents = 2;
    Graph<double> g(false);
    const Mat<double> s = random_matrix<double>(16, 8, rng);
    Var out = write.forward(g, g.input(random_matrix<double>(8, 8, rng)), g.input(s),
                            g.input(random_matrix<double>(1, 8, rng)), shape);
    CHECK(g.value(out) == s);
}
