#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "elit/attention_map.hpp"
#include "elit/cost_model.hpp"
#include "elit/experiments.hpp"
#include "test_support.hpp"

using namespace elit;
using elit::testing::tiny_config;

namespace {

Image random_image(const BackboneConfig& cfg, std::mt19937_64& rng) {
    Image im(cfg.channels, cfg.image_size, cfg.image_size);
    std::normal_distribution<float> n(0.0f, 1.0f);
    for (float& v : im.data) v = n(rng);
    return im;
}

std::vector<double> group_sums(const Heatmap& h) {
    std::vector<double> s(static_cast<size_t>(h.groups), 0.0);
    for (int i = 0; i < h.rows * h.cols; ++i) s[static_cast<size_t>(h.group_of[static_cast<size_t>(i)])] += h.at(i);
    return s;
}

} // namespace

TEST_CASE("heatmap is non-negative and sums to one per group") {
    Model<float> m(tiny_config(), 3);
    std::mt19937_64 rng(1);
    elit::testing::randomize_parameters(m.params(), rng, 0.5);
    for (int j : {1, 3, 4}) {
        const Heatmap h = read_attention_map(m, random_image(tiny_config(), rng), 0.4, 1, j);
        CHECK(h.rows == 4);
        CHECK(h.cols == 4);
        CHECK(h.values.minCoeff() >= 0.0);
        for (double s : group_sums(h)) CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    }
    // groups are 2x2 token blocks in raster order
    const Heatmap h = read_attention_map(m, random_image(tiny_config(), rng), 0.4, 1, 4);
    CHECK(h.group_of[0] == 0);
    CHECK(h.group_of[3] == 1);
    CHECK(h.group_of[8] == 2);
    CHECK(h.group_of[15] == 3);
}

TEST_CASE("constant queries give exactly uniform attention") {
    Model<float> m(tiny_config(), 3);
    std::mt19937_64 rng(2);
    elit::testing::randomize_parameters(m.params(), rng, 0.5);
    for (auto& [name, p] : m.params().all())
        if (name.rfind("read.attn.q.", 0) == 0) p.value.setZero();
    const Heatmap h = read_attention_map(m, random_image(tiny_config(), rng), 0.7, 2, 4);
    for (int i = 0; i < 16; ++i) CHECK(h.at(i) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(within_group_entropy(h) == doctest::Approx(std::log(4.0)).epsilon(1e-6));
}

TEST_CASE("untrained model attends almost uniformly") {
    BackboneConfig cfg = tiny_config();
    cfg.image_size = 16; // 64 tokens, 16 per group
    cfg.width = 16;
    Model<float> m(cfg, 5);
    ToyDatasetSpec ds;
    ds.image_size = 16;
    ds.num_classes = 4;
    ds.samples_per_class = 4;
    const EvalSet es = make_eval_set(gen_shapes_dataset(ds), 2, 1, TimestepDistribution{});
    const Heatmap h = mean_read_attention(m, es, 4);
    for (double s : group_sums(h)) CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
    const double uniform = std::log(16.0);
    CHECK(within_group_entropy(h) >= 0.9 * uniform);
    CHECK(within_group_entropy(h) <= uniform + 1e-9);
}

TEST_CASE("attention maps need a Read layer") {
    BackboneConfig cfg = tiny_config();
    cfg.latent_interface = false;
    Model<float> m(cfg, 1);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(read_attention_map(m, random_image(cfg, rng), 0.5, 0, 1), ConfigError);
}

TEST_CASE("spearman with ties") {
    CHECK(spearman({1, 2, 3, 4}, {10, 20, 30, 40}) == doctest::Approx(1.0));
    CHECK(spearman({1, 2, 3, 4}, {4, 3, 2, 1}) == doctest::Approx(-1.0));
    CHECK(spearman({1, 2, 2, 3}, {1, 3, 2, 4}) == doctest::Approx(4.5 / std::sqrt(22.5)));
    CHECK(spearman({1, 1, 1}, {1, 2, 3}) == 0.0);
    CHECK_THROWS(spearman({1}, {1}));
}

TEST_CASE("masked means and rendering") {
    Heatmap h;
    h.rows = 2;
    h.cols = 2;
    h.group_of = {0, 0, 0, 0};
    h.values.resize(2, 2);
    h.values << 0.4, 0.3, 0.2, 0.1;
    const auto [on, off] = masked_means(h, {true, true, false, false});
    CHECK(on == doctest::Approx(0.35));
    CHECK(off == doctest::Approx(0.15));
    const Image im = render_heatmap(h, 3);
    CHECK(im.height == 6);
    CHECK(im.at(0, 0, 0) == doctest::Approx(1.0f));
    CHECK(im.at(0, 5, 5) == doctest::Approx(-0.5f));
}

TEST_CASE("median") {
    CHECK(median_of({3, 1, 2}) == 2);
    CHECK(median_of({4, 1, 2, 3}) == 2.5);
    CHECK_THROWS(median_of({}));
}

TEST_CASE("padded probe arms") {
    const PaddedProbeConfig c = PaddedProbeConfig::desk();
    const auto arms = padded_probe_arms(c);
    REQUIRE(arms.size() == 4);
    CHECK(arms[0].name == "dit_small");
    CHECK(arms[0].tokens == 16);
    CHECK(arms[1].tokens == 64);
    CHECK(arms[2].tokens == 64);
    CHECK(arms[3].tokens == 64);
    CHECK(arms[1].tokens == c.pad_factor * arms[0].tokens);
    CHECK_FALSE(arms[1].backbone.latent_interface);
    CHECK(arms[2].backbone.latent_interface);
    CHECK(arms[2].padded);
    CHECK_FALSE(arms[3].padded);
    // same token count and width: the two ELIT arms cost the same
    CHECK(arms[2].flops == arms[3].flops);
    CHECK(arms[1].flops > arms[0].flops);
}

TEST_CASE("elastic trend config is consistent") {
    const ElasticTrendConfig c = ElasticTrendConfig::desk();
    CHECK_NOTHROW(c.backbone.validate());
    CHECK_NOTHROW(c.budget.validate(c.backbone.latents_per_group));
    CHECK(c.eval_budgets.front() == c.budget.j_min);
    CHECK(c.eval_budgets.back() == c.budget.j_max);
    CHECK(c.seeds.size() == 3);
}

TEST_CASE("elastic trend monotone grid is a subset") {
    const ElasticTrendConfig c = ElasticTrendConfig::desk();
    for (int j : c.monotone_budgets)
        CHECK(std::find(c.eval_budgets.begin(), c.eval_budgets.end(), j) != c.eval_budgets.end());
}
