#include "doctest.h"

#include "elit/cost_model.hpp"
#include "elit/guidance.hpp"
#include "test_support.hpp"

using namespace elit;
using namespace elit::testing;

namespace {

struct Call {
    int label;
    int budget;
};

// Velocity = x * (label + 2) + budget, recording every call.
ConditionalVelocityFn<double> recording_model(std::vector<Call>& calls) {
    return [&calls](const Mat<double>& x, double, int label, int budget) {
        calls.push_back({label, budget});
        return Mat<double>((x.array() * (label + 2) + budget).matrix());
    };
}

BackboneConfig xl_reference() { return xl_reference_config(); }

} // namespace

TEST_CASE("guidance modes issue the expected model calls") {
    const Mat<double> x = Mat<double>::Constant(2, 3, 1.0);
    const auto run = [&](GuidanceMode mode) {
        std::vector<Call> calls;
        GuidanceSpec spec{mode, 1.5, 8, 2};
        const Mat<double> v = guided_velocity<double>(recording_model(calls), x, 0.5, 3, spec);
        return std::make_pair(calls, v(0, 0));
    };
    auto [none, v_none] = run(GuidanceMode::none);
    REQUIRE(none.size() == 1);
    CHECK(none[0].label == 3);
    CHECK(none[0].budget == 8);
    CHECK(v_none == 13.0);

    auto [cfg, v_cfg] = run(GuidanceMode::cfg);
    REQUIRE(cfg.size() == 2);
    CHECK(cfg[1].label == -1);
    CHECK(cfg[1].budget == 8);
    CHECK(v_cfg == doctest::Approx(2.5 * 13.0 - 1.5 * 9.0));

    auto [ag, v_ag] = run(GuidanceMode::ag);
    REQUIRE(ag.size() == 2);
    CHECK(ag[1].label == 3);
    CHECK(ag[1].budget == 2);
    CHECK(v_ag == doctest::Approx(2.5 * 13.0 - 1.5 * 7.0));

    auto [ccfg, v_ccfg] = run(GuidanceMode::ccfg);
    REQUIRE(ccfg.size() == 2);
    CHECK(ccfg[1].label == -1);
    CHECK(ccfg[1].budget == 2);
    CHECK(v_ccfg == doctest::Approx(2.5 * 13.0 - 1.5 * 3.0));
}

TEST_CASE("zero guidance scale reduces to the main prediction") {
    std::mt19937_64 rng(1);
    const Mat<double> x = random_matrix<double>(4, 2, rng);
    std::vector<Call> calls;
    const auto model = recording_model(calls);
    for (GuidanceMode m : {GuidanceMode::cfg, GuidanceMode::ag, GuidanceMode::ccfg}) {
        const Mat<double> a = guided_velocity<double>(model, x, 0.2, 1, {m, 0.0, 4, 2});
        const Mat<double> b = guided_velocity<double>(model, x, 0.2, 1, {GuidanceMode::none, 0.0, 4, 2});
        CHECK(a == b);
    }
}

TEST_CASE("guided velocity is affine in the guidance scale") {
    std::mt19937_64 rng(2);
    const Mat<double> x = random_matrix<double>(3, 3, rng);
    std::vector<Call> calls;
    const auto model = recording_model(calls);
    const auto at = [&](double l) { return guided_velocity<double>(model, x, 0.7, 0, {GuidanceMode::ccfg, l, 4, 1}); };
    const Mat<double> second = at(2.0) - 2.0 * at(1.0) + at(0.0);
    CHECK(second.cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("guidance validation") {
    CHECK_THROWS_AS(parse_guidance_mode("cfgg"), ConfigError);
    CHECK(parse_guidance_mode("ccfg") == GuidanceMode::ccfg);
    for (GuidanceMode m : {GuidanceMode::none, GuidanceMode::cfg, GuidanceMode::ag, GuidanceMode::ccfg})
        CHECK(parse_guidance_mode(to_string(m)) == m);
    CHECK_THROWS_AS((GuidanceSpec{GuidanceMode::ag, 1.0, 2, 4}).validate(), ConfigError);
    CHECK_THROWS_AS((GuidanceSpec{GuidanceMode::cfg, -1.0, 2, 1}).validate(), ConfigError);
    CHECK_NOTHROW((GuidanceSpec{GuidanceMode::cfg, 1.0, 2, 4}).validate());
}

TEST_CASE("model velocity function runs the real network") {
    BackboneConfig cfg = tiny_config();
    Model<double> model(cfg, 1);
    std::mt19937_64 rng(3);
    randomize_parameters(model.params(), rng, 0.2);
    const auto fn = model_velocity_fn(model);
    const Mat<double> x = random_matrix<double>(2 * cfg.num_tokens(), cfg.patch_dim(), rng);
    ModelBatch<double> batch{x, {0.4, 0.4}, {2, 2}, 3};
    CHECK(fn(x, 0.4, 2, 3) == model.predict(batch));
    const auto field = guided_field<double>(fn, 2, {GuidanceMode::ccfg, 1.0, 4, 1});
    CHECK(field(x, 0.4).allFinite());
}

TEST_CASE("weak budget selection respects the cost fraction") {
    const BackboneConfig cfg = xl_reference();
    const int jw = select_weak_budget(cfg, 1024, 64, 0.35);
    const double full = static_cast<double>(cost_breakdown(cfg, 1024, 64).total);
    CHECK(static_cast<double>(cost_breakdown(cfg, 1024, jw).total) <= 0.35 * full);
    CHECK(static_cast<double>(cost_breakdown(cfg, 1024, jw + 1).total) > 0.35 * full);
}

TEST_CASE("cheap guidance costs at most 70 percent of classifier-free guidance") {
    const BackboneConfig cfg = xl_reference();
    const int jw = select_weak_budget(cfg, 1024, 64, 0.35);
    const auto c_cfg = sampling_cost(cfg, 1024, {GuidanceMode::cfg, 1.5, 64, 64}, 250);
    const auto c_ccfg = sampling_cost(cfg, 1024, {GuidanceMode::ccfg, 1.5, 64, jw}, 250);
    CHECK(static_cast<double>(c_ccfg) <= 0.70 * static_cast<double>(c_cfg));
    CHECK(c_cfg == 2 * sampling_cost(cfg, 1024, {GuidanceMode::none, 0.0, 64, 64}, 250));
}
