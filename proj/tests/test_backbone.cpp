#include "doctest.h"

#include <numeric>

#include "elit/backbone.hpp"
#include "test_support.hpp"

using namespace elit;
using namespace elit::testing;

TEST_CASE("patchify token counts") {
    Image img(1, 16, 16);
    CHECK(patchify_pixels<float>(img, 2).rows() == 64);
    CHECK(patchify_pixels<float>(img, 16).rows() == 1);
    CHECK(patchify_pixels<float>(img, 16).cols() == 256);
    CHECK_THROWS_AS(patchify_pixels<float>(Image(1, 15, 15), 2), ShapeError);
}

TEST_CASE("patch index map is a permutation and unpatchify inverts it") {
    const auto map = patch_index_map(3, 8, 12, 4);
    std::vector<Index> sorted = map;
    std::sort(sorted.begin(), sorted.end());
    std::vector<Index> iota(sorted.size());
    std::iota(iota.begin(), iota.end(), 0);
    CHECK(sorted == iota);

    Image img(3, 8, 12);
    for (size_t i = 0; i < img.size(); ++i) img.data[i] = static_cast<float>(i);
    const Mat<double> p = patchify_pixels<double>(img, 4);
    CHECK(unpatchify_pixels<double>(p, 3, 8, 12, 4).data == img.data);

    // direct scatter oracle: token (tr, tc), column (dy, dx, c)
    std::mt19937_64 rng(3);
    const Mat<double> tokens = random_matrix<double>(6, 48, rng);
    const Image out = unpatchify_pixels<double>(tokens, 3, 8, 12, 4);
    for (int tr = 0; tr < 2; ++tr)
        for (int tc = 0; tc < 3; ++tc)
            for (int dy = 0; dy < 4; ++dy)
                for (int dx = 0; dx < 4; ++dx)
                    for (int c = 0; c < 3; ++c)
                        CHECK(out.at(c, tr * 4 + dy, tc * 4 + dx) ==
                              static_cast<float>(tokens(tr * 3 + tc, (dy * 4 + dx) * 3 + c)));
    CHECK_THROWS_AS(unpatchify_pixels<double>(tokens.topRows(5), 3, 8, 12, 4), ShapeError);
}

TEST_CASE("constant token vector gives a per-patch-position constant image") {
    Mat<float> tokens(4, 4);
    tokens.rowwise() = Eigen::RowVector4f(1, 2, 3, 4);
    const Image img = unpatchify_pixels<float>(tokens, 1, 4, 4, 2);
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) CHECK(img.at(0, y, x) == static_cast<float>((y % 2) * 2 + (x % 2) + 1));
}

TEST_CASE("untrained model predicts exactly zero velocity") {
    for (bool interface : {true, false}) {
        BackboneConfig cfg = tiny_config();
        cfg.latent_interface = interface;
        Model<float> model(cfg, 11);
        std::mt19937_64 rng(1);
        for (int budget : {1, 3, 4}) {
            const auto batch = random_batch<float>(cfg, 3, budget, rng);
            const Mat<float> v = model.predict(batch);
            CHECK(v.rows() == batch.patches.rows());
            CHECK(v.cols() == batch.patches.cols());
            CHECK(v.cwiseAbs().maxCoeff() == 0.0f);
        }
    }
}

TEST_CASE("dit block is the identity at initialization") {
    BackboneConfig cfg = tiny_config();
    ParameterStore<double> store;
    std::mt19937_64 init(2), rng(3);
    DitBlock<double> block(store, "b", cfg, init, Site::spatial_block, 0);
    Graph<double> g(false);
    const Mat<double> x = random_matrix<double>(2 * 5, 8, rng);
    AttentionLayout layout;
    layout.segments = {{0, 5, 0, 5}, {5, 5, 5, 5}};
    Var y = block.forward(g, g.input(x), g.input(random_matrix<double>(2, 8, rng)), 5, layout, nullptr);
    CHECK(g.value(y) == x);
}

TEST_CASE("single-token block: attention output is the gated value path") {
    BackboneConfig cfg = tiny_config();
    ParameterStore<double> store;
    std::mt19937_64 init(2), rng(3);
    DitBlock<double> block(store, "b", cfg, init, Site::latent_block, 0);
    randomize_parameters(store, rng);
    // zero the MLP gate so only the attention branch contributes
    store.get("b.adaln.weight").value.middleCols(5 * 8, 8).setZero();
    store.get("b.adaln.bias").value.middleCols(5 * 8, 8).setZero();
    const Mat<double> x = random_matrix<double>(1, 8, rng);
    const Mat<double> c = random_matrix<double>(1, 8, rng);
    AttentionLayout layout;
    layout.segments = {{0, 1, 0, 1}};
    Graph<double> g(false);
    Var y = block.forward(g, g.input(x), g.input(c), 1, layout, nullptr);

    // reference: softmax over one key is 1, so attention = value projection
    const Mat<double> mod = c * store.get("b.adaln.weight").value + store.get("b.adaln.bias").value;
    const auto chunk = [&](int i) { return mod.middleCols(i * 8, 8); };
    const double mean = x.mean();
    const double var = (x.array() - mean).square().mean();
    Mat<double> h = ((x.array() - mean) / std::sqrt(var + 1e-6)).matrix();
    h = (h.array() * (chunk(1).array() + 1.0) + chunk(0).array()).matrix();
    const Mat<double> qkv = h * store.get("b.attn.qkv.weight").value + store.get("b.attn.qkv.bias").value;
    const Mat<double> a = qkv.middleCols(16, 8) * store.get("b.attn.proj.weight").value +
                          store.get("b.attn.proj.bias").value;
    const Mat<double> expected = x + (chunk(2).array() * a.array()).matrix();
    CHECK((g.value(y) - expected).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("budget outside [1, J] is rejected") {
    BackboneConfig cfg = tiny_config();
    Model<float> model(cfg, 1);
    std::mt19937_64 rng(1);
    CHECK_THROWS_AS(model.predict(random_batch<float>(cfg, 1, 0, rng)), std::out_of_range);
    CHECK_THROWS_AS(model.predict(random_batch<float>(cfg, 1, 5, rng)), std::out_of_range);
}

TEST_CASE("heads must divide the width") {
    BackboneConfig cfg = tiny_config();
    cfg.heads = 3;
    CHECK_THROWS_AS(Model<float>(cfg, 1), ConfigError);
}

template <typename T>
double prefix_vs_masked(const BackboneConfig& cfg, int budget, std::uint64_t seed) {
    Model<T> model(cfg, seed);
    std::mt19937_64 rng(seed + 100);
    randomize_parameters(model.params(), rng, 0.2);
    const auto batch = random_batch<T>(cfg, 2, budget, rng);
    ForwardOptions masked;
    masked.latent_path = LatentPath::masked_full;
    const Mat<T> a = model.predict(batch);
    const Mat<T> b = model.predict(batch, masked);
    return static_cast<double>((a - b).cwiseAbs().maxCoeff());
}

TEST_CASE("tail drop equals the masked full-latent forward") {
    const BackboneConfig cfg = tiny_config();
    for (int budget = 1; budget <= 4; ++budget) {
        CHECK(prefix_vs_masked<float>(cfg, budget, 10 + budget) < 1e-5);
        CHECK(prefix_vs_masked<double>(cfg, budget, 10 + budget) < 1e-10);
    }
}

TEST_CASE("full budget matches the path without dropping") {
    const BackboneConfig cfg = tiny_config();
    CHECK(prefix_vs_masked<double>(cfg, cfg.latents_per_group, 3) == 0.0);
}

TEST_CASE("dropped latents receive exactly zero gradient on the masked path") {
    const BackboneConfig cfg = tiny_config();
    Model<double> model(cfg, 4);
    std::mt19937_64 rng(5);
    randomize_parameters(model.params(), rng, 0.2);
    const auto batch = random_batch<double>(cfg, 2, 2, rng);
    ForwardOptions masked;
    masked.latent_path = LatentPath::masked_full;
    Graph<double> g;
    Var out = model.forward(g, batch, masked);
    const Mat<double> target = random_matrix<double>(g.value(out).rows(), g.value(out).cols(), rng);
    g.backward(g.masked_mse(out, target, Mat<double>::Ones(target.rows(), target.cols()), cfg.num_tokens()));
    const Mat<double>& grad = model.params().get("latents").grad;
    CHECK(grad.topRows(2).cwiseAbs().maxCoeff() > 0.0);
    CHECK(grad.bottomRows(2).cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("output shape is preserved for every budget and token count") {
    for (int image : {8, 16}) {
        BackboneConfig cfg = tiny_config();
        cfg.image_size = image;
        Model<float> model(cfg, 1);
        std::mt19937_64 rng(2);
        randomize_parameters(model.params(), rng, 0.1);
        for (int budget = 1; budget <= cfg.latents_per_group; ++budget) {
            Image x(cfg.channels, image, image, 0.5f);
            const Image v = model.velocity(x, 0.3, 1, budget);
            CHECK(v.same_shape(x));
        }
    }
}

// Analytic gradients of the loss w.r.t. every parameter against central
// differences in double precision.
TEST_CASE("model gradients match central finite differences") {
    const BackboneConfig cfg = tiny_config();
    CHECK(cfg.num_tokens() == 16);
    Model<double> model(cfg, 21);
    std::mt19937_64 rng(22);
    randomize_parameters(model.params(), rng, 0.3);
    auto batch = random_batch<double>(cfg, 2, cfg.latents_per_group, rng);
    batch.labels = {1, -1};
    const Mat<double> target = random_matrix<double>(batch.patches.rows(), batch.patches.cols(), rng);
    const Mat<double> mask = Mat<double>::Ones(target.rows(), target.cols());

    const auto loss = [&](bool record) {
        Graph<double> g(record);
        Var l = g.masked_mse(model.forward(g, batch), target, mask, cfg.num_tokens());
        if (record) g.backward(l);
        return g.value(l)(0, 0);
    };
    model.params().zero_grad();
    loss(true);
    double worst = 0;
    const double h = 1e-4;
    for (auto& [name, p] : model.params().all()) {
        for (Index i = 0; i < p.value.size(); ++i) {
            const double orig = p.value.data()[i];
            const auto at = [&](double x) {
                p.value.data()[i] = x;
                return loss(false);
            };
            const double numeric = (8 * (at(orig + h) - at(orig - h)) - (at(orig + 2 * h) - at(orig - 2 * h))) / (12 * h);
            p.value.data()[i] = orig;
            const double analytic = p.grad.data()[i];
            const double rel = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6});
            if (rel > worst) worst = rel;
        }
    }
    MESSAGE("max relative gradient error: " << worst);
    CHECK(worst < 1e-4);
}

TEST_CASE("jointly permuting class embeddings and labels leaves the loss unchanged") {
    const BackboneConfig cfg = tiny_config();
    Model<double> model(cfg, 31);
    std::mt19937_64 rng(32);
    randomize_parameters(model.params(), rng, 0.2);
    auto batch = random_batch<double>(cfg, 4, 3, rng);
    batch.labels = {0, 1, 2, 3};
    const Mat<double> before = model.predict(batch);

    const std::vector<int> perm = {2, 0, 3, 1};
    Mat<double>& table = model.params().get("y_embed.table").value;
    const Mat<double> old = table;
    for (int c = 0; c < 4; ++c) table.row(perm[c]) = old.row(c);
    for (auto& y : batch.labels) y = perm[y];
    CHECK(model.predict(batch) == before);
}

TEST_CASE("random-subset dropping keeps the structural invariants") {
    const BackboneConfig cfg = tiny_config();
    Model<float> model(cfg, 41);
    std::mt19937_64 rng(42);
    const auto idx = retained_indices(DropStrategy::random, cfg.latents_per_group, Budget{2}, &rng);
    CHECK(idx.size() == 2);
    CHECK(std::is_sorted(idx.begin(), idx.end()));
    ForwardOptions opts;
    opts.retained = idx;
    const auto batch = random_batch<float>(cfg, 2, 2, rng);
    CHECK(model.predict(batch, opts).cwiseAbs().maxCoeff() == 0.0f);
    randomize_parameters(model.params(), rng, 0.2);
    const Mat<float> v = model.predict(batch, opts);
    CHECK(v.rows() == batch.patches.rows());
    CHECK(v.allFinite());
}
