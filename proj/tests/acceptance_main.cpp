// Acceptance suite: one PASS/FAIL line per criterion. Tolerances are fixed
// here. Usage: elit_acceptance [criterion numbers...] (default: all).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "elit/checkpoint.hpp"
#include "elit/cost_model.hpp"
#include "elit/experiments.hpp"
#include "elit/guidance.hpp"
#include "elit/latent_interface.hpp"
#include "test_support.hpp"

using namespace elit;
using namespace elit::testing;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double a) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

// Random architecture for equivalence checks: d in {8, 16}, N in {16, 64},
// G in {1, 4, 16} where the grid allows it.
BackboneConfig random_arch(std::mt19937_64& rng) {
    BackboneConfig c;
    c.width = (rng() % 2) ? 16 : 8;
    c.heads = 2;
    c.blocks_in = static_cast<int>(rng() % 2);
    c.blocks_core = 1 + static_cast<int>(rng() % 2);
    c.blocks_out = static_cast<int>(rng() % 2);
    c.patch_size = 2;
    c.image_size = (rng() % 2) ? 16 : 8;
    c.channels = 1 + static_cast<int>(rng() % 3);
    c.num_classes = 3;
    const int g = static_cast<int>(rng() % 3);
    c.group_rows = c.group_cols = g == 0 ? 1 : g == 1 ? 2 : 4;
    c.latents_per_group = 1 + static_cast<int>(rng() % 6);
    c.time_freq_dim = 16;
    c.write_adaln = rng() % 2;
    c.latent_rope = rng() % 2;
    return c;
}

// 1. cost model equals instrumented op counts
Outcome cost_exactness() {
    std::mt19937_64 rng(2024);
    int configs = 0, mismatches = 0;
    const int ds[] = {8, 16};
    const int ns[] = {16, 64, 256};
    const int gs[] = {1, 4, 16};
    for (int trial = 0; trial < 24; ++trial) {
        BackboneConfig c;
        c.width = ds[rng() % 2];
        c.heads = 2;
        const int n = ns[rng() % 3];
        const int side = static_cast<int>(std::lround(std::sqrt(n)));
        c.patch_size = 1 + static_cast<int>(rng() % 2);
        c.image_size = side * c.patch_size;
        const int g = gs[rng() % 3];
        c.group_rows = c.group_cols = static_cast<int>(std::lround(std::sqrt(g)));
        c.latents_per_group = 1 + static_cast<int>(rng() % 8);
        c.blocks_in = static_cast<int>(rng() % 2);
        c.blocks_core = 1 + static_cast<int>(rng() % 2);
        c.blocks_out = static_cast<int>(rng() % 2);
        c.mlp_ratio = 1 + static_cast<int>(rng() % 4);
        c.channels = 1 + static_cast<int>(rng() % 3);
        c.num_classes = 4;
        c.time_freq_dim = 8;
        c.validate();
        const std::int64_t j = 1 + static_cast<std::int64_t>(rng() % c.latents_per_group);
        const CostBreakdown a = cost_breakdown(c, n, j);
        const CostBreakdown o = op_count_oracle(c, n, j);
        bool ok = a.spatial_blocks == o.spatial_blocks && a.latent_blocks == o.latent_blocks && a.read == o.read &&
                  a.write == o.write && a.total == o.total;
        if (o.spatial_blocks > 0) ok = ok && a.spatial == o.spatial;
        if (o.latent_blocks > 0) ok = ok && a.latent == o.latent;
        ++configs;
        if (!ok) ++mismatches;
    }
    // single group: Read score matrix is J x N per head set
    BackboneConfig one;
    one.width = 8;
    one.heads = 2;
    one.blocks_in = one.blocks_core = one.blocks_out = 1;
    one.image_size = 8;
    one.group_rows = one.group_cols = 1;
    one.latents_per_group = 5;
    one.num_classes = 2;
    one.time_freq_dim = 8;
    const auto o1 = op_count_oracle(one, 16, 3);
    const bool g1 = o1.read.attn_mat == 2ULL * 3 * 16 * 8;
    return {mismatches == 0 && g1 && configs >= 20,
            std::to_string(configs) + " random configs, " + std::to_string(mismatches) + " mismatches; G=1 read score " +
                (g1 ? "ok" : "wrong")};
}

// 2. tail-drop prefix forward equals the masked full-latent forward
template <typename T>
double prefix_gap(const BackboneConfig& cfg, int budget, std::uint64_t seed) {
    Model<T> model(cfg, seed);
    std::mt19937_64 rng(seed + 1);
    randomize_parameters(model.params(), rng, 0.25);
    const auto batch = random_batch<T>(cfg, 2, budget, rng);
    ForwardOptions masked;
    masked.latent_path = LatentPath::masked_full;
    return static_cast<double>((model.predict(batch) - model.predict(batch, masked)).cwiseAbs().maxCoeff());
}

Outcome prefix_equivalence() {
    std::mt19937_64 rng(77);
    double wf = 0, wd = 0;
    for (int k = 0; k < 10; ++k) {
        const BackboneConfig cfg = random_arch(rng);
        const int j = 1 + static_cast<int>(rng() % cfg.latents_per_group);
        wf = std::max(wf, prefix_gap<float>(cfg, j, 100 + k));
        wd = std::max(wd, prefix_gap<double>(cfg, j, 100 + k));
    }
    return {wf < 1e-5 && wd < 1e-10, "10 pairs, max diff float " + fmt("%.2e", wf) + ", double " + fmt("%.2e", wd)};
}

// 3. grouped cross-attention equals the block-diagonal masked dense version
template <typename T>
double grouped_gap(const BackboneConfig& cfg, int budget, LatentPath path, std::uint64_t seed) {
    Model<T> model(cfg, seed);
    std::mt19937_64 rng(seed + 1);
    randomize_parameters(model.params(), rng, 0.25);
    const auto batch = random_batch<T>(cfg, 2, budget, rng);
    ForwardOptions a, b;
    a.latent_path = b.latent_path = path;
    b.cross = CrossAttentionImpl::dense_masked;
    return static_cast<double>((model.predict(batch, a) - model.predict(batch, b)).cwiseAbs().maxCoeff());
}

Outcome grouped_equivalence() {
    std::mt19937_64 rng(91);
    double wf = 0, wd = 0;
    for (int k = 0; k < 10; ++k) {
        const BackboneConfig cfg = random_arch(rng);
        const int j = 1 + static_cast<int>(rng() % cfg.latents_per_group);
        for (LatentPath p : {LatentPath::prefix, LatentPath::masked_full}) {
            wf = std::max(wf, grouped_gap<float>(cfg, j, p, 200 + k));
            wd = std::max(wd, grouped_gap<double>(cfg, j, p, 200 + k));
        }
    }
    return {wf < 1e-5 && wd < 1e-10, "10 configs x 2 paths, max diff float " + fmt("%.2e", wf) + ", double " + fmt("%.2e", wd)};
}

// 4. zero velocity at init; Read and Write are identities at init
Outcome identity_at_init() {
    bool zero = true;
    std::mt19937_64 rng(5);
    for (int k = 0; k < 6; ++k) {
        BackboneConfig cfg = random_arch(rng);
        cfg.latent_interface = k % 3 != 2;
        Model<float> m(cfg, 30 + k);
        for (int j : {1, cfg.latents_per_group}) {
            const auto batch = random_batch<float>(cfg, 2, j, rng);
            zero = zero && m.predict(batch).cwiseAbs().maxCoeff() == 0.0f;
        }
    }

    const BackboneConfig cfg = tiny_config();
    ParameterStore<double> store;
    std::mt19937_64 init(1);
    WriteLayer<double> write(store, "write", cfg, init);
    ReadLayer<double> read(store, "read", cfg, init);
    InterfaceShape shape;
    shape.samples = 1;
    shape.groups = 4;
    shape.tokens_per_group = 4;
    shape.latent_rows_per_group = 3;
    shape.visible_latents = 3;
    Graph<double> g(false);
    const Mat<double> lat = random_matrix<double>(12, 8, rng);
    const Mat<double> sp = random_matrix<double>(16, 8, rng);
    const Mat<double> cond = random_matrix<double>(1, 8, rng);
    const Var w = write.forward(g, g.input(lat), g.input(sp), g.input(cond), shape);
    const bool write_id = g.value(w) == sp;
    // Read at init: its gates are zero, so the latents pass through unchanged
    const Var r = read.forward(g, g.input(lat), g.input(sp), g.input(cond), shape);
    const bool read_id = g.value(r) == lat;
    return {zero && write_id && read_id, std::string("zero velocity ") + (zero ? "exact" : "NOT exact") + ", Write " +
                                             (write_id ? "identity" : "not identity") + ", Read " +
                                             (read_id ? "identity" : "not identity")};
}

// 5. whole-model finite-difference gradient check
Outcome gradient_check() {
    const BackboneConfig cfg = tiny_config();
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
    size_t count = 0;
    const double h = 1e-4;
    for (auto& [name, p] : model.params().all()) {
        for (Index i = 0; i < p.value.size(); ++i, ++count) {
            const double orig = p.value.data()[i];
            const auto at = [&](double x) {
                p.value.data()[i] = x;
                return loss(false);
            };
            // five-point central difference
            const double numeric = (8 * (at(orig + h) - at(orig - h)) - (at(orig + 2 * h) - at(orig - 2 * h))) / (12 * h);
            p.value.data()[i] = orig;
            const double analytic = p.grad.data()[i];
            worst = std::max(worst, std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-6}));
        }
    }
    return {worst < 1e-4, std::to_string(count) + " parameters (d=8, blocks 1-1-1, N=16), max rel error " + fmt("%.2e", worst)};
}

// 6. budget sampler uniformity and determinism
Outcome sampler_uniformity() {
    const BudgetSpec spec{1, 16};
    const int n = 100000;
    std::vector<int> counts(17, 0);
    Rng rng(123);
    std::vector<int> first;
    for (int i = 0; i < n; ++i) {
        const int j = sample_budget(spec, rng).j_tilde;
        ++counts[static_cast<size_t>(j)];
        if (i < 1000) first.push_back(j);
    }
    const double expected = n / 16.0;
    double chi2 = 0;
    for (int j = 1; j <= 16; ++j) chi2 += (counts[static_cast<size_t>(j)] - expected) * (counts[static_cast<size_t>(j)] - expected) / expected;
    Rng again(123);
    bool same = true;
    for (int i = 0; i < 1000; ++i) same = same && sample_budget(spec, again).j_tilde == first[static_cast<size_t>(i)];
    // chi-square critical value at p = 0.01 with 15 degrees of freedom
    const double critical = 30.578;
    return {chi2 < critical && same && counts[0] == 0,
            "chi2 " + fmt("%.2f", chi2) + " (< 30.578 for p > 0.01), reseeded stream " + (same ? "identical" : "differs")};
}

// 7. rho on the reference tradeoff pairs
Outcome rho_reproduction() {
    bool ok = true;
    std::string d;
    for (const auto& t : reference_tradeoffs()) {
        const double r = rho(t.input);
        ok = ok && std::abs(r - t.printed) <= 0.01;
        d += t.name + " " + fmt("%.3f", r) + " vs " + fmt("%.2f", t.printed) + "; ";
    }
    return {ok, d.substr(0, d.size() - 2)};
}

// 8. CCFG with an auto-selected weak budget costs at most 70% of CFG
Outcome ccfg_cost() {
    const BackboneConfig cfg = xl_reference_config();
    const std::int64_t n = cfg.num_tokens();
    const int jm = cfg.latents_per_group;
    const int jw = select_weak_budget(cfg, n, jm, 0.35);
    const double weak = static_cast<double>(cost_breakdown(cfg, n, jw).total) / cost_breakdown(cfg, n, jm).total;
    const auto cfg_cost = sampling_cost(cfg, n, GuidanceSpec{GuidanceMode::cfg, 1.5, jm, jm}, 50);
    const auto ccfg = sampling_cost(cfg, n, GuidanceSpec{GuidanceMode::ccfg, 1.5, jm, jw}, 50);
    const double ratio = static_cast<double>(ccfg) / static_cast<double>(cfg_cost);
    return {weak <= 0.35 && ratio <= 0.70, "J_weak " + std::to_string(jw) + " of " + std::to_string(jm) +
                                               ", weak pass " + fmt("%.3f", weak) + " of full, CCFG/CFG " +
                                               fmt("%.3f", ratio) + " (saving " + fmt("%.1f", 100 * (1 - ratio)) + "%)"};
}

// 9. validation loss does not increase with the budget
Outcome elastic_trend() {
    const ElasticTrendConfig c = ElasticTrendConfig::desk();
    const ElasticTrendResult r = run_elastic_trend(c, [](const std::string& s) { std::fprintf(stderr, "  [9] %s\n", s.c_str()); });
    std::string d = "median loss";
    for (size_t k = 0; k < r.budgets.size(); ++k) d += " J" + std::to_string(r.budgets[k]) + "=" + fmt("%.5f", r.median[k]);
    d += "; spearman (all budgets) " + fmt("%.3f", r.spearman) + "; J";
    for (size_t k = 0; k < r.monotone_budgets.size(); ++k) d += (k ? "/" : "") + std::to_string(r.monotone_budgets[k]);
    d += r.non_increasing ? " non-increasing" : " NOT non-increasing";
    return {r.non_increasing && r.spearman <= -0.8, d};
}

// 10. padded probe
Outcome padded_probe() {
    const PaddedProbeConfig c = PaddedProbeConfig::desk();
    const PaddedProbeResult r = run_padded_probe(c, [](const std::string& s) { std::fprintf(stderr, "  [10] %s\n", s.c_str()); });
    std::string d = "ELIT padded/large " + fmt("%.4f", r.elit_ratio) + " (|x-1| <= 0.10)";
    d += "; DiT small-padded " + fmt("%+.5f", r.dit_gain) + " vs seed range " + fmt("%.5f", r.dit_noise) +
         (r.soft_check ? " (no gain from padding)" : " (padding helped; soft check)");
    d += "; attn real/pad " + fmt("%.4f", median_of(r.attn_real)) + "/" + fmt("%.4f", median_of(r.attn_pad));
    return {r.hard_gate, d};
}

// 11. determinism and checkpoint resume
Outcome determinism() {
    RunConfig c;
    c.backbone = tiny_config();
    c.budget = {1, 4};
    c.dataset.image_size = 8;
    c.dataset.num_classes = 4;
    c.dataset.samples_per_class = 16;
    c.validation_samples = 8;
    c.training.steps = 60;
    c.training.batch_size = 8;
    c.training.optim.lr = 1e-3;
    c.validate();
    const Dataset data = split_validation(make_dataset(c.dataset), 8).first;

    TrainState a(c.backbone, c.training, c.budget), b(c.backbone, c.training, c.budget);
    const auto la = train_loop(a, data), lb = train_loop(b, data);
    bool train_same = la.size() == lb.size();
    for (size_t i = 0; train_same && i < la.size(); ++i) train_same = la[i].same_trajectory(lb[i]);
    train_same = train_same && serialize_checkpoint(c, a) == serialize_checkpoint(c, b);

    const GuidanceSpec g{GuidanceMode::cfg, 1.0, 4, 4};
    const auto sa = generate_samples(a.ema, {0, 1, 2, 3}, g, 10, 9);
    const auto sb = generate_samples(b.ema, {0, 1, 2, 3}, g, 10, 9);
    bool sample_same = true;
    for (size_t i = 0; i < sa.size(); ++i) sample_same = sample_same && sa[i].data == sb[i].data;

    TrainState first(c.backbone, c.training, c.budget);
    for (int i = 0; i < 25; ++i) train_step(first, data);
    const auto path = std::filesystem::temp_directory_path() / "elit_acceptance_resume.elit";
    save_checkpoint(path, c, first);
    LoadedCheckpoint ck = load_checkpoint(path);
    std::filesystem::remove(path);
    const auto rest = train_loop(*ck.state, data);
    bool resume_same = rest.size() == la.size() - 25;
    for (size_t i = 0; resume_same && i < rest.size(); ++i) resume_same = rest[i].same_trajectory(la[25 + i]);
    resume_same = resume_same && serialize_checkpoint(c, *ck.state) == serialize_checkpoint(c, a);
    const auto bytes = serialize_checkpoint(c, first);
    const bool stable = serialize_checkpoint(deserialize_checkpoint(bytes).config, *deserialize_checkpoint(bytes).state) == bytes;

    return {train_same && sample_same && resume_same && stable,
            std::string("train ") + (train_same ? "bit-identical" : "differs") + ", samples " +
                (sample_same ? "bit-identical" : "differ") + ", resume at step 25 " +
                (resume_same ? "reproduces the log" : "diverges") + ", save/load/save " + (stable ? "stable" : "unstable")};
}

} // namespace

int main(int argc, char** argv) {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria = {
        {"cost-model exactness", cost_exactness},
        {"prefix-masking equivalence", prefix_equivalence},
        {"grouped-attention equivalence", grouped_equivalence},
        {"identity at init", identity_at_init},
        {"gradient check", gradient_check},
        {"budget sampler uniformity", sampler_uniformity},
        {"rho reproduction", rho_reproduction},
        {"CCFG cost", ccfg_cost},
        {"elastic quality trend", elastic_trend},
        {"padded probe", padded_probe},
        {"determinism and persistence", determinism},
    };
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    int failed = 0;
    for (size_t k = 0; k < criteria.size(); ++k) {
        const int id = static_cast<int>(k) + 1;
        if (!only.empty() && !only.count(id)) continue;
        const auto start = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = criteria[k].second();
        } catch (const std::exception& e) {
            o = {false, std::string("threw: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::printf("%s %2d %s: %s [%.1fs]\n", o.pass ? "PASS" : "FAIL", id, criteria[k].first.c_str(), o.detail.c_str(), secs);
        std::fflush(stdout);
        if (!o.pass) ++failed;
    }
    return failed == 0 ? 0 : 1;
}
