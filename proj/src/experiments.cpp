#include "elit/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

#include "elit/attention_map.hpp"
#include "elit/cost_model.hpp"

namespace elit {

double median_of(std::vector<double> v) {
    if (v.empty()) throw std::invalid_argument("median_of: empty");
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace {

TrainingConfig desk_training(std::int64_t steps) {
    TrainingConfig t;
    t.steps = steps;
    t.batch_size = 32;
    t.optim.lr = 1e-3;
    t.optim.ema_decay = 0.999;
    return t;
}

void say(const ProgressFn& p, const std::string& s) {
    if (p) p(s);
}

} // namespace

ElasticTrendConfig ElasticTrendConfig::desk() {
    ElasticTrendConfig c;
    BackboneConfig& b = c.backbone;
    b.width = 32;
    b.heads = 4;
    b.blocks_in = 0;
    b.blocks_core = 3;
    b.blocks_out = 0;
    b.image_size = 16;
    b.patch_size = 2;
    b.num_classes = 8;
    b.group_rows = b.group_cols = 2;
    b.latents_per_group = 8;
    b.time_freq_dim = 64;
    c.budget = {1, 8};
    c.training = desk_training(5000);
    c.dataset.image_size = 16;
    c.dataset.num_classes = 8;
    c.dataset.samples_per_class = 96;
    c.dataset.seed = 1;
    c.eval_budgets = {1, 2, 3, 4, 5, 6, 7, 8};
    c.monotone_budgets = {1, 2, 4, 8};
    return c;
}

ElasticTrendResult run_elastic_trend(const ElasticTrendConfig& cfg, const ProgressFn& progress) {
    cfg.backbone.validate();
    cfg.budget.validate(cfg.backbone.latents_per_group);
    for (int j : cfg.eval_budgets)
        if (j < cfg.budget.j_min || j > cfg.budget.j_max) throw ConfigError("eval budgets must lie in the trained range");
    auto [train, val] = split_validation(make_dataset(cfg.dataset), static_cast<size_t>(cfg.validation_samples));
    const EvalSet es = make_eval_set(val, cfg.backbone.patch_size, cfg.eval_seed, cfg.training.timesteps);

    ElasticTrendResult r;
    r.budgets = cfg.eval_budgets;
    for (int j : r.budgets) r.flops.push_back(cost_breakdown(cfg.backbone, cfg.backbone.num_tokens(), j).total);
    for (std::uint64_t seed : cfg.seeds) {
        TrainingConfig tc = cfg.training;
        tc.seed = seed;
        TrainState st(cfg.backbone, tc, cfg.budget);
        train_loop(st, train);
        std::vector<double> row;
        for (int j : r.budgets) row.push_back(evaluate_loss(st.ema, es, j));
        std::string line = "seed " + std::to_string(seed) + ":";
        for (size_t k = 0; k < row.size(); ++k) line += " J" + std::to_string(r.budgets[k]) + "=" + std::to_string(row[k]);
        say(progress, line);
        r.loss.push_back(std::move(row));
    }
    for (size_t k = 0; k < r.budgets.size(); ++k) {
        std::vector<double> col;
        for (const auto& row : r.loss) col.push_back(row[k]);
        r.median.push_back(median_of(col));
    }
    r.monotone_budgets = cfg.monotone_budgets.empty() ? cfg.eval_budgets : cfg.monotone_budgets;
    r.non_increasing = true;
    double prev = std::numeric_limits<double>::infinity();
    for (int j : r.monotone_budgets) {
        const auto it = std::find(r.budgets.begin(), r.budgets.end(), j);
        if (it == r.budgets.end()) throw ConfigError("monotone budgets must be evaluated budgets");
        const double m = r.median[static_cast<size_t>(it - r.budgets.begin())];
        if (m > prev) r.non_increasing = false;
        prev = m;
    }
    std::vector<double> js(r.budgets.begin(), r.budgets.end());
    r.spearman = spearman(r.median, js);
    return r;
}

PaddedProbeConfig PaddedProbeConfig::desk() {
    PaddedProbeConfig c;
    c.dataset.image_size = 8;
    c.dataset.num_classes = 8;
    c.dataset.samples_per_class = 96;
    c.dataset.seed = 1;
    c.training = desk_training(4000);
    return c;
}

std::vector<ProbeArm> padded_probe_arms(const PaddedProbeConfig& cfg) {
    PaddedVariantSpec pad{cfg.pad_factor, 0.0f};
    pad.validate();
    BackboneConfig base;
    base.width = cfg.width;
    base.heads = cfg.heads;
    base.blocks_in = cfg.blocks_in;
    base.blocks_core = cfg.blocks_core;
    base.blocks_out = cfg.blocks_out;
    base.channels = cfg.dataset.channels;
    base.num_classes = cfg.dataset.num_classes;
    base.group_rows = base.group_cols = 1;
    base.latents_per_group = cfg.latents;
    // absolute positions let the model tell real from padded tokens without rotary phases
    base.use_rope = false;
    base.use_abs_pos = true;
    base.time_freq_dim = 64;

    auto arm = [&](const std::string& name, bool elit, bool padded, int patch) {
        ProbeArm a;
        a.name = name;
        a.padded = padded;
        a.backbone = base;
        a.backbone.latent_interface = elit;
        a.backbone.patch_size = patch;
        a.backbone.image_size = cfg.dataset.image_size * (padded ? pad.side_factor() : 1);
        a.backbone.validate();
        a.tokens = a.backbone.num_tokens();
        a.flops = cost_breakdown(a.backbone, a.tokens, elit ? cfg.latents : 0).total;
        return a;
    };
    return {arm("dit_small", false, false, cfg.small_patch), arm("dit_padded", false, true, cfg.small_patch),
            arm("elit_padded", true, true, cfg.small_patch), arm("elit_large", true, false, cfg.large_patch)};
}

const ProbeArm& PaddedProbeResult::arm(const std::string& name) const {
    for (const auto& a : arms)
        if (a.name == name) return a;
    throw std::out_of_range("no probe arm " + name);
}

PaddedProbeResult run_padded_probe(const PaddedProbeConfig& cfg, const ProgressFn& progress) {
    PaddedProbeResult r;
    r.arms = padded_probe_arms(cfg);
    auto [train, val] = split_validation(make_dataset(cfg.dataset), static_cast<size_t>(cfg.validation_samples));
    const PaddedVariantSpec pad{cfg.pad_factor, 0.0f};
    const BudgetSpec budget{cfg.latents, cfg.latents};

    for (ProbeArm& a : r.arms) {
        const int patch = a.backbone.patch_size;
        PaddedDataset ptrain, pval;
        if (a.padded) {
            ptrain = make_padded_variant(train, pad, patch);
            pval = make_padded_variant(val, pad, patch);
        }
        const Dataset& tr = a.padded ? ptrain.data : train;
        const std::vector<bool>* mask = a.padded ? &ptrain.token_mask : nullptr;
        const EvalSet es = make_eval_set(a.padded ? pval.data : val, patch, cfg.eval_seed, cfg.training.timesteps, mask);
        for (std::uint64_t seed : cfg.seeds) {
            TrainingConfig tc = cfg.training;
            tc.seed = seed;
            TrainState st(a.backbone, tc, budget);
            TrainLoopOptions opts;
            opts.token_mask = mask;
            train_loop(st, tr, opts);
            const int j = a.backbone.latent_interface ? cfg.latents : 0;
            const double loss = evaluate_loss(st.ema, es, j);
            a.loss.push_back(loss);
            say(progress, a.name + " seed " + std::to_string(seed) + ": val loss " + std::to_string(loss));
            if (a.name == "elit_padded") {
                const Heatmap h = mean_read_attention(st.ema, es, j);
                const auto [real, padv] = masked_means(h, ptrain.token_mask);
                r.attn_real.push_back(real);
                r.attn_pad.push_back(padv);
            }
        }
        a.median = median_of(a.loss);
    }
    const ProbeArm& ds = r.arm("dit_small");
    r.elit_ratio = r.arm("elit_padded").median / r.arm("elit_large").median;
    r.hard_gate = std::abs(r.elit_ratio - 1.0) <= cfg.gate_tolerance;
    r.dit_gain = ds.median - r.arm("dit_padded").median;
    r.dit_noise = *std::max_element(ds.loss.begin(), ds.loss.end()) - *std::min_element(ds.loss.begin(), ds.loss.end());
    r.soft_check = r.dit_gain <= r.dit_noise;
    return r;
}

void write_trend_csv(std::ostream& os, const ElasticTrendResult& r) {
    os << "j_tilde,total_flops,median_val_loss";
    for (size_t s = 0; s < r.loss.size(); ++s) os << ",val_loss_seed" << s;
    os << "\n";
    os.precision(9);
    for (size_t k = 0; k < r.budgets.size(); ++k) {
        os << r.budgets[k] << "," << r.flops[k] << "," << r.median[k];
        for (const auto& row : r.loss) os << "," << row[k];
        os << "\n";
    }
}

void write_probe_csv(std::ostream& os, const PaddedProbeResult& r, const std::vector<std::uint64_t>& seeds) {
    os << "arm,tokens,total_flops,seed,val_loss\n";
    os.precision(9);
    for (const auto& a : r.arms)
        for (size_t s = 0; s < a.loss.size(); ++s)
            os << a.name << "," << a.tokens << "," << a.flops << "," << seeds.at(s) << "," << a.loss[s] << "\n";
}

} // namespace elit
