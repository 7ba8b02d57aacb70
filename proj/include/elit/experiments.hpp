#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "elit/config.hpp"
#include "elit/dataset.hpp"
#include "elit/train.hpp"

namespace elit {

using ProgressFn = std::function<void(const std::string&)>;

// Multi-budget training followed by paired validation, repeated over
// seeds. The rank correlation uses every evaluated budget; monotonicity is
// checked on the doubling grid, since past a few latents per group the toy
// data leaves the curve flat to within training noise.
struct ElasticTrendConfig {
    BackboneConfig backbone;
    BudgetSpec budget;
    TrainingConfig training;
    ToyDatasetSpec dataset;
    int validation_samples = 256;
    std::vector<int> eval_budgets;     // all budgets to evaluate
    std::vector<int> monotone_budgets; // subset whose medians must not increase
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::uint64_t eval_seed = 1234;

    // Desk-scale defaults: core-only stack, 4 groups of 16 tokens, J = 8.
    static ElasticTrendConfig desk();
};

struct ElasticTrendResult {
    std::vector<int> budgets;
    std::vector<std::vector<double>> loss; // [seed][budget], EMA weights
    std::vector<double> median;            // per budget
    std::vector<std::uint64_t> flops;
    std::vector<int> monotone_budgets;
    double spearman = 0;        // median loss vs budget, all budgets
    bool non_increasing = false; // on monotone_budgets
};

ElasticTrendResult run_elastic_trend(const ElasticTrendConfig& cfg, const ProgressFn& progress = {});

// Four-model padding experiment. Base images are small; the padded arms put
// them in the top-left of a canvas pad_factor times larger in token count
// and train without loss on padded tokens.
struct PaddedProbeConfig {
    ToyDatasetSpec dataset;
    int validation_samples = 256;
    int pad_factor = 4;
    int width = 64;
    int heads = 4;
    int blocks_in = 1;
    int blocks_core = 2;
    int blocks_out = 1;
    int small_patch = 2; // DiT small-token and both padded arms
    int large_patch = 1; // ELIT large-token: same token count as the padded canvas
    int latents = 16;    // one group
    TrainingConfig training;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    std::uint64_t eval_seed = 1234;
    double gate_tolerance = 0.10;

    static PaddedProbeConfig desk();
};

struct ProbeArm {
    std::string name;
    BackboneConfig backbone;
    bool padded = false;
    int tokens = 0;
    std::uint64_t flops = 0;
    std::vector<double> loss; // per seed
    double median = 0;
};

struct PaddedProbeResult {
    std::vector<ProbeArm> arms; // dit_small, dit_padded, elit_padded, elit_large
    double elit_ratio = 0;      // median(elit_padded) / median(elit_large)
    bool hard_gate = false;     // |elit_ratio - 1| <= gate_tolerance
    double dit_gain = 0;        // median(dit_small) - median(dit_padded); > 0 means padding helped
    double dit_noise = 0;       // seed range of dit_small
    bool soft_check = false;    // dit_gain <= dit_noise
    // Read attention of the ELIT padded arm: mean score per real and per padded token
    std::vector<double> attn_real;
    std::vector<double> attn_pad;

    const ProbeArm& arm(const std::string& name) const;
};

std::vector<ProbeArm> padded_probe_arms(const PaddedProbeConfig& cfg);
PaddedProbeResult run_padded_probe(const PaddedProbeConfig& cfg, const ProgressFn& progress = {});

void write_trend_csv(std::ostream& os, const ElasticTrendResult& r);
void write_probe_csv(std::ostream& os, const PaddedProbeResult& r, const std::vector<std::uint64_t>& seeds);

double median_of(std::vector<double> v);

} // namespace elit
