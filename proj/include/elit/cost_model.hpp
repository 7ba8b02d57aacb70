#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "elit/config.hpp"

namespace elit {

// Costs follow the analytic table's convention: a product against a weight
// matrix counts 2 units per multiply-accumulate, a product between two
// activation matrices (attention scores, attention-weighted values) counts
// 1 unit per multiply-accumulate. With that convention four d x d
// projections of N tokens cost 8 N d^2 and N x N attention costs 2 N^2 d.
struct LayerCost {
    std::uint64_t attn_proj = 0;
    std::uint64_t attn_mat = 0;
    std::uint64_t ff = 0;

    std::uint64_t total() const { return attn_proj + attn_mat + ff; }
    bool operator==(const LayerCost&) const = default;
};

struct CostBreakdown {
    LayerCost spatial; // one spatial block
    LayerCost latent;  // one latent-core block
    LayerCost read;
    LayerCost write;
    int spatial_blocks = 0;
    int latent_blocks = 0;
    int interface_layers = 0; // 1 with a latent interface (one Read, one Write), else 0
    std::uint64_t total = 0;
    // Patch embedding, timestep/class MLPs, adaLN projections and the output
    // layer. Reported by the op-count oracle only.
    std::uint64_t unmodeled = 0;
};

struct CostShape {
    std::int64_t tokens = 0;
    std::int64_t width = 0;
    std::int64_t groups = 1;
    std::int64_t j_tilde = 0;
    int mlp_ratio = 4;
    int spatial_blocks = 0;
    int latent_blocks = 0;
    bool latent_interface = true;
};

CostBreakdown cost_breakdown(const CostShape& shape);
// Groups, width, block split and MLP ratio come from cfg.
CostBreakdown cost_breakdown(const BackboneConfig& cfg, std::int64_t tokens, std::int64_t j_tilde);

// Counts every matrix product of one single-sample forward pass of a model
// built from cfg (tokens must equal cfg.num_tokens()). Throws if a product
// is not attributed to a modeled component or to the unmodeled bucket, or
// if blocks of the same kind disagree.
CostBreakdown op_count_oracle(const BackboneConfig& cfg, std::int64_t tokens, std::int64_t j_tilde);

enum class MetricDirection { lower_better, higher_better };

struct TradeoffInput {
    double metric_high = 0; // metric of the high-compute variant
    double metric_low = 0;  // metric of the low-compute variant
    double flops_high = 0;
    double flops_low = 0;
    MetricDirection direction = MetricDirection::lower_better;
};

// (metric degradation ratio) / (FLOPs reduction ratio).
double rho(const TradeoffInput& in);

struct BudgetCostRow {
    int j_tilde = 0;
    CostBreakdown cost;
    double relative_to_max = 0;
};

// DiT-XL-like reference: d=1152, 16 heads, blocks 4-20-4, 64x64x4 input with
// p=2 (1024 tokens), 4x4 groups of 64 tokens, J=64.
BackboneConfig xl_reference_config();

// Published quality/compute pairs and their printed rho, rounded to 2 digits.
struct ReferenceTradeoff {
    std::string name;
    TradeoffInput input;
    double printed = 0;
};

std::vector<ReferenceTradeoff> reference_tradeoffs();

std::vector<BudgetCostRow> budget_cost_curve(const BackboneConfig& cfg, std::int64_t tokens);

// CSV with header j_tilde,component,flops,total,relative_to_max.
void write_cost_csv(std::ostream& os, const std::vector<BudgetCostRow>& rows);

} // namespace elit
