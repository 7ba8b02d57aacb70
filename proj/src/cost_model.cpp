#include "elit/cost_model.hpp"

#include <map>
#include <ostream>
#include <random>
#include <set>
#include <stdexcept>

#include "elit/backbone.hpp"

namespace elit {

CostBreakdown cost_breakdown(const CostShape& s) {
    if (s.tokens < 0 || s.width < 0 || s.groups < 1 || s.j_tilde < 0)
        throw std::invalid_argument("cost_breakdown: negative size");
    using U = std::uint64_t;
    const U n = static_cast<U>(s.tokens);
    const U d = static_cast<U>(s.width);
    const U r = static_cast<U>(s.mlp_ratio);
    const U jt = static_cast<U>(s.j_tilde);
    const U k = jt * static_cast<U>(s.groups);

    CostBreakdown c;
    c.spatial = {8 * n * d * d, 2 * n * n * d, 4 * r * n * d * d};
    c.spatial_blocks = s.spatial_blocks;
    if (s.latent_interface) {
        c.latent = {8 * k * d * d, 2 * k * k * d, 4 * r * k * d * d};
        c.read = {d * d * (4 * n + 4 * k), 2 * jt * n * d, 4 * k * d * d};
        c.write = {d * d * (4 * n + 4 * k), 2 * jt * n * d, 4 * n * d * d};
        c.latent_blocks = s.latent_blocks;
        c.interface_layers = 1;
    }
    c.total = static_cast<U>(c.spatial_blocks) * c.spatial.total() + static_cast<U>(c.latent_blocks) * c.latent.total() +
              static_cast<U>(c.interface_layers) * (c.read.total() + c.write.total());
    return c;
}

CostBreakdown cost_breakdown(const BackboneConfig& cfg, std::int64_t tokens, std::int64_t j_tilde) {
    CostShape s;
    s.tokens = tokens;
    s.width = cfg.width;
    s.groups = cfg.latent_interface ? cfg.num_groups() : 1;
    s.j_tilde = j_tilde;
    s.mlp_ratio = cfg.mlp_ratio;
    s.spatial_blocks = cfg.spatial_blocks();
    s.latent_blocks = cfg.latent_blocks();
    s.latent_interface = cfg.latent_interface;
    return cost_breakdown(s);
}

namespace {

std::uint64_t units(const OpCounter::Entry& e) { return 2 * e.weight_macs + e.activation_macs; }

void assign_term(LayerCost& lc, Term term, std::uint64_t v) {
    switch (term) {
    case Term::attn_proj: lc.attn_proj = v; break;
    case Term::attn_mat: lc.attn_mat = v; break;
    case Term::ff: lc.ff = v; break;
    case Term::other: throw std::logic_error("op_count_oracle: modeled site with an uncategorized term");
    }
}

} // namespace

CostBreakdown op_count_oracle(const BackboneConfig& cfg, std::int64_t tokens, std::int64_t j_tilde) {
    if (tokens != cfg.num_tokens()) throw std::invalid_argument("op_count_oracle: tokens must match the config");
    Model<float> model(cfg, 0);
    std::mt19937_64 rng(1);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    ModelBatch<float> batch;
    batch.patches.resize(cfg.num_tokens(), cfg.patch_dim());
    for (Index i = 0; i < batch.patches.size(); ++i) batch.patches.data()[i] = normal(rng);
    batch.t = {0.5};
    batch.labels = {0};
    batch.budget = cfg.latent_interface ? static_cast<int>(j_tilde) : 1;

    OpCounter counter;
    Graph<float> g(false, &counter);
    model.forward(g, batch);

    // per (site, term): value of every layer instance
    std::map<std::pair<Site, Term>, std::map<int, std::uint64_t>> per_layer;
    CostBreakdown c;
    for (const auto& [key, entry] : counter.entries()) {
        const auto [site, term, layer] = key;
        if (site == Site::uncategorized) throw std::logic_error("op_count_oracle: uncategorized matrix product");
        if (site == Site::unmodeled) {
            c.unmodeled += units(entry);
            continue;
        }
        per_layer[{site, term}][layer] += units(entry);
    }
    std::map<Site, std::set<int>> layers_seen;
    for (const auto& [st, layers] : per_layer) {
        const auto [site, term] = st;
        const std::uint64_t first = layers.begin()->second;
        for (const auto& [layer, v] : layers) {
            if (v != first) throw std::logic_error("op_count_oracle: blocks of one kind disagree");
            layers_seen[site].insert(layer);
        }
        LayerCost* lc = nullptr;
        switch (site) {
        case Site::spatial_block: lc = &c.spatial; break;
        case Site::latent_block: lc = &c.latent; break;
        case Site::read: lc = &c.read; break;
        case Site::write: lc = &c.write; break;
        default: throw std::logic_error("op_count_oracle: unexpected site");
        }
        assign_term(*lc, term, first);
    }
    c.spatial_blocks = static_cast<int>(layers_seen[Site::spatial_block].size());
    c.latent_blocks = static_cast<int>(layers_seen[Site::latent_block].size());
    c.interface_layers = layers_seen.count(Site::read) ? 1 : 0;
    using U = std::uint64_t;
    c.total = U(c.spatial_blocks) * c.spatial.total() + U(c.latent_blocks) * c.latent.total() +
              U(c.interface_layers) * (c.read.total() + c.write.total());
    return c;
}

BackboneConfig xl_reference_config() {
    BackboneConfig c;
    c.width = 1152;
    c.heads = 16;
    c.blocks_in = 4;
    c.blocks_core = 20;
    c.blocks_out = 4;
    c.patch_size = 2;
    c.image_size = 64;
    c.channels = 4;
    c.num_classes = 1000;
    c.group_rows = 4;
    c.group_cols = 4;
    c.latents_per_group = 64;
    return c;
}

std::vector<ReferenceTradeoff> reference_tradeoffs() {
    return {
        {"ELIT FID", {11.1, 12.5, 831, 386, MetricDirection::lower_better}, 0.52},
        {"DiT FID", {18.8, 22.5, 806, 377, MetricDirection::lower_better}, 0.56},
        {"ELIT IS", {80.0, 75.7, 831, 386, MetricDirection::higher_better}, 0.49},
    };
}

double rho(const TradeoffInput& in) {
    if (!(in.metric_high > 0 && in.metric_low > 0 && in.flops_high > 0 && in.flops_low > 0))
        throw std::invalid_argument("rho: all inputs must be positive");
    if (!(in.flops_high > in.flops_low)) throw std::invalid_argument("rho: flops_high must exceed flops_low");
    const double metric_ratio =
        in.direction == MetricDirection::lower_better ? in.metric_low / in.metric_high : in.metric_high / in.metric_low;
    return metric_ratio / (in.flops_high / in.flops_low);
}

std::vector<BudgetCostRow> budget_cost_curve(const BackboneConfig& cfg, std::int64_t tokens) {
    std::vector<BudgetCostRow> rows;
    for (int j = 1; j <= cfg.latents_per_group; ++j) rows.push_back({j, cost_breakdown(cfg, tokens, j), 0.0});
    const double max_total = static_cast<double>(rows.back().cost.total);
    for (auto& r : rows) r.relative_to_max = static_cast<double>(r.cost.total) / max_total;
    return rows;
}

void write_cost_csv(std::ostream& os, const std::vector<BudgetCostRow>& rows) {
    os << "j_tilde,component,flops,total,relative_to_max\n";
    for (const auto& r : rows) {
        const auto& c = r.cost;
        const auto emit = [&](const char* name, std::uint64_t per_layer, int count) {
            os << r.j_tilde << ',' << name << ',' << per_layer * static_cast<std::uint64_t>(count) << ',' << c.total
               << ',' << r.relative_to_max << '\n';
        };
        emit("spatial_attn_proj", c.spatial.attn_proj, c.spatial_blocks);
        emit("spatial_attn_mat", c.spatial.attn_mat, c.spatial_blocks);
        emit("spatial_ff", c.spatial.ff, c.spatial_blocks);
        emit("latent_attn_proj", c.latent.attn_proj, c.latent_blocks);
        emit("latent_attn_mat", c.latent.attn_mat, c.latent_blocks);
        emit("latent_ff", c.latent.ff, c.latent_blocks);
        emit("read_attn_proj", c.read.attn_proj, c.interface_layers);
        emit("read_attn_mat", c.read.attn_mat, c.interface_layers);
        emit("read_ff", c.read.ff, c.interface_layers);
        emit("write_attn_proj", c.write.attn_proj, c.interface_layers);
        emit("write_attn_mat", c.write.attn_mat, c.interface_layers);
        emit("write_ff", c.write.ff, c.interface_layers);
    }
}

} // namespace elit
