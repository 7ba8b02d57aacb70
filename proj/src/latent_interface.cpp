#include "elit/latent_interface.hpp"

#include <algorithm>
#include <numeric>

namespace elit {

GroupLayout GroupLayout::from_config(const BackboneConfig& cfg) {
    GroupLayout l;
    l.group_rows = cfg.group_rows;
    l.group_cols = cfg.group_cols;
    l.token_rows = cfg.token_rows();
    l.token_cols = cfg.token_cols();
    l.validate();
    return l;
}

void GroupLayout::validate() const {
    if (group_rows <= 0 || group_cols <= 0 || token_rows <= 0 || token_cols <= 0)
        throw ConfigError("group layout: grid sizes must be positive");
    if (token_rows % group_rows != 0 || token_cols % group_cols != 0)
        throw ConfigError("group layout: token grid " + std::to_string(token_rows) + "x" +
                          std::to_string(token_cols) + " not divisible by group grid " +
                          std::to_string(group_rows) + "x" + std::to_string(group_cols));
}

int GroupLayout::group_of(int token) const {
    const int r = token / token_cols;
    const int c = token % token_cols;
    const int gh = token_rows / group_rows;
    const int gw = token_cols / group_cols;
    return (r / gh) * group_cols + (c / gw);
}

std::vector<Index> GroupLayout::group_major_order() const {
    validate();
    const int gh = token_rows / group_rows;
    const int gw = token_cols / group_cols;
    std::vector<Index> order;
    order.reserve(static_cast<size_t>(tokens()));
    for (int gr = 0; gr < group_rows; ++gr)
        for (int gc = 0; gc < group_cols; ++gc)
            for (int r = 0; r < gh; ++r)
                for (int c = 0; c < gw; ++c) order.push_back(Index(gr * gh + r) * token_cols + gc * gw + c);
    return order;
}

std::vector<Index> GroupLayout::inverse_order() const {
    const auto order = group_major_order();
    std::vector<Index> inv(order.size());
    for (size_t i = 0; i < order.size(); ++i) inv[static_cast<size_t>(order[i])] = static_cast<Index>(i);
    return inv;
}

void BudgetSpec::validate(int latents_per_group) const {
    if (j_min < 1) throw ConfigError("budget.J_min: must be >= 1");
    if (j_min > j_max) throw ConfigError("budget.J_min: must not exceed budget.J_max");
    if (j_max > latents_per_group)
        throw ConfigError("budget.J_max: must not exceed backbone.latents_per_group (" +
                          std::to_string(latents_per_group) + ")");
}

Budget sample_budget(const BudgetSpec& spec, Rng& rng) {
    std::uniform_int_distribution<int> dist(spec.j_min, spec.j_max);
    return Budget{dist(rng)};
}

double retention_probability(const BudgetSpec& spec, int index) {
    const int n = spec.j_max - spec.j_min + 1;
    int kept = 0;
    for (int j = spec.j_min; j <= spec.j_max; ++j) kept += j > index ? 1 : 0;
    return static_cast<double>(kept) / n;
}

std::vector<int> retained_indices(DropStrategy strategy, int latents_per_group, Budget budget, Rng* rng) {
    if (budget.j_tilde < 1 || budget.j_tilde > latents_per_group)
        throw std::out_of_range("budget " + std::to_string(budget.j_tilde) + " outside [1, " +
                                std::to_string(latents_per_group) + "]");
    std::vector<int> idx(static_cast<size_t>(latents_per_group));
    std::iota(idx.begin(), idx.end(), 0);
    if (strategy == DropStrategy::random) {
        if (!rng) throw std::invalid_argument("retained_indices: random strategy needs an rng");
        std::shuffle(idx.begin(), idx.end(), *rng);
    }
    idx.resize(static_cast<size_t>(budget.j_tilde));
    std::sort(idx.begin(), idx.end());
    return idx;
}

template <typename T>
LatentTokens<T> expand_latents(const Mat<T>& shared, const GroupLayout& layout, Budget budget) {
    if (budget.j_tilde < 1 || budget.j_tilde > shared.rows())
        throw std::out_of_range("expand_latents: budget exceeds the shared latent table");
    LatentTokens<T> l;
    l.groups = layout.groups();
    l.per_group = budget.j_tilde;
    l.values.resize(Index(l.groups) * l.per_group, shared.cols());
    for (int g = 0; g < l.groups; ++g) l.values.middleRows(Index(g) * l.per_group, l.per_group) = shared.topRows(l.per_group);
    return l;
}

template <typename T>
GroupedTokens<T> partition_groups(const SpatialTokens<T>& s, const GroupLayout& layout) {
    if (s.rows != layout.token_rows || s.cols != layout.token_cols || s.values.rows() != layout.tokens())
        throw ShapeError("partition_groups: token grid does not match the layout");
    const auto order = layout.group_major_order();
    GroupedTokens<T> out;
    out.groups = layout.groups();
    out.per_group = layout.tokens_per_group();
    out.values.resize(s.values.rows(), s.values.cols());
    for (size_t i = 0; i < order.size(); ++i) out.values.row(static_cast<Index>(i)) = s.values.row(order[i]);
    return out;
}

template <typename T>
SpatialTokens<T> merge_groups(const GroupedTokens<T>& g, const GroupLayout& layout) {
    if (g.groups != layout.groups() || g.values.rows() != layout.tokens())
        throw ShapeError("merge_groups: grouped view does not match the layout");
    const auto order = layout.group_major_order();
    SpatialTokens<T> s;
    s.rows = layout.token_rows;
    s.cols = layout.token_cols;
    s.values.resize(g.values.rows(), g.values.cols());
    for (size_t i = 0; i < order.size(); ++i) s.values.row(order[i]) = g.values.row(static_cast<Index>(i));
    return s;
}

std::vector<Index> drop_tail_rows(int groups, int latents_per_group, int j_tilde) {
    if (j_tilde < 1 || j_tilde > latents_per_group)
        throw std::out_of_range("drop_tail: budget " + std::to_string(j_tilde) + " outside [1, " +
                                std::to_string(latents_per_group) + "]");
    std::vector<Index> rows;
    rows.reserve(static_cast<size_t>(groups) * j_tilde);
    for (int g = 0; g < groups; ++g)
        for (int j = 0; j < j_tilde; ++j) rows.push_back(Index(g) * latents_per_group + j);
    return rows;
}

template <typename T>
LatentTokens<T> drop_tail(const LatentTokens<T>& full, Budget budget) {
    if (full.values.rows() != Index(full.groups) * full.per_group) throw ShapeError("drop_tail: inconsistent latents");
    const auto rows = drop_tail_rows(full.groups, full.per_group, budget.j_tilde);
    LatentTokens<T> out;
    out.groups = full.groups;
    out.per_group = budget.j_tilde;
    out.values.resize(static_cast<Index>(rows.size()), full.values.cols());
    for (size_t i = 0; i < rows.size(); ++i) out.values.row(static_cast<Index>(i)) = full.values.row(rows[i]);
    return out;
}

AttentionLayout cross_attention_layout(Index samples, int groups, int q_per_group, int k_per_group, int k_visible,
                                       CrossAttentionImpl impl) {
    if (k_visible < 1 || k_visible > k_per_group) throw std::out_of_range("cross_attention_layout: visible keys");
    AttentionLayout layout;
    const bool tail_hidden = k_visible < k_per_group;
    if (impl == CrossAttentionImpl::grouped) {
        KeyMask mask;
        if (tail_hidden) {
            mask = KeyMask::Constant(q_per_group, k_per_group, false);
            mask.leftCols(k_visible).setConstant(true);
        }
        for (Index b = 0; b < samples; ++b) {
            for (int g = 0; g < groups; ++g) {
                const Index blk = b * groups + g;
                layout.segments.push_back({blk * q_per_group, q_per_group, blk * k_per_group, k_per_group});
                if (tail_hidden) layout.masks.push_back(mask);
            }
        }
        return layout;
    }
    KeyMask mask = KeyMask::Constant(Index(groups) * q_per_group, Index(groups) * k_per_group, false);
    for (int g = 0; g < groups; ++g)
        mask.block(Index(g) * q_per_group, Index(g) * k_per_group, q_per_group, k_visible).setConstant(true);
    for (Index b = 0; b < samples; ++b) {
        layout.segments.push_back(
            {b * groups * q_per_group, Index(groups) * q_per_group, b * groups * k_per_group, Index(groups) * k_per_group});
        layout.masks.push_back(mask);
    }
    return layout;
}

AttentionLayout latent_self_attention_layout(Index samples, int groups, int rows_per_group, int visible) {
    if (visible < 1 || visible > rows_per_group) throw std::out_of_range("latent_self_attention_layout: visible");
    AttentionLayout layout;
    const Index n = Index(groups) * rows_per_group;
    KeyMask mask;
    if (visible < rows_per_group) {
        mask = KeyMask::Constant(n, n, false);
        for (Index c = 0; c < n; ++c)
            if (c % rows_per_group < visible) mask.col(c).setConstant(true);
    }
    for (Index b = 0; b < samples; ++b) {
        layout.segments.push_back({b * n, n, b * n, n});
        if (visible < rows_per_group) layout.masks.push_back(mask);
    }
    return layout;
}

template <typename T>
ReadLayer<T>::ReadLayer(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& cfg,
                        std::mt19937_64& rng)
    : heads_(cfg.heads), eps_(static_cast<T>(cfg.norm_eps)) {
    const int d = cfg.width;
    adaln_ = AdaLN<T>::make(store, prefix + ".adaln", d, 6, rng);
    q_ = Linear<T>::make(store, prefix + ".attn.q", d, d, Init::trunc_normal, cfg.init_std, rng);
    kv_ = Linear<T>::make(store, prefix + ".attn.kv", d, 2 * d, Init::trunc_normal, cfg.init_std, rng);
    qk_ = QkNorm<T>::make(store, prefix + ".attn", cfg.head_dim());
    out_ = Linear<T>::make(store, prefix + ".attn.out", d, d, Init::trunc_normal, cfg.init_std, rng);
    mlp_ = Mlp<T>::make(store, prefix + ".mlp", d, d, cfg.init_std, false, rng);
}

template <typename T>
Var ReadLayer<T>::forward(Graph<T>& g, Var latents, Var spatial, Var cond, const InterfaceShape& shape,
                          Var* attention) const {
    const Index width = g.value(latents).cols();
    const Index lrows = Index(shape.groups) * shape.latent_rows_per_group;
    if (g.value(latents).rows() != shape.samples * lrows ||
        g.value(spatial).rows() != shape.samples * shape.groups * shape.tokens_per_group)
        throw ShapeError("read: latent/spatial rows do not match the group layout");
    const CostTag proj{Site::read, Term::attn_proj, 0};

    const auto mod = adaln_(g, cond);
    Var hl = g.modulate(g.layer_norm(latents, eps_), mod[0], mod[1], lrows);
    Var hs = g.layer_norm(spatial, eps_);
    Var q = q_(g, hl, proj);
    Var kv = kv_(g, hs, proj);
    Var k = g.slice_cols(kv, 0, width);
    Var v = g.slice_cols(kv, width, width);
    q = g.head_rms_norm(q, g.param(*qk_.q), heads_, eps_);
    k = g.head_rms_norm(k, g.param(*qk_.k), heads_, eps_);
    const auto layout = cross_attention_layout(shape.samples, shape.groups, shape.latent_rows_per_group,
                                               shape.tokens_per_group, shape.tokens_per_group, shape.impl);
    Var a = g.attention(q, k, v, heads_, layout, CostTag{Site::read, Term::attn_mat, 0});
    if (attention) *attention = a;
    a = out_(g, a, proj);
    Var l = g.gated_residual(latents, a, mod[2], lrows);
    Var h = g.modulate(g.layer_norm(l, eps_), mod[3], mod[4], lrows);
    h = mlp_(g, h, CostTag{Site::read, Term::ff, 0});
    return g.gated_residual(l, h, mod[5], lrows);
}

template <typename T>
WriteLayer<T>::WriteLayer(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& cfg,
                          std::mt19937_64& rng)
    : heads_(cfg.heads), eps_(static_cast<T>(cfg.norm_eps)), modulated_(cfg.write_adaln) {
    const int d = cfg.width;
    if (modulated_) adaln_ = AdaLN<T>::make(store, prefix + ".adaln", d, 6, rng);
    q_ = Linear<T>::make(store, prefix + ".attn.q", d, d, Init::trunc_normal, cfg.init_std, rng);
    kv_ = Linear<T>::make(store, prefix + ".attn.kv", d, 2 * d, Init::trunc_normal, cfg.init_std, rng);
    qk_ = QkNorm<T>::make(store, prefix + ".attn", cfg.head_dim());
    out_ = Linear<T>::make(store, prefix + ".attn.out", d, d, modulated_ ? Init::trunc_normal : Init::zeros,
                           cfg.init_std, rng);
    mlp_ = Mlp<T>::make(store, prefix + ".mlp", d, d, cfg.init_std, !modulated_, rng);
}

template <typename T>
Var WriteLayer<T>::forward(Graph<T>& g, Var latents, Var spatial, Var cond, const InterfaceShape& shape) const {
    const Index width = g.value(latents).cols();
    const Index srows = Index(shape.groups) * shape.tokens_per_group;
    if (g.value(latents).rows() != shape.samples * shape.groups * shape.latent_rows_per_group ||
        g.value(spatial).rows() != shape.samples * srows)
        throw ShapeError("write: latent/spatial rows do not match the group layout");
    const CostTag proj{Site::write, Term::attn_proj, 0};

    std::vector<Var> mod;
    if (modulated_) mod = adaln_(g, cond);
    Var hs = g.layer_norm(spatial, eps_);
    if (modulated_) hs = g.modulate(hs, mod[0], mod[1], srows);
    Var hl = g.layer_norm(latents, eps_);
    Var q = q_(g, hs, proj);
    Var kv = kv_(g, hl, proj);
    Var k = g.slice_cols(kv, 0, width);
    Var v = g.slice_cols(kv, width, width);
    q = g.head_rms_norm(q, g.param(*qk_.q), heads_, eps_);
    k = g.head_rms_norm(k, g.param(*qk_.k), heads_, eps_);
    const auto layout = cross_attention_layout(shape.samples, shape.groups, shape.tokens_per_group,
                                               shape.latent_rows_per_group, shape.visible_latents, shape.impl);
    Var a = g.attention(q, k, v, heads_, layout, CostTag{Site::write, Term::attn_mat, 0});
    a = out_(g, a, proj);
    Var s = modulated_ ? g.gated_residual(spatial, a, mod[2], srows) : g.add(spatial, a);
    Var h = g.layer_norm(s, eps_);
    if (modulated_) h = g.modulate(h, mod[3], mod[4], srows);
    h = mlp_(g, h, CostTag{Site::write, Term::ff, 0});
    return modulated_ ? g.gated_residual(s, h, mod[5], srows) : g.add(s, h);
}

#define ELIT_INSTANTIATE_LATENT(T)                                                                 \
    template LatentTokens<T> expand_latents<T>(const Mat<T>&, const GroupLayout&, Budget);         \
    template GroupedTokens<T> partition_groups<T>(const SpatialTokens<T>&, const GroupLayout&);    \
    template SpatialTokens<T> merge_groups<T>(const GroupedTokens<T>&, const GroupLayout&);        \
    template LatentTokens<T> drop_tail<T>(const LatentTokens<T>&, Budget);                         \
    template class ReadLayer<T>;                                                                   \
    template class WriteLayer<T>;

ELIT_INSTANTIATE_LATENT(float)
ELIT_INSTANTIATE_LATENT(double)

#undef ELIT_INSTANTIATE_LATENT

} // namespace elit
