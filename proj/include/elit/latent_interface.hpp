#pragma once

#include <optional>
#include <string>
#include <vector>

#include "elit/autograd.hpp"
#include "elit/config.hpp"
#include "elit/flow.hpp"
#include "elit/layers.hpp"

namespace elit {

// Regular partition of the token grid into group_rows x group_cols
// rectangular blocks. Groups are numbered row-major over the group grid;
// inside a group, tokens keep raster order.
struct GroupLayout {
    int group_rows = 1;
    int group_cols = 1;
    int token_rows = 1;
    int token_cols = 1;

    static GroupLayout from_config(const BackboneConfig& cfg);

    void validate() const;
    int groups() const { return group_rows * group_cols; }
    int tokens() const { return token_rows * token_cols; }
    int tokens_per_group() const { return tokens() / groups(); }
    int group_of(int token) const;
    // position in group-major order -> raster token index
    std::vector<Index> group_major_order() const;
    // raster token index -> position in group-major order
    std::vector<Index> inverse_order() const;
};

template <typename T>
struct SpatialTokens {
    Mat<T> values; // N x d, raster order
    int rows = 0;
    int cols = 0;
};

// Group-major latent sequence: group g occupies rows [g * per_group, (g + 1) * per_group).
template <typename T>
struct LatentTokens {
    Mat<T> values;
    int groups = 0;
    int per_group = 0;
};

// G x (N / G) x d view of spatial tokens, flattened group-major.
template <typename T>
struct GroupedTokens {
    Mat<T> values;
    int groups = 0;
    int per_group = 0;
};

struct BudgetSpec {
    int j_min = 1;
    int j_max = 1;

    // Throws ConfigError naming budget.J_min / budget.J_max.
    void validate(int latents_per_group) const;
    bool operator==(const BudgetSpec&) const = default;
};

struct Budget {
    int j_tilde = 1;
};

enum class DropStrategy { tail, random };

// Uniform draw from {j_min, ..., j_max}; one call per training iteration.
Budget sample_budget(const BudgetSpec& spec, Rng& rng);

// Probability that within-group latent index i (0-based) survives a tail drop
// under spec, i.e. P(j_tilde > i).
double retention_probability(const BudgetSpec& spec, int index);

// Latent indices kept inside every group. Tail keeps 0 .. j_tilde - 1;
// random keeps a sorted uniformly drawn subset of size j_tilde.
std::vector<int> retained_indices(DropStrategy strategy, int latents_per_group, Budget budget, Rng* rng = nullptr);

template <typename T>
LatentTokens<T> expand_latents(const Mat<T>& shared, const GroupLayout& layout, Budget budget);

template <typename T>
GroupedTokens<T> partition_groups(const SpatialTokens<T>& s, const GroupLayout& layout);

template <typename T>
SpatialTokens<T> merge_groups(const GroupedTokens<T>& g, const GroupLayout& layout);

template <typename T>
LatentTokens<T> drop_tail(const LatentTokens<T>& full, Budget budget);

// Flattened (group-major) row indices kept by drop_tail.
std::vector<Index> drop_tail_rows(int groups, int latents_per_group, int j_tilde);

enum class CrossAttentionImpl {
    grouped,      // one attention problem per (spatial group, latent group)
    dense_masked, // one problem per sample with a block-diagonal mask
};

// Row layout of the two token domains inside a stacked batch.
struct InterfaceShape {
    Index samples = 1;
    int groups = 1;
    int tokens_per_group = 1;
    int latent_rows_per_group = 1; // latent rows physically present per group
    int visible_latents = 1;       // leading latents per group visible as keys
    CrossAttentionImpl impl = CrossAttentionImpl::grouped;
};

// Queries from q_per_group rows of every group, keys from k_per_group rows of
// the matching group; only the first k_visible keys of each group are visible.
AttentionLayout cross_attention_layout(Index samples, int groups, int q_per_group, int k_per_group, int k_visible,
                                       CrossAttentionImpl impl);

// Self-attention over each sample's latent sequence, hiding latents whose
// within-group index is >= visible.
AttentionLayout latent_self_attention_layout(Index samples, int groups, int rows_per_group, int visible);

// Spatial -> latent cross-attention layer: pre-norm, QK-normalized,
// adaLN-Zero modulated, followed by a width-preserving MLP.
template <typename T>
class ReadLayer {
public:
    ReadLayer() = default;
    ReadLayer(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, std::mt19937_64& rng);

    // latents: samples * G * latent_rows_per_group rows; spatial: group-major,
    // samples * N rows; cond: samples x d (already passed through SiLU).
    Var forward(Graph<T>& g, Var latents, Var spatial, Var cond, const InterfaceShape& shape,
                Var* attention = nullptr) const;

private:
    int heads_ = 1;
    T eps_ = T(1e-6);
    AdaLN<T> adaln_;
    Linear<T> q_, kv_, out_;
    QkNorm<T> qk_;
    Mlp<T> mlp_;
};

// Latent -> spatial mirror of ReadLayer. Without adaLN, the output
// projection and the MLP output are zero-initialized instead of the gates.
template <typename T>
class WriteLayer {
public:
    WriteLayer() = default;
    WriteLayer(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, std::mt19937_64& rng);

    Var forward(Graph<T>& g, Var latents, Var spatial, Var cond, const InterfaceShape& shape) const;

private:
    int heads_ = 1;
    T eps_ = T(1e-6);
    bool modulated_ = false;
    AdaLN<T> adaln_;
    Linear<T> q_, kv_, out_;
    QkNorm<T> qk_;
    Mlp<T> mlp_;
};

extern template class ReadLayer<float>;
extern template class ReadLayer<double>;
extern template class WriteLayer<float>;
extern template class WriteLayer<double>;

} // namespace elit
