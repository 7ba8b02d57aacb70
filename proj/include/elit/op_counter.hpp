#pragma once

#include <cstdint>
#include <map>
#include <tuple>

namespace elit {

// Where a matrix product happens inside the network.
enum class Site : std::uint8_t {
    uncategorized,
    spatial_block,
    latent_block,
    read,
    write,
    unmodeled,
};

// Which term of the per-layer cost a matrix product contributes to.
enum class Term : std::uint8_t {
    attn_proj,
    attn_mat,
    ff,
    other,
};

struct CostTag {
    Site site = Site::uncategorized;
    Term term = Term::other;
    int layer = -1;
};

// Accumulates exact multiply-accumulate counts for every matrix product of a
// forward pass. Products against weights and products between activations
// (attention scores and the attention-weighted value sum) are kept apart
// because the analytic cost table weights them differently.
class OpCounter {
public:
    struct Entry {
        std::uint64_t weight_macs = 0;
        std::uint64_t activation_macs = 0;
    };
    using Key = std::tuple<Site, Term, int>;

    void record_weight(const CostTag& tag, std::uint64_t macs) { entries_[key(tag)].weight_macs += macs; }
    void record_activation(const CostTag& tag, std::uint64_t macs) {
        entries_[key(tag)].activation_macs += macs;
    }

    const std::map<Key, Entry>& entries() const { return entries_; }
    void clear() { entries_.clear(); }

private:
    static Key key(const CostTag& t) { return {t.site, t.term, t.layer}; }
    std::map<Key, Entry> entries_;
};

} // namespace elit
