#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "elit/autograd.hpp"
#include "elit/config.hpp"
#include "elit/latent_interface.hpp"
#include "elit/layers.hpp"
#include "elit/params.hpp"

namespace elit {

// Flat CHW pixel index of every (token, patch column) entry; patch columns
// are ordered (dy, dx, channel).
std::vector<Index> patch_index_map(int channels, int height, int width, int patch);

template <typename T>
Mat<T> patchify_pixels(const Image& image, int patch);

template <typename T>
Image unpatchify_pixels(const Mat<T>& patches, int channels, int height, int width, int patch);

// Stacks the patch matrices of several images (sample-major rows).
template <typename T>
Mat<T> images_to_patches(std::span<const Image> images, int patch);

template <typename T>
std::vector<Image> patches_to_images(const Mat<T>& patches, int samples, int channels, int height, int width,
                                     int patch);

// Sinusoidal timestep features, [cos | sin], one row per timestep.
template <typename T>
Mat<T> timestep_features(std::span<const double> t, int dim);

// 2D rotary table over a token grid: the first half of every head rotates
// with the row coordinate, the second half with the column coordinate.
template <typename T>
RopeTable<T> grid_rope_table(int rows, int cols, int head_dim, double theta);

// 1D rotary table for explicit positions.
template <typename T>
RopeTable<T> sequence_rope_table(std::span<const int> positions, int head_dim, double theta);

// Pre-norm transformer block with adaLN-Zero modulation, QK-normalized
// multi-head self-attention and a GELU MLP.
template <typename T>
class DitBlock {
public:
    DitBlock() = default;
    DitBlock(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& cfg, std::mt19937_64& rng,
             Site site, int layer);

    Var forward(Graph<T>& g, Var x, Var cond, Index rows_per_sample, const AttentionLayout& layout,
                const RopeTable<T>* rope) const;

private:
    int heads_ = 1;
    T eps_ = T(1e-6);
    Site site_ = Site::spatial_block;
    int layer_ = 0;
    AdaLN<T> adaln_;
    Linear<T> qkv_, proj_;
    QkNorm<T> qk_;
    Mlp<T> mlp_;
};

// One training/inference batch in patch layout. A label < 0 selects the
// null (unconditional) class.
template <typename T>
struct ModelBatch {
    Mat<T> patches; // samples * N x patch_dim
    std::vector<double> t;
    std::vector<int> labels;
    int budget = 1;

    Index samples() const { return static_cast<Index>(t.size()); }
};

enum class LatentPath {
    prefix,      // latents beyond the budget are removed before the Read layer
    masked_full, // all latents are kept and hidden from every attention instead
};

struct ForwardOptions {
    LatentPath latent_path = LatentPath::prefix;
    CrossAttentionImpl cross = CrossAttentionImpl::grouped;
    // Overrides the kept within-group latent indices (random-drop ablation).
    std::optional<std::vector<int>> retained;
};

struct ForwardTrace {
    Var read_attention;
};

template <typename T>
class Model {
public:
    Model(const BackboneConfig& cfg, std::uint64_t seed);
    Model(Model&&) noexcept = default;
    Model& operator=(Model&&) noexcept = default;
    Model(const Model&) = delete;
    Model& operator=(const Model&) = delete;

    const BackboneConfig& config() const { return cfg_; }
    ParameterStore<T>& params() { return store_; }
    const ParameterStore<T>& params() const { return store_; }
    int null_label() const { return -1; }

    // Returns the predicted velocity in patch layout (samples * N x patch_dim).
    Var forward(Graph<T>& g, const ModelBatch<T>& batch, const ForwardOptions& opts = {},
                ForwardTrace* trace = nullptr);

    // Inference without recording a tape.
    Mat<T> predict(const ModelBatch<T>& batch, const ForwardOptions& opts = {});

    // Velocity for a single C x H x W image.
    Image velocity(const Image& xt, double t, int label, int budget, const ForwardOptions& opts = {});

    Model clone() const {
        Model m(cfg_, 0);
        m.copy_parameters_from(store_);
        return m;
    }

    template <typename U>
    void copy_parameters_from(const ParameterStore<U>& other) {
        for (auto& [name, p] : store_.all()) {
            const auto& src = other.get(name);
            if (src.value.rows() != p.value.rows() || src.value.cols() != p.value.cols())
                throw ShapeError("copy_parameters_from: shape mismatch for " + name);
            p.value = src.value.template cast<T>();
        }
    }

private:
    void check_batch(const ModelBatch<T>& batch) const;

    BackboneConfig cfg_;
    ParameterStore<T> store_;
    Linear<T> x_embed_;
    Parameter<T>* pos_embed_ = nullptr;
    Linear<T> t_fc1_, t_fc2_;
    Parameter<T>* y_table_ = nullptr;
    std::vector<DitBlock<T>> blocks_;
    ReadLayer<T> read_;
    WriteLayer<T> write_;
    Parameter<T>* latents_ = nullptr;
    AdaLN<T> final_adaln_;
    Linear<T> final_linear_;
    RopeTable<T> spatial_rope_;
};

extern template class DitBlock<float>;
extern template class DitBlock<double>;
extern template class Model<float>;
extern template class Model<double>;

} // namespace elit
