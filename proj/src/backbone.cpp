#include "elit/backbone.hpp"

#include <cmath>

namespace elit {

std::vector<Index> patch_index_map(int channels, int height, int width, int patch) {
    if (patch <= 0 || height % patch != 0 || width % patch != 0)
        throw ShapeError("patchify: image " + std::to_string(height) + "x" + std::to_string(width) +
                         " not divisible by patch size " + std::to_string(patch));
    const int rows = height / patch;
    const int cols = width / patch;
    std::vector<Index> map;
    map.reserve(static_cast<size_t>(channels) * height * width);
    for (int tr = 0; tr < rows; ++tr)
        for (int tc = 0; tc < cols; ++tc)
            for (int dy = 0; dy < patch; ++dy)
                for (int dx = 0; dx < patch; ++dx)
                    for (int c = 0; c < channels; ++c)
                        map.push_back((Index(c) * height + tr * patch + dy) * width + tc * patch + dx);
    return map;
}

template <typename T>
Mat<T> patchify_pixels(const Image& image, int patch) {
    const auto map = patch_index_map(image.channels, image.height, image.width, patch);
    const Index pd = Index(patch) * patch * image.channels;
    Mat<T> out(static_cast<Index>(map.size()) / pd, pd);
    for (size_t i = 0; i < map.size(); ++i) out.data()[i] = static_cast<T>(image.data[static_cast<size_t>(map[i])]);
    return out;
}

template <typename T>
Image unpatchify_pixels(const Mat<T>& patches, int channels, int height, int width, int patch) {
    const auto map = patch_index_map(channels, height, width, patch);
    if (static_cast<size_t>(patches.size()) != map.size() || patches.cols() != Index(patch) * patch * channels)
        throw ShapeError("unpatchify: token count does not match the image grid");
    Image img(channels, height, width);
    for (size_t i = 0; i < map.size(); ++i) img.data[static_cast<size_t>(map[i])] = static_cast<float>(patches.data()[i]);
    return img;
}

template <typename T>
Mat<T> images_to_patches(std::span<const Image> images, int patch) {
    if (images.empty()) throw ShapeError("images_to_patches: empty batch");
    Mat<T> first = patchify_pixels<T>(images[0], patch);
    Mat<T> out(first.rows() * static_cast<Index>(images.size()), first.cols());
    out.topRows(first.rows()) = first;
    for (size_t i = 1; i < images.size(); ++i) {
        if (!images[i].same_shape(images[0])) throw ShapeError("images_to_patches: mixed image shapes");
        out.middleRows(static_cast<Index>(i) * first.rows(), first.rows()) = patchify_pixels<T>(images[i], patch);
    }
    return out;
}

template <typename T>
std::vector<Image> patches_to_images(const Mat<T>& patches, int samples, int channels, int height, int width,
                                     int patch) {
    if (samples <= 0 || patches.rows() % samples != 0) throw ShapeError("patches_to_images: rows per sample");
    const Index rows = patches.rows() / samples;
    std::vector<Image> out;
    out.reserve(static_cast<size_t>(samples));
    for (int b = 0; b < samples; ++b) {
        Mat<T> block = patches.middleRows(b * rows, rows);
        out.push_back(unpatchify_pixels<T>(block, channels, height, width, patch));
    }
    return out;
}

template <typename T>
Mat<T> timestep_features(std::span<const double> t, int dim) {
    const int half = dim / 2;
    Mat<T> f(static_cast<Index>(t.size()), dim);
    for (size_t r = 0; r < t.size(); ++r) {
        for (int i = 0; i < half; ++i) {
            const double freq = std::exp(-std::log(10000.0) * i / half);
            const double arg = 1000.0 * t[r] * freq;
            f(static_cast<Index>(r), i) = static_cast<T>(std::cos(arg));
            f(static_cast<Index>(r), half + i) = static_cast<T>(std::sin(arg));
        }
    }
    return f;
}

template <typename T>
RopeTable<T> grid_rope_table(int rows, int cols, int head_dim, double theta) {
    const int pairs = head_dim / 2;
    const int per_axis = pairs / 2;
    RopeTable<T> tab;
    tab.cos.resize(Index(rows) * cols, pairs);
    tab.sin.resize(Index(rows) * cols, pairs);
    for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) {
            const Index n = Index(r) * cols + c;
            for (int i = 0; i < pairs; ++i) {
                const int k = i % per_axis;
                const double freq = std::pow(theta, -static_cast<double>(k) / per_axis);
                const double angle = (i < per_axis ? r : c) * freq;
                tab.cos(n, i) = static_cast<T>(std::cos(angle));
                tab.sin(n, i) = static_cast<T>(std::sin(angle));
            }
        }
    }
    return tab;
}

template <typename T>
RopeTable<T> sequence_rope_table(std::span<const int> positions, int head_dim, double theta) {
    const int pairs = head_dim / 2;
    RopeTable<T> tab;
    tab.cos.resize(static_cast<Index>(positions.size()), pairs);
    tab.sin.resize(static_cast<Index>(positions.size()), pairs);
    for (size_t n = 0; n < positions.size(); ++n) {
        for (int i = 0; i < pairs; ++i) {
            const double angle = positions[n] * std::pow(theta, -static_cast<double>(i) / pairs);
            tab.cos(static_cast<Index>(n), i) = static_cast<T>(std::cos(angle));
            tab.sin(static_cast<Index>(n), i) = static_cast<T>(std::sin(angle));
        }
    }
    return tab;
}

template <typename T>
DitBlock<T>::DitBlock(ParameterStore<T>& store, const std::string& prefix, const BackboneConfig& cfg,
                      std::mt19937_64& rng, Site site, int layer)
    : heads_(cfg.heads), eps_(static_cast<T>(cfg.norm_eps)), site_(site), layer_(layer) {
    const int d = cfg.width;
    adaln_ = AdaLN<T>::make(store, prefix + ".adaln", d, 6, rng);
    qkv_ = Linear<T>::make(store, prefix + ".attn.qkv", d, 3 * d, Init::trunc_normal, cfg.init_std, rng);
    qk_ = QkNorm<T>::make(store, prefix + ".attn", cfg.head_dim());
    proj_ = Linear<T>::make(store, prefix + ".attn.proj", d, d, Init::trunc_normal, cfg.init_std, rng);
    mlp_ = Mlp<T>::make(store, prefix + ".mlp", d, d * cfg.mlp_ratio, cfg.init_std, false, rng);
}

template <typename T>
Var DitBlock<T>::forward(Graph<T>& g, Var x, Var cond, Index rows_per_sample, const AttentionLayout& layout,
                         const RopeTable<T>* rope) const {
    const Index width = g.value(x).cols();
    const CostTag proj{site_, Term::attn_proj, layer_};
    const auto mod = adaln_(g, cond);

    Var h = g.modulate(g.layer_norm(x, eps_), mod[0], mod[1], rows_per_sample);
    Var qkv = qkv_(g, h, proj);
    Var q = g.head_rms_norm(g.slice_cols(qkv, 0, width), g.param(*qk_.q), heads_, eps_);
    Var k = g.head_rms_norm(g.slice_cols(qkv, width, width), g.param(*qk_.k), heads_, eps_);
    Var v = g.slice_cols(qkv, 2 * width, width);
    if (rope) {
        q = g.rope(q, *rope, heads_);
        k = g.rope(k, *rope, heads_);
    }
    Var a = g.attention(q, k, v, heads_, layout, CostTag{site_, Term::attn_mat, layer_});
    a = proj_(g, a, proj);
    x = g.gated_residual(x, a, mod[2], rows_per_sample);

    h = g.modulate(g.layer_norm(x, eps_), mod[3], mod[4], rows_per_sample);
    h = mlp_(g, h, CostTag{site_, Term::ff, layer_});
    return g.gated_residual(x, h, mod[5], rows_per_sample);
}

template <typename T>
Model<T>::Model(const BackboneConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
    cfg_.validate();
    std::mt19937_64 rng(seed);
    const int d = cfg_.width;
    const double std = cfg_.init_std;

    x_embed_ = Linear<T>::make(store_, "x_embed", cfg_.patch_dim(), d, Init::trunc_normal, std, rng);
    if (cfg_.use_abs_pos) pos_embed_ = &store_.add("pos_embed", trunc_normal<T>(cfg_.num_tokens(), d, std, rng));
    t_fc1_ = Linear<T>::make(store_, "t_embed.fc1", cfg_.time_freq_dim, d, Init::trunc_normal, std, rng);
    t_fc2_ = Linear<T>::make(store_, "t_embed.fc2", d, d, Init::trunc_normal, std, rng);
    y_table_ = &store_.add("y_embed.table", trunc_normal<T>(cfg_.num_classes + 1, d, std, rng));

    for (int i = 0; i < cfg_.depth(); ++i) {
        const bool latent = cfg_.latent_interface && i >= cfg_.blocks_in && i < cfg_.blocks_in + cfg_.blocks_core;
        blocks_.emplace_back(store_, "blocks." + std::to_string(i), cfg_, rng,
                             latent ? Site::latent_block : Site::spatial_block, i);
    }
    if (cfg_.latent_interface) {
        latents_ = &store_.add("latents", trunc_normal<T>(cfg_.latents_per_group, d, std, rng));
        read_ = ReadLayer<T>(store_, "read", cfg_, rng);
        write_ = WriteLayer<T>(store_, "write", cfg_, rng);
    }
    final_adaln_ = AdaLN<T>::make(store_, "final.adaln", d, 2, rng);
    final_linear_ = Linear<T>::make(store_, "final.linear", d, cfg_.patch_dim(), Init::zeros, 0.0, rng);
    if (cfg_.use_rope)
        spatial_rope_ = grid_rope_table<T>(cfg_.token_rows(), cfg_.token_cols(), cfg_.head_dim(), cfg_.rope_theta);
}

template <typename T>
void Model<T>::check_batch(const ModelBatch<T>& batch) const {
    const Index b = batch.samples();
    if (b < 1) throw ShapeError("forward: empty batch");
    if (static_cast<Index>(batch.labels.size()) != b) throw ShapeError("forward: one label per sample required");
    if (batch.patches.rows() != b * cfg_.num_tokens() || batch.patches.cols() != cfg_.patch_dim())
        throw ShapeError("forward: patch matrix does not match the configured image grid");
    for (int y : batch.labels)
        if (y >= cfg_.num_classes) throw std::out_of_range("forward: class id " + std::to_string(y) + " out of range");
    if (cfg_.latent_interface && (batch.budget < 1 || batch.budget > cfg_.latents_per_group))
        throw std::out_of_range("forward: budget " + std::to_string(batch.budget) + " outside [1, " +
                                std::to_string(cfg_.latents_per_group) + "]");
}

template <typename T>
Var Model<T>::forward(Graph<T>& g, const ModelBatch<T>& batch, const ForwardOptions& opts, ForwardTrace* trace) {
    check_batch(batch);
    const Index samples = batch.samples();
    const int n = cfg_.num_tokens();
    const CostTag unmodeled{Site::unmodeled, Term::other, -1};

    Var x = x_embed_(g, g.input(batch.patches), unmodeled);
    if (pos_embed_) x = g.add_tiled(x, g.param(*pos_embed_));

    Var temb = g.input(timestep_features<T>(batch.t, cfg_.time_freq_dim));
    temb = t_fc2_(g, g.silu(t_fc1_(g, temb, unmodeled)), unmodeled);
    std::vector<Index> label_rows;
    for (int y : batch.labels) label_rows.push_back(y < 0 ? cfg_.num_classes : y);
    Var yemb = g.gather_rows(g.param(*y_table_), std::move(label_rows));
    Var cond = g.silu(g.add(temb, yemb));

    AttentionLayout spatial_layout;
    for (Index b = 0; b < samples; ++b) spatial_layout.segments.push_back({b * n, n, b * n, n});
    const RopeTable<T>* rope = cfg_.use_rope ? &spatial_rope_ : nullptr;

    int i = 0;
    const int head_end = cfg_.latent_interface ? cfg_.blocks_in : cfg_.depth();
    for (; i < head_end; ++i) x = blocks_[i].forward(g, x, cond, n, spatial_layout, rope);

    if (cfg_.latent_interface) {
        const int full = cfg_.latents_per_group;
        const int groups = cfg_.num_groups();
        std::vector<int> kept;
        int visible = 0;
        if (opts.latent_path == LatentPath::masked_full) {
            if (opts.retained) throw std::invalid_argument("forward: masked_full path keeps the prefix only");
            kept = retained_indices(DropStrategy::tail, full, Budget{full});
            visible = batch.budget;
        } else {
            kept = opts.retained ? *opts.retained : retained_indices(DropStrategy::tail, full, Budget{batch.budget});
            if (static_cast<int>(kept.size()) != batch.budget)
                throw std::invalid_argument("forward: retained index count must equal the budget");
            visible = batch.budget;
            for (int j : kept)
                if (j < 0 || j >= full) throw std::out_of_range("forward: retained latent index out of range");
        }
        const int rows_per_group = static_cast<int>(kept.size());
        if (opts.latent_path == LatentPath::prefix) visible = rows_per_group;

        std::vector<Index> latent_rows;
        latent_rows.reserve(static_cast<size_t>(samples) * groups * rows_per_group);
        for (Index b = 0; b < samples; ++b)
            for (int gi = 0; gi < groups; ++gi)
                for (int j : kept) latent_rows.push_back(j);
        Var lat = g.gather_rows(g.param(*latents_), std::move(latent_rows));

        const GroupLayout layout = GroupLayout::from_config(cfg_);
        const auto order = layout.group_major_order();
        const auto inverse = layout.inverse_order();
        std::vector<Index> to_groups, to_raster;
        for (Index b = 0; b < samples; ++b) {
            for (Index o : order) to_groups.push_back(b * n + o);
            for (Index o : inverse) to_raster.push_back(b * n + o);
        }
        Var grouped = g.gather_rows(x, std::move(to_groups));

        InterfaceShape shape;
        shape.samples = samples;
        shape.groups = groups;
        shape.tokens_per_group = layout.tokens_per_group();
        shape.latent_rows_per_group = rows_per_group;
        shape.visible_latents = visible;
        shape.impl = opts.cross;

        Var attn;
        lat = read_.forward(g, lat, grouped, cond, shape, &attn);
        if (trace) trace->read_attention = attn;

        const AttentionLayout latent_layout = latent_self_attention_layout(samples, groups, rows_per_group, visible);
        std::optional<RopeTable<T>> latent_rope;
        if (cfg_.latent_rope) {
            std::vector<int> pos;
            for (int gi = 0; gi < groups; ++gi) pos.insert(pos.end(), kept.begin(), kept.end());
            latent_rope = sequence_rope_table<T>(pos, cfg_.head_dim(), cfg_.rope_theta);
        }
        for (; i < cfg_.blocks_in + cfg_.blocks_core; ++i)
            lat = blocks_[i].forward(g, lat, cond, Index(groups) * rows_per_group, latent_layout,
                                     latent_rope ? &*latent_rope : nullptr);

        grouped = write_.forward(g, lat, grouped, cond, shape);
        x = g.gather_rows(grouped, std::move(to_raster));
        for (; i < cfg_.depth(); ++i) x = blocks_[i].forward(g, x, cond, n, spatial_layout, rope);
    }

    const auto mod = final_adaln_(g, cond);
    Var h = g.modulate(g.layer_norm(x, static_cast<T>(cfg_.norm_eps)), mod[0], mod[1], n);
    return final_linear_(g, h, unmodeled);
}

template <typename T>
Mat<T> Model<T>::predict(const ModelBatch<T>& batch, const ForwardOptions& opts) {
    Graph<T> g(false);
    return g.value(forward(g, batch, opts));
}

template <typename T>
Image Model<T>::velocity(const Image& xt, double t, int label, int budget, const ForwardOptions& opts) {
    if (xt.channels != cfg_.channels || xt.height != cfg_.image_size || xt.width != cfg_.image_size)
        throw ShapeError("velocity: image shape does not match the configuration");
    ModelBatch<T> batch;
    batch.patches = patchify_pixels<T>(xt, cfg_.patch_size);
    batch.t = {t};
    batch.labels = {label};
    batch.budget = budget;
    return unpatchify_pixels<T>(predict(batch, opts), cfg_.channels, cfg_.image_size, cfg_.image_size,
                                cfg_.patch_size);
}

#define ELIT_INSTANTIATE_BACKBONE(T)                                                                   \
    template Mat<T> patchify_pixels<T>(const Image&, int);                                             \
    template Image unpatchify_pixels<T>(const Mat<T>&, int, int, int, int);                            \
    template Mat<T> images_to_patches<T>(std::span<const Image>, int);                                 \
    template std::vector<Image> patches_to_images<T>(const Mat<T>&, int, int, int, int, int);          \
    template Mat<T> timestep_features<T>(std::span<const double>, int);                                \
    template RopeTable<T> grid_rope_table<T>(int, int, int, double);                                   \
    template RopeTable<T> sequence_rope_table<T>(std::span<const int>, int, double);                   \
    template class DitBlock<T>;                                                                        \
    template class Model<T>;

ELIT_INSTANTIATE_BACKBONE(float)
ELIT_INSTANTIATE_BACKBONE(double)

#undef ELIT_INSTANTIATE_BACKBONE

} // namespace elit
