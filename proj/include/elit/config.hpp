#pragma once

#include <cstdint>

#include "elit/tensor.hpp"

namespace elit {

// Architecture hyperparameters shared by the DiT baseline and the
// latent-interface variant. With latent_interface off, every block is a
// spatial block and the budget is ignored.
struct BackboneConfig {
    int width = 256;
    int heads = 8;
    int blocks_in = 2;
    int blocks_core = 8;
    int blocks_out = 2;
    int patch_size = 2;
    int image_size = 16;
    int channels = 3;
    int num_classes = 16;
    int group_rows = 2;
    int group_cols = 2;
    int latents_per_group = 16;
    bool latent_interface = true;
    bool use_rope = true;
    bool use_abs_pos = false;
    bool latent_rope = false;
    bool write_adaln = false;
    int mlp_ratio = 4;
    int time_freq_dim = 256;
    double rope_theta = 10000.0;
    double norm_eps = 1e-6;
    double init_std = 0.02;

    int token_rows() const { return image_size / patch_size; }
    int token_cols() const { return image_size / patch_size; }
    int num_tokens() const { return token_rows() * token_cols(); }
    int num_groups() const { return group_rows * group_cols; }
    int tokens_per_group() const { return num_tokens() / num_groups(); }
    int max_latents() const { return num_groups() * latents_per_group; }
    int head_dim() const { return width / heads; }
    int patch_dim() const { return patch_size * patch_size * channels; }
    int depth() const { return blocks_in + blocks_core + blocks_out; }
    int spatial_blocks() const { return latent_interface ? blocks_in + blocks_out : depth(); }
    int latent_blocks() const { return latent_interface ? blocks_core : 0; }

    // Throws ConfigError naming the offending field ("backbone.<field>").
    void validate() const;

    bool operator==(const BackboneConfig&) const = default;
};

} // namespace elit
