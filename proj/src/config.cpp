#include "elit/config.hpp"

#include <string>

namespace elit {

namespace {

void check(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError("backbone." + field + ": " + why);
}

} // namespace

void BackboneConfig::validate() const {
    check(width > 0, "width", "must be positive");
    check(heads > 0, "heads", "must be positive");
    check(width % heads == 0, "heads", "must divide width");
    check(blocks_in >= 0 && blocks_core >= 0 && blocks_out >= 0, "blocks_core", "block counts must be >= 0");
    check(depth() >= 1, "blocks_core", "total depth must be >= 1");
    check(patch_size > 0, "patch_size", "must be positive");
    check(image_size > 0, "image_size", "must be positive");
    check(image_size % patch_size == 0, "image_size", "must be divisible by patch_size");
    check(channels > 0, "channels", "must be positive");
    check(num_classes > 0, "num_classes", "must be positive");
    check(mlp_ratio > 0, "mlp_ratio", "must be positive");
    check(time_freq_dim > 0 && time_freq_dim % 2 == 0, "time_freq_dim", "must be a positive even number");
    check(norm_eps > 0.0, "norm_eps", "must be positive");
    check(init_std > 0.0, "init_std", "must be positive");
    check(rope_theta > 0.0, "rope_theta", "must be positive");
    if (use_rope) check(head_dim() % 4 == 0, "heads", "2D rotary embedding needs width / heads divisible by 4");
    if (latent_interface) {
        check(group_rows > 0 && group_cols > 0, "group_rows", "group grid must be positive");
        check(token_rows() % group_rows == 0, "group_rows", "must divide the token grid rows");
        check(token_cols() % group_cols == 0, "group_cols", "must divide the token grid cols");
        check(latents_per_group > 0, "latents_per_group", "must be positive");
        if (latent_rope) check(head_dim() % 2 == 0, "heads", "latent rotary embedding needs an even head dim");
    }
}

} // namespace elit
