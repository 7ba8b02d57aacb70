#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "elit/config.hpp"
#include "elit/dataset.hpp"
#include "elit/guidance.hpp"
#include "elit/latent_interface.hpp"
#include "elit/train.hpp"

namespace elit {

// Guidance as written in the config file. Zero budgets are resolved at use:
// J_main 0 means budget.J_max, J_weak 0 means the largest budget whose
// forward pass costs at most 35% of the main pass.
struct GuidanceConfig {
    GuidanceMode mode = GuidanceMode::none;
    double lambda = 1.5;
    int j_main = 0;
    int j_weak = 0;

    bool operator==(const GuidanceConfig&) const = default;
};

struct RunConfig {
    BackboneConfig backbone;
    int sampler_steps = 50;
    BudgetSpec budget{1, 16};
    GuidanceConfig guidance;
    ToyDatasetSpec dataset;
    int validation_samples = 256;
    std::optional<PaddedVariantSpec> padding;
    // training.timesteps holds the flow section; training.drop the budget drop strategy
    TrainingConfig training;
    std::string output_dir = "runs/default";

    // Cross-field checks; throws ConfigError naming "<section>.<field>".
    void validate() const;
    bool operator==(const RunConfig&) const = default;
};

// Missing or unreadable files raise IoError; syntax, type, unknown-key and
// invariant errors raise ConfigError.
RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text);

// Canonical commented form; parse_config(emit_config(c)) == c.
std::string emit_config(const RunConfig& cfg);
void save_config(const std::filesystem::path& path, const RunConfig& cfg);

GuidanceSpec resolve_guidance(const RunConfig& cfg);

// output_dir, placed under $ELIT_OUTPUT_ROOT when that is set and output_dir
// is relative.
std::filesystem::path resolve_output_dir(const RunConfig& cfg);

} // namespace elit
