#pragma once

#include <cstdint>
#include <functional>
#include <string>

#include "elit/backbone.hpp"
#include "elit/config.hpp"
#include "elit/flow.hpp"

namespace elit {

enum class GuidanceMode { none, cfg, ag, ccfg };

std::string to_string(GuidanceMode mode);
GuidanceMode parse_guidance_mode(const std::string& s);

// lambda follows the (lambda + 1) G(main) - lambda G(guide) parameterization.
struct GuidanceSpec {
    GuidanceMode mode = GuidanceMode::none;
    double lambda = 0.0;
    int j_main = 1;
    int j_weak = 1;

    void validate() const;
    bool operator==(const GuidanceSpec&) const = default;
};

// G(x | label; budget). label < 0 is the null class.
template <typename T>
using ConditionalVelocityFn = std::function<Mat<T>(const Mat<T>& x, double t, int label, int budget)>;

// none: G(x|c; J)
// cfg:  (l+1) G(x|c; J) - l G(x|null; J)
// ag:   (l+1) G(x|c; J) - l G(x|c; Jw)
// ccfg: (l+1) G(x|c; J) - l G(x|null; Jw)
template <typename T>
Mat<T> guided_velocity(const ConditionalVelocityFn<T>& model, const Mat<T>& xt, double t, int label,
                       const GuidanceSpec& spec);

template <typename T>
VelocityFn<T> guided_field(ConditionalVelocityFn<T> model, int label, GuidanceSpec spec);

// Velocity function over stacked patch matrices (rows = samples * N).
template <typename T>
ConditionalVelocityFn<T> model_velocity_fn(Model<T>& model);

// Largest budget whose modeled forward cost is at most max_fraction of the
// cost at j_main.
int select_weak_budget(const BackboneConfig& cfg, std::int64_t tokens, int j_main, double max_fraction = 0.35);

// Modeled cost of a full sampling run: steps x (cost of the model calls per step).
std::uint64_t sampling_cost(const BackboneConfig& cfg, std::int64_t tokens, const GuidanceSpec& spec, int steps);

} // namespace elit
