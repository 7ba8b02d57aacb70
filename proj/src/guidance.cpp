#include "elit/guidance.hpp"

#include <stdexcept>

#include "elit/cost_model.hpp"

namespace elit {

std::string to_string(GuidanceMode mode) {
    switch (mode) {
    case GuidanceMode::none: return "none";
    case GuidanceMode::cfg: return "cfg";
    case GuidanceMode::ag: return "ag";
    case GuidanceMode::ccfg: return "ccfg";
    }
    return "none";
}

GuidanceMode parse_guidance_mode(const std::string& s) {
    if (s == "none") return GuidanceMode::none;
    if (s == "cfg") return GuidanceMode::cfg;
    if (s == "ag") return GuidanceMode::ag;
    if (s == "ccfg") return GuidanceMode::ccfg;
    throw ConfigError("guidance.mode: unknown mode '" + s + "' (expected none, cfg, ag or ccfg)");
}

void GuidanceSpec::validate() const {
    if (j_main < 1) throw ConfigError("guidance.J_main: must be >= 1");
    if (mode == GuidanceMode::none) return;
    if (!(lambda >= 0.0)) throw ConfigError("guidance.lambda: must be non-negative");
    if (mode == GuidanceMode::ag || mode == GuidanceMode::ccfg) {
        if (j_weak < 1) throw ConfigError("guidance.J_weak: must be >= 1");
        if (j_weak > j_main) throw ConfigError("guidance.J_weak: must not exceed guidance.J_main");
    }
}

template <typename T>
Mat<T> guided_velocity(const ConditionalVelocityFn<T>& model, const Mat<T>& xt, double t, int label,
                       const GuidanceSpec& spec) {
    spec.validate();
    Mat<T> main = model(xt, t, label, spec.j_main);
    if (spec.mode == GuidanceMode::none) return main;
    Mat<T> guide;
    switch (spec.mode) {
    case GuidanceMode::cfg: guide = model(xt, t, -1, spec.j_main); break;
    case GuidanceMode::ag: guide = model(xt, t, label, spec.j_weak); break;
    case GuidanceMode::ccfg: guide = model(xt, t, -1, spec.j_weak); break;
    default: throw std::logic_error("guided_velocity: unknown mode");
    }
    const T l = static_cast<T>(spec.lambda);
    return (l + T(1)) * main - l * guide;
}

template <typename T>
VelocityFn<T> guided_field(ConditionalVelocityFn<T> model, int label, GuidanceSpec spec) {
    spec.validate();
    return [model = std::move(model), label, spec](const Mat<T>& x, double t) {
        return guided_velocity<T>(model, x, t, label, spec);
    };
}

template <typename T>
ConditionalVelocityFn<T> model_velocity_fn(Model<T>& model) {
    return [&model](const Mat<T>& x, double t, int label, int budget) {
        const Index n = model.config().num_tokens();
        if (x.rows() % n != 0) throw ShapeError("model velocity: rows are not a multiple of the token count");
        const Index samples = x.rows() / n;
        ModelBatch<T> batch;
        batch.patches = x;
        batch.t.assign(static_cast<size_t>(samples), t);
        batch.labels.assign(static_cast<size_t>(samples), label);
        batch.budget = model.config().latent_interface ? budget : 1;
        return model.predict(batch);
    };
}

int select_weak_budget(const BackboneConfig& cfg, std::int64_t tokens, int j_main, double max_fraction) {
    if (j_main < 1) throw ConfigError("guidance.J_main: must be >= 1");
    const double full = static_cast<double>(cost_breakdown(cfg, tokens, j_main).total);
    int best = 0;
    for (int j = 1; j <= j_main; ++j)
        if (static_cast<double>(cost_breakdown(cfg, tokens, j).total) <= max_fraction * full) best = j;
    if (best == 0)
        throw ConfigError("guidance.J_weak: no budget costs at most " + std::to_string(max_fraction) +
                          " of the main pass; set it explicitly");
    return best;
}

std::uint64_t sampling_cost(const BackboneConfig& cfg, std::int64_t tokens, const GuidanceSpec& spec, int steps) {
    spec.validate();
    const std::uint64_t main = cost_breakdown(cfg, tokens, spec.j_main).total;
    std::uint64_t per_step = main;
    switch (spec.mode) {
    case GuidanceMode::none: break;
    case GuidanceMode::cfg: per_step += main; break;
    case GuidanceMode::ag:
    case GuidanceMode::ccfg: per_step += cost_breakdown(cfg, tokens, spec.j_weak).total; break;
    }
    return per_step * static_cast<std::uint64_t>(steps);
}

#define ELIT_INSTANTIATE_GUIDANCE(T)                                                                            \
    template Mat<T> guided_velocity<T>(const ConditionalVelocityFn<T>&, const Mat<T>&, double, int,             \
                                       const GuidanceSpec&);                                                    \
    template VelocityFn<T> guided_field<T>(ConditionalVelocityFn<T>, int, GuidanceSpec);                        \
    template ConditionalVelocityFn<T> model_velocity_fn<T>(Model<T>&);

ELIT_INSTANTIATE_GUIDANCE(float)
ELIT_INSTANTIATE_GUIDANCE(double)

#undef ELIT_INSTANTIATE_GUIDANCE

} // namespace elit
