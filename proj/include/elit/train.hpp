#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "elit/backbone.hpp"
#include "elit/dataset.hpp"
#include "elit/flow.hpp"
#include "elit/guidance.hpp"
#include "elit/latent_interface.hpp"

namespace elit {

struct OptimConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    double warmup_fraction = 0.05; // linear warmup over this fraction of steps, then constant
    double grad_clip = 1.0;        // global L2 norm; <= 0 disables clipping
    double ema_decay = 0.9999;
    // decay min(ema_decay, (1 + step) / (10 + step)) so short runs still move the average
    bool ema_warmup = true;

    void validate() const;
    bool operator==(const OptimConfig&) const = default;
};

struct TrainingConfig {
    std::int64_t steps = 5000;
    int batch_size = 32;
    std::uint64_t seed = 0;
    double class_drop = 0.1;
    DropStrategy drop = DropStrategy::tail;
    TimestepDistribution timesteps;
    OptimConfig optim;
    int log_every = 1;

    void validate() const;
    bool operator==(const TrainingConfig&) const = default;
};

std::string to_string(DropStrategy s);
DropStrategy parse_drop_strategy(const std::string& s);

// One record per iteration.
struct LogRecord {
    std::int64_t step = 0;
    int j_tilde = 0;
    double loss = 0;
    double lr = 0;
    double wallclock = 0; // seconds since the start of the current train_loop call

    // Equality ignores wallclock.
    bool same_trajectory(const LogRecord& o) const {
        return step == o.step && j_tilde == o.j_tilde && loss == o.loss && lr == o.lr;
    }
};

std::string to_json_line(const LogRecord& r);

// Raised when the loss or the gradient norm is not finite.
class DivergenceError : public std::runtime_error {
public:
    DivergenceError(const std::string& what, std::string dump_path)
        : std::runtime_error(what), dump_path(std::move(dump_path)) {}
    std::string dump_path;
};

struct TrainState {
    BackboneConfig backbone;
    TrainingConfig training;
    BudgetSpec budget;
    Model<float> model;
    Model<float> ema;
    ParameterStore<float> adam_m;
    ParameterStore<float> adam_v;
    std::int64_t step = 0;
    Rng rng;

    TrainState(const BackboneConfig& b, const TrainingConfig& t, const BudgetSpec& s);
};

double learning_rate(const TrainingConfig& cfg, std::int64_t step);

struct TrainLoopOptions {
    // Restricts the loss to tokens whose entry is true (padded variants).
    const std::vector<bool>* token_mask = nullptr;
    // Divergence dumps are written here when set.
    std::optional<std::filesystem::path> dump_dir;
    std::function<void(const LogRecord&)> on_record;
    std::function<void(const TrainState&)> on_step;
};

// One optimizer iteration: draws one budget, a batch, timesteps and noise in
// that order from state.rng, then updates the parameters, moments and EMA.
LogRecord train_step(TrainState& state, const Dataset& data, const TrainLoopOptions& opts = {});

// Runs until state.step == state.training.steps.
std::vector<LogRecord> train_loop(TrainState& state, const Dataset& data, const TrainLoopOptions& opts = {});

// Fixed validation pairs shared across budgets.
struct EvalSet {
    Mat<float> x1;
    Mat<float> x0;
    std::vector<double> t;
    std::vector<int> labels;
    Mat<float> mask; // 0/1, same shape as x1
    int tokens = 0;

    Index samples() const { return static_cast<Index>(t.size()); }
};

EvalSet make_eval_set(const Dataset& val, int patch_size, std::uint64_t seed, const TimestepDistribution& dist,
                      const std::vector<bool>* token_mask = nullptr);

// Mean per-sample masked velocity loss at one budget.
double evaluate_loss(Model<float>& model, const EvalSet& set, int budget, int batch_size = 64,
                     const ForwardOptions& opts = {});

// Per-token loss averaged over samples and patch entries (raster order).
std::vector<double> per_token_loss(Model<float>& model, const EvalSet& set, int budget, int batch_size = 64);

struct BudgetEvalRow {
    int j_tilde = 0;
    double val_loss = 0;
    std::uint64_t total_flops = 0;
    bool untrained = false; // budget outside the range the model was trained on
};

std::vector<BudgetEvalRow> evaluate_budgets(Model<float>& model, const EvalSet& set, const std::vector<int>& budgets,
                                            const std::optional<BudgetSpec>& trained = std::nullopt,
                                            int batch_size = 64);

// Euler sampling from seeded Gaussian noise; one image per label.
std::vector<Image> generate_samples(Model<float>& model, const std::vector<int>& labels, const GuidanceSpec& guidance,
                                    int steps, std::uint64_t seed);

} // namespace elit
