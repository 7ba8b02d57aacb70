#include "elit/train.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "elit/cost_model.hpp"

namespace elit {

namespace {

void check(bool ok, const std::string& field, const std::string& why) {
    if (!ok) throw ConfigError("training." + field + ": " + why);
}

ParameterStore<float> zeros_like(const ParameterStore<float>& store) {
    ParameterStore<float> out;
    for (const auto& [name, p] : store.all()) out.add(name, Mat<float>::Zero(p.value.rows(), p.value.cols()));
    return out;
}

std::string write_dump(const TrainState& state, const std::filesystem::path& dir, int j_tilde, double loss,
                       double grad_norm) {
    std::filesystem::create_directories(dir);
    const auto path = dir / ("divergence-step" + std::to_string(state.step) + ".json");
    nlohmann::ordered_json j;
    j["step"] = state.step;
    j["j_tilde"] = j_tilde;
    j["loss"] = std::isfinite(loss) ? nlohmann::ordered_json(loss) : nlohmann::ordered_json(std::to_string(loss));
    j["grad_norm"] =
        std::isfinite(grad_norm) ? nlohmann::ordered_json(grad_norm) : nlohmann::ordered_json(std::to_string(grad_norm));
    j["lr"] = learning_rate(state.training, state.step);
    auto& params = j["parameters"];
    for (const auto& [name, p] : state.model.params().all()) {
        nlohmann::ordered_json e;
        e["value_norm"] = static_cast<double>(p.value.norm());
        e["value_finite"] = p.value.allFinite();
        e["grad_finite"] = p.grad.allFinite();
        params[name] = e;
    }
    std::ofstream out(path);
    out << j.dump(2) << "\n";
    return path.string();
}

} // namespace

void OptimConfig::validate() const {
    check(lr > 0.0, "lr", "must be positive");
    check(beta1 >= 0.0 && beta1 < 1.0, "beta1", "must lie in [0, 1)");
    check(beta2 >= 0.0 && beta2 < 1.0, "beta2", "must lie in [0, 1)");
    check(eps > 0.0, "eps", "must be positive");
    check(weight_decay >= 0.0, "weight_decay", "must be non-negative");
    check(warmup_fraction >= 0.0 && warmup_fraction <= 1.0, "warmup_fraction", "must lie in [0, 1]");
    check(ema_decay >= 0.0 && ema_decay < 1.0, "ema_decay", "must lie in [0, 1)");
}

void TrainingConfig::validate() const {
    check(steps >= 1, "steps", "must be >= 1");
    check(batch_size >= 1, "batch_size", "must be >= 1");
    check(class_drop >= 0.0 && class_drop <= 1.0, "class_drop", "must lie in [0, 1]");
    check(log_every >= 1, "log_every", "must be >= 1");
    if (!(timesteps.scale > 0.0)) throw ConfigError("flow.scale: must be positive");
    optim.validate();
}

std::string to_string(DropStrategy s) { return s == DropStrategy::tail ? "tail" : "random"; }

DropStrategy parse_drop_strategy(const std::string& s) {
    if (s == "tail") return DropStrategy::tail;
    if (s == "random") return DropStrategy::random;
    throw ConfigError("budget.drop: unknown strategy '" + s + "' (expected tail or random)");
}

std::string to_json_line(const LogRecord& r) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["j_tilde"] = r.j_tilde;
    j["loss"] = r.loss;
    j["lr"] = r.lr;
    j["wallclock"] = r.wallclock;
    return j.dump();
}

TrainState::TrainState(const BackboneConfig& b, const TrainingConfig& t, const BudgetSpec& s)
    : backbone(b), training(t), budget(s), model(b, t.seed), ema(b, t.seed), rng(t.seed ^ 0x5eedULL) {
    t.validate();
    if (b.latent_interface) s.validate(b.latents_per_group);
    adam_m = zeros_like(model.params());
    adam_v = zeros_like(model.params());
}

double learning_rate(const TrainingConfig& cfg, std::int64_t step) {
    const double warmup = std::floor(cfg.optim.warmup_fraction * static_cast<double>(cfg.steps));
    if (warmup <= 0.0) return cfg.optim.lr;
    return cfg.optim.lr * std::min(1.0, static_cast<double>(step + 1) / warmup);
}

LogRecord train_step(TrainState& state, const Dataset& data, const TrainLoopOptions& opts) {
    if (data.size() == 0) throw ShapeError("train_step: empty dataset");
    const BackboneConfig& cfg = state.backbone;
    const TrainingConfig& tc = state.training;
    const int b = tc.batch_size;
    const int n = cfg.num_tokens();
    Rng& rng = state.rng;

    // one budget per iteration, drawn before anything else
    const int j_tilde = cfg.latent_interface ? sample_budget(state.budget, rng).j_tilde : 0;

    std::uniform_int_distribution<size_t> pick(0, data.size() - 1);
    std::vector<Image> images;
    std::vector<int> labels;
    images.reserve(static_cast<size_t>(b));
    for (int i = 0; i < b; ++i) {
        const size_t k = pick(rng);
        images.push_back(data.images[k]);
        labels.push_back(data.labels[k]);
    }
    std::bernoulli_distribution drop(tc.class_drop);
    for (int& y : labels)
        if (drop(rng)) y = -1;
    const std::vector<double> t = sample_timesteps(static_cast<size_t>(b), tc.timesteps, rng);

    ModelBatch<float> batch;
    const Mat<float> x1 = images_to_patches<float>(images, cfg.patch_size);
    Mat<float> x0(x1.rows(), x1.cols());
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (Index i = 0; i < x0.size(); ++i) x0.data()[i] = normal(rng);
    batch.patches.resize(x1.rows(), x1.cols());
    for (int s = 0; s < b; ++s) {
        const float ts = static_cast<float>(t[static_cast<size_t>(s)]);
        batch.patches.middleRows(Index(s) * n, n) = (1.0f - ts) * x0.middleRows(Index(s) * n, n) + ts * x1.middleRows(Index(s) * n, n);
    }
    batch.t = t;
    batch.labels = labels;
    batch.budget = cfg.latent_interface ? j_tilde : 1;

    ForwardOptions fopts;
    if (cfg.latent_interface && tc.drop == DropStrategy::random)
        fopts.retained = retained_indices(DropStrategy::random, cfg.latents_per_group, Budget{j_tilde}, &rng);

    const Mat<float> target = x1 - x0;
    const Mat<float> mask = opts.token_mask ? token_mask_matrix<float>(*opts.token_mask, b, cfg.patch_dim())
                                            : Mat<float>::Ones(target.rows(), target.cols());

    state.model.params().zero_grad();
    Graph<float> g;
    Var out = state.model.forward(g, batch, fopts);
    Var loss_var = g.masked_mse(out, target, mask, n);
    const double loss = static_cast<double>(g.value(loss_var)(0, 0));
    double norm2 = 0.0;
    if (std::isfinite(loss)) {
        g.backward(loss_var);
        for (const auto& [_, p] : state.model.params().all()) norm2 += static_cast<double>(p.grad.squaredNorm());
    }
    const double grad_norm = std::isfinite(loss) ? std::sqrt(norm2) : std::numeric_limits<double>::quiet_NaN();
    if (!std::isfinite(loss) || !std::isfinite(grad_norm)) {
        std::string dump;
        if (opts.dump_dir) dump = write_dump(state, *opts.dump_dir, j_tilde, loss, grad_norm);
        throw DivergenceError("training diverged at step " + std::to_string(state.step + 1) +
                                  " (loss=" + std::to_string(loss) + ", grad_norm=" + std::to_string(grad_norm) + ")",
                              dump);
    }

    const OptimConfig& oc = tc.optim;
    const double clip = (oc.grad_clip > 0.0 && grad_norm > oc.grad_clip) ? oc.grad_clip / (grad_norm + 1e-6) : 1.0;
    const double lr = learning_rate(tc, state.step);
    const std::int64_t k = state.step + 1;
    const double bc1 = 1.0 - std::pow(oc.beta1, static_cast<double>(k));
    const double bc2 = 1.0 - std::pow(oc.beta2, static_cast<double>(k));
    const double decay = oc.ema_warmup ? std::min(oc.ema_decay, (1.0 + static_cast<double>(state.step)) /
                                                                    (10.0 + static_cast<double>(state.step)))
                                       : oc.ema_decay;
    const float b1 = static_cast<float>(oc.beta1), b2 = static_cast<float>(oc.beta2);
    for (auto& [name, p] : state.model.params().all()) {
        Mat<float>& m = state.adam_m.get(name).value;
        Mat<float>& v = state.adam_v.get(name).value;
        const Mat<float> grad = p.grad * static_cast<float>(clip);
        m = b1 * m + (1.0f - b1) * grad;
        v = b2 * v + (1.0f - b2) * grad.cwiseAbs2();
        const auto mhat = m.array() / static_cast<float>(bc1);
        const auto vhat = v.array() / static_cast<float>(bc2);
        if (oc.weight_decay > 0.0) p.value *= static_cast<float>(1.0 - lr * oc.weight_decay);
        p.value.array() -= static_cast<float>(lr) * mhat / (vhat.sqrt() + static_cast<float>(oc.eps));
        Mat<float>& e = state.ema.params().get(name).value;
        e = static_cast<float>(decay) * e + static_cast<float>(1.0 - decay) * p.value;
    }
    ++state.step;
    return LogRecord{state.step, j_tilde, loss, lr, 0.0};
}

std::vector<LogRecord> train_loop(TrainState& state, const Dataset& data, const TrainLoopOptions& opts) {
    std::vector<LogRecord> log;
    const auto start = std::chrono::steady_clock::now();
    while (state.step < state.training.steps) {
        LogRecord r = train_step(state, data, opts);
        r.wallclock = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        if (opts.on_record) opts.on_record(r);
        log.push_back(r);
        if (opts.on_step) opts.on_step(state);
    }
    return log;
}

EvalSet make_eval_set(const Dataset& val, int patch_size, std::uint64_t seed, const TimestepDistribution& dist,
                      const std::vector<bool>* token_mask) {
    if (val.size() == 0) throw ShapeError("make_eval_set: empty validation set");
    EvalSet s;
    s.x1 = images_to_patches<float>(val.images, patch_size);
    s.labels = val.labels;
    s.tokens = static_cast<int>(s.x1.rows() / static_cast<Index>(val.size()));
    Rng rng(seed);
    s.t = sample_timesteps(val.size(), dist, rng);
    s.x0.resize(s.x1.rows(), s.x1.cols());
    std::normal_distribution<float> normal(0.0f, 1.0f);
    for (Index i = 0; i < s.x0.size(); ++i) s.x0.data()[i] = normal(rng);
    if (token_mask) {
        if (static_cast<int>(token_mask->size()) != s.tokens) throw ShapeError("make_eval_set: token mask size");
        s.mask = token_mask_matrix<float>(*token_mask, s.samples(), static_cast<int>(s.x1.cols()));
    } else {
        s.mask = Mat<float>::Ones(s.x1.rows(), s.x1.cols());
    }
    return s;
}

namespace {

ModelBatch<float> eval_batch(const EvalSet& set, Index begin, Index count, int budget) {
    const Index n = set.tokens;
    ModelBatch<float> batch;
    batch.patches.resize(count * n, set.x1.cols());
    for (Index s = 0; s < count; ++s) {
        const float t = static_cast<float>(set.t[static_cast<size_t>(begin + s)]);
        batch.patches.middleRows(s * n, n) =
            (1.0f - t) * set.x0.middleRows((begin + s) * n, n) + t * set.x1.middleRows((begin + s) * n, n);
        batch.t.push_back(set.t[static_cast<size_t>(begin + s)]);
        batch.labels.push_back(set.labels[static_cast<size_t>(begin + s)]);
    }
    batch.budget = budget;
    return batch;
}

} // namespace

double evaluate_loss(Model<float>& model, const EvalSet& set, int budget, int batch_size, const ForwardOptions& opts) {
    const Index n = set.tokens;
    const int eff_budget = model.config().latent_interface ? budget : 1;
    double total = 0.0;
    for (Index begin = 0; begin < set.samples(); begin += batch_size) {
        const Index count = std::min<Index>(batch_size, set.samples() - begin);
        const Mat<float> pred = model.predict(eval_batch(set, begin, count, eff_budget), opts);
        for (Index s = 0; s < count; ++s) {
            const auto rows = [&](const Mat<float>& m) { return m.middleRows((begin + s) * n, n); };
            const auto p = pred.middleRows(s * n, n).cast<double>();
            const Mat<double> target = (rows(set.x1) - rows(set.x0)).cast<double>();
            const Mat<double> mask = rows(set.mask).cast<double>();
            total += ((p - target).array().square() * mask.array()).sum() / mask.sum();
        }
    }
    return total / static_cast<double>(set.samples());
}

std::vector<double> per_token_loss(Model<float>& model, const EvalSet& set, int budget, int batch_size) {
    const Index n = set.tokens;
    const int eff_budget = model.config().latent_interface ? budget : 1;
    std::vector<double> out(static_cast<size_t>(n), 0.0);
    for (Index begin = 0; begin < set.samples(); begin += batch_size) {
        const Index count = std::min<Index>(batch_size, set.samples() - begin);
        const Mat<float> pred = model.predict(eval_batch(set, begin, count, eff_budget));
        for (Index s = 0; s < count; ++s)
            for (Index i = 0; i < n; ++i) {
                const Index row = (begin + s) * n + i;
                const auto err = (pred.row(s * n + i) - (set.x1.row(row) - set.x0.row(row))).cast<double>();
                out[static_cast<size_t>(i)] += err.squaredNorm() / static_cast<double>(err.size());
            }
    }
    for (double& v : out) v /= static_cast<double>(set.samples());
    return out;
}

std::vector<BudgetEvalRow> evaluate_budgets(Model<float>& model, const EvalSet& set, const std::vector<int>& budgets,
                                            const std::optional<BudgetSpec>& trained, int batch_size) {
    std::vector<BudgetEvalRow> rows;
    for (int j : budgets) {
        BudgetEvalRow r;
        r.j_tilde = j;
        r.untrained = trained && (j < trained->j_min || j > trained->j_max);
        r.val_loss = evaluate_loss(model, set, j, batch_size);
        r.total_flops = cost_breakdown(model.config(), model.config().num_tokens(), j).total;
        rows.push_back(r);
    }
    return rows;
}

std::vector<Image> generate_samples(Model<float>& model, const std::vector<int>& labels, const GuidanceSpec& guidance,
                                    int steps, std::uint64_t seed) {
    const BackboneConfig& cfg = model.config();
    const auto velocity = model_velocity_fn(model);
    Rng rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::vector<Image> out;
    for (int label : labels) {
        Image noise(cfg.channels, cfg.image_size, cfg.image_size);
        for (float& v : noise.data) v = normal(rng);
        const Mat<float> x0 = patchify_pixels<float>(noise, cfg.patch_size);
        const Mat<float> x1 = euler_sample<float>(guided_field<float>(velocity, label, guidance), x0, steps);
        out.push_back(unpatchify_pixels<float>(x1, cfg.channels, cfg.image_size, cfg.image_size, cfg.patch_size));
    }
    return out;
}

} // namespace elit
