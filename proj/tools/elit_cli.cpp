// elit: command-line front end. Exit codes: 0 ok, 1 other failure (or a
// failed padded-probe gate), 2 config error, 3 training divergence, 4 I/O.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "elit/attention_map.hpp"
#include "elit/checkpoint.hpp"
#include "elit/cost_model.hpp"
#include "elit/experiments.hpp"
#include "elit/image_io.hpp"
#include "elit/run_config.hpp"

namespace fs = std::filesystem;
using namespace elit;

namespace {

enum Exit { kOk = 0, kOther = 1, kConfig = 2, kDivergence = 3, kIo = 4 };

RunConfig config_or_default(const std::string& path) {
    RunConfig c = path.empty() ? RunConfig{} : load_config(path);
    c.validate();
    return c;
}

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

std::ofstream open_out(const fs::path& p, std::ios::openmode mode = std::ios::out) {
    if (p.has_parent_path()) ensure_dir(p.parent_path());
    std::ofstream os(p, mode);
    if (!os) throw IoError("cannot write " + p.string());
    return os;
}

struct Data {
    Dataset train;
    Dataset val;
    std::vector<bool> mask; // empty without padding
};

Data load_data(const RunConfig& cfg, const fs::path& out) {
    Data d;
    auto [train, val] = split_validation(cached_dataset(cfg.dataset, out / "cache"),
                                         static_cast<size_t>(cfg.validation_samples));
    if (cfg.padding) {
        PaddedDataset pt = make_padded_variant(train, *cfg.padding, cfg.backbone.patch_size);
        PaddedDataset pv = make_padded_variant(val, *cfg.padding, cfg.backbone.patch_size);
        d.train = std::move(pt.data);
        d.val = std::move(pv.data);
        d.mask = std::move(pt.token_mask);
    } else {
        d.train = std::move(train);
        d.val = std::move(val);
    }
    return d;
}

std::vector<int> parse_int_list(const std::string& s, const std::string& flag) {
    std::vector<int> out;
    std::stringstream ss(s);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            size_t used = 0;
            out.push_back(std::stoi(item, &used));
            if (used != item.size()) throw std::invalid_argument(item);
        } catch (const std::exception&) {
            throw ConfigError(flag + ": cannot read '" + item + "' as an integer");
        }
    }
    return out;
}

// ---- train

struct TrainArgs {
    std::string config;
    std::string resume;
    std::string output_dir;
    std::int64_t steps = 0;
    long long seed = -1;
    std::int64_t checkpoint_every = 0;
};

int cmd_train(const TrainArgs& a) {
    RunConfig cfg;
    std::unique_ptr<TrainState> state;
    if (!a.resume.empty()) {
        if (a.steps || a.seed >= 0 || !a.config.empty())
            throw ConfigError("--resume: the run continues under its embedded config; drop --config, --steps and --seed");
        LoadedCheckpoint ck = load_checkpoint(a.resume);
        cfg = ck.config;
        state = std::move(ck.state);
    } else {
        cfg = config_or_default(a.config);
        if (a.steps) cfg.training.steps = a.steps;
        if (a.seed >= 0) cfg.training.seed = static_cast<std::uint64_t>(a.seed);
    }
    if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
    cfg.validate();
    const fs::path out = resolve_output_dir(cfg);
    ensure_dir(out);
    save_config(out / "config.yaml", cfg);
    if (!state) state = std::make_unique<TrainState>(cfg.backbone, cfg.training, cfg.budget);

    const Data data = load_data(cfg, out);

    // keep the records that precede the resume point, then append
    const fs::path log_path = out / "metrics.jsonl";
    std::vector<std::string> kept;
    if (state->step > 0) {
        std::ifstream in(log_path);
        std::string line;
        while (std::getline(in, line)) {
            const auto pos = line.find("\"step\":");
            if (pos != std::string::npos && std::stoll(line.substr(pos + 7)) <= state->step) kept.push_back(line);
        }
    }
    std::ofstream log = open_out(log_path);
    for (const auto& line : kept) log << line << "\n";

    TrainLoopOptions opts;
    if (!data.mask.empty()) opts.token_mask = &data.mask;
    opts.dump_dir = out;
    opts.on_record = [&](const LogRecord& r) {
        if (r.step % cfg.training.log_every == 0 || r.step == cfg.training.steps) log << to_json_line(r) << "\n";
    };
    opts.on_step = [&](const TrainState& s) {
        if (a.checkpoint_every > 0 && s.step % a.checkpoint_every == 0 && s.step < cfg.training.steps) {
            log.flush();
            save_checkpoint(out / ("checkpoint-" + std::to_string(s.step) + ".elit"), cfg, s);
        }
    };
    const auto records = train_loop(*state, data.train, opts);
    log.flush();
    if (!log) throw IoError("cannot write " + log_path.string());
    save_checkpoint(out / "checkpoint.elit", cfg, *state);

    const EvalSet es = make_eval_set(data.val, cfg.backbone.patch_size, 1234, cfg.training.timesteps,
                                     data.mask.empty() ? nullptr : &data.mask);
    const int j = cfg.backbone.latent_interface ? cfg.budget.j_max : 0;
    std::printf("steps %lld  last loss %.6f  EMA val loss (J=%d) %.6f\n", static_cast<long long>(state->step),
                records.empty() ? 0.0 : records.back().loss, j, evaluate_loss(state->ema, es, j));
    std::printf("wrote %s\n", out.string().c_str());
    return kOk;
}

// ---- sample

struct SampleArgs {
    std::string config;
    std::string checkpoint;
    std::string guidance;
    double lambda = -1;
    int budget = 0;
    int weak_budget = 0;
    int steps = 0;
    std::string labels;
    std::uint64_t seed = 0;
    bool raw = false;
    std::string out = "samples.png";
};

int cmd_sample(const SampleArgs& a) {
    std::unique_ptr<TrainState> state;
    RunConfig cfg;
    if (!a.checkpoint.empty()) {
        LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
        cfg = ck.config;
        state = std::move(ck.state);
    } else {
        cfg = config_or_default(a.config);
        std::fprintf(stderr, "warning: no --checkpoint; sampling from an untrained model\n");
        state = std::make_unique<TrainState>(cfg.backbone, cfg.training, cfg.budget);
    }
    if (!a.guidance.empty()) cfg.guidance.mode = parse_guidance_mode(a.guidance);
    if (a.lambda >= 0) cfg.guidance.lambda = a.lambda;
    if (a.budget) cfg.guidance.j_main = a.budget;
    if (a.weak_budget) cfg.guidance.j_weak = a.weak_budget;
    if (a.steps) cfg.sampler_steps = a.steps;
    cfg.validate();
    const GuidanceSpec spec = resolve_guidance(cfg);

    std::vector<int> labels;
    if (a.labels.empty()) {
        for (int c = 0; c < cfg.backbone.num_classes; ++c) labels.push_back(c);
    } else {
        labels = parse_int_list(a.labels, "--labels");
        for (int l : labels)
            if (l < -1 || l >= cfg.backbone.num_classes) throw ConfigError("--labels: class out of range");
    }
    Model<float>& model = a.raw ? state->model : state->ema;
    std::vector<Image> images = generate_samples(model, labels, spec, cfg.sampler_steps, a.seed);
    if (cfg.padding)
        for (Image& im : images) im = crop_image(im, cfg.dataset.image_size, cfg.dataset.image_size);
    const int cols = std::min<int>(8, static_cast<int>(images.size()));
    write_png(a.out, upscale(tile_images(images, cols), 4));
    const std::uint64_t cost = sampling_cost(cfg.backbone, cfg.backbone.num_tokens(), spec, cfg.sampler_steps);
    std::printf("mode %s  lambda %g  J %d  J_weak %d  steps %d  modeled cost per image %llu\n",
                to_string(spec.mode).c_str(), spec.lambda, spec.j_main, spec.j_weak, cfg.sampler_steps,
                static_cast<unsigned long long>(cost));
    std::printf("wrote %s\n", a.out.c_str());
    return kOk;
}

// ---- eval-budgets

int cmd_eval_budgets(const std::string& checkpoint, const std::string& budgets, bool raw, const std::string& out_csv) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const RunConfig& cfg = ck.config;
    if (!cfg.backbone.latent_interface) throw ConfigError("backbone.latent_interface: eval-budgets needs the latent interface");
    std::vector<int> js;
    if (budgets.empty()) {
        for (int j = cfg.budget.j_min; j <= cfg.budget.j_max; ++j) js.push_back(j);
    } else {
        js = parse_int_list(budgets, "--budgets");
        for (int j : js)
            if (j < 1 || j > cfg.backbone.latents_per_group) throw ConfigError("--budgets: budget out of range");
    }
    const Data data = load_data(cfg, resolve_output_dir(cfg));
    const EvalSet es = make_eval_set(data.val, cfg.backbone.patch_size, 1234, cfg.training.timesteps,
                                     data.mask.empty() ? nullptr : &data.mask);
    const auto rows = evaluate_budgets(raw ? ck.state->model : ck.state->ema, es, js, cfg.budget);
    std::ostringstream csv;
    csv.precision(9);
    csv << "j_tilde,val_loss,total_flops,untrained\n";
    for (const auto& r : rows) {
        if (r.untrained) std::fprintf(stderr, "warning: J=%d lies outside the trained range\n", r.j_tilde);
        csv << r.j_tilde << "," << r.val_loss << "," << r.total_flops << "," << (r.untrained ? 1 : 0) << "\n";
    }
    std::cout << csv.str();
    if (!out_csv.empty()) open_out(out_csv) << csv.str();
    return kOk;
}

// ---- flops

int cmd_flops(const std::string& config, bool reference, const std::string& out_csv) {
    const BackboneConfig cfg = reference ? xl_reference_config() : config_or_default(config).backbone;
    if (!cfg.latent_interface) throw ConfigError("backbone.latent_interface: the budget curve needs the latent interface");
    std::ostringstream csv;
    write_cost_csv(csv, budget_cost_curve(cfg, cfg.num_tokens()));
    if (out_csv.empty()) {
        std::cout << csv.str();
    } else {
        open_out(out_csv) << csv.str();
        std::printf("wrote %s\n", out_csv.c_str());
    }
    return kOk;
}

// ---- probe-attn

int cmd_probe_attn(const std::string& checkpoint, int budget, int index, double t, const std::string& out_png) {
    LoadedCheckpoint ck = load_checkpoint(checkpoint);
    const RunConfig& cfg = ck.config;
    const int j = budget ? budget : cfg.budget.j_max;
    const Data data = load_data(cfg, resolve_output_dir(cfg));
    const std::vector<bool>* mask = data.mask.empty() ? nullptr : &data.mask;
    const EvalSet es = make_eval_set(data.val, cfg.backbone.patch_size, 1234, cfg.training.timesteps, mask);
    Model<float>& model = ck.state->ema;

    if (index < 0 || static_cast<size_t>(index) >= data.val.size()) throw ConfigError("--index: out of range");
    const Image& x1 = data.val.images[static_cast<size_t>(index)];
    Rng rng(cfg.training.seed ^ static_cast<std::uint64_t>(index));
    std::normal_distribution<float> normal(0.0f, 1.0f);
    Image xt(x1.channels, x1.height, x1.width);
    for (size_t k = 0; k < xt.data.size(); ++k)
        xt.data[k] = static_cast<float>((1.0 - t) * normal(rng) + t * x1.data[k]);
    const Heatmap one = read_attention_map(model, xt, t, data.val.labels[static_cast<size_t>(index)], j);
    write_png(out_png, render_heatmap(one, 8));

    const Heatmap avg = mean_read_attention(model, es, j);
    const int tpg = cfg.backbone.tokens_per_group();
    std::printf("within-group entropy %.4f (uniform %.4f)\n", within_group_entropy(avg), std::log(double(tpg)));
    const auto loss = per_token_loss(model, es, j);
    std::vector<double> mass(avg.values.data(), avg.values.data() + avg.values.size());
    std::printf("spearman(per-token loss, attention) %.4f\n", spearman(loss, mass));
    if (mask) {
        const auto [real, pad] = masked_means(avg, *mask);
        std::printf("mean attention per real token %.5f, per padded token %.5f\n", real, pad);
    }
    std::printf("wrote %s\n", out_png.c_str());
    return kOk;
}

// ---- padded-probe

int cmd_padded_probe(std::int64_t steps, const std::string& seeds, const std::string& out_dir) {
    PaddedProbeConfig c = PaddedProbeConfig::desk();
    if (steps) c.training.steps = steps;
    if (!seeds.empty()) {
        c.seeds.clear();
        for (int s : parse_int_list(seeds, "--seeds")) c.seeds.push_back(static_cast<std::uint64_t>(s));
    }
    const PaddedProbeResult r = run_padded_probe(c, [](const std::string& s) { std::printf("%s\n", s.c_str()); });
    for (const auto& a : r.arms)
        std::printf("%-12s tokens %3d  flops %10llu  median val loss %.6f\n", a.name.c_str(), a.tokens,
                    static_cast<unsigned long long>(a.flops), a.median);
    std::printf("ELIT padded / ELIT large-token = %.4f  (gate: within %.0f%%) %s\n", r.elit_ratio,
                100 * c.gate_tolerance, r.hard_gate ? "PASS" : "FAIL");
    std::printf("DiT small-token - DiT padded = %.6f  (seed range %.6f) %s\n", r.dit_gain, r.dit_noise,
                r.soft_check ? "no gain from padding" : "padding helped");
    if (!out_dir.empty()) {
        const fs::path out = fs::path(out_dir);
        std::ofstream os = open_out(out / "padded_probe.csv");
        write_probe_csv(os, r, c.seeds);
        std::printf("wrote %s\n", (out / "padded_probe.csv").string().c_str());
    }
    return r.hard_gate ? kOk : kOther;
}

// ---- rho

int cmd_rho(bool table, double mh, double ml, double fh, double fl, bool higher) {
    if (table) {
        for (const auto& t : reference_tradeoffs())
            std::printf("%-9s rho %.3f  (printed %.2f)\n", t.name.c_str(), rho(t.input), t.printed);
        return kOk;
    }
    const double v = rho({mh, ml, fh, fl, higher ? MetricDirection::higher_better : MetricDirection::lower_better});
    std::printf("%.6f\n", v);
    return kOk;
}

int run(int argc, char** argv) {
    CLI::App app{"ELIT: elastic latent interface transformer for rectified-flow image generation"};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "expand all subcommand help");

    TrainArgs ta;
    auto* train = app.add_subcommand("train", "train a model from a config; the config file is the experiment record");
    train->add_option("-c,--config", ta.config, "YAML run config (defaults when omitted)");
    train->add_option("--resume", ta.resume, "continue from a checkpoint");
    train->add_option("--output-dir", ta.output_dir, "override output_dir");
    train->add_option("--steps", ta.steps, "override training.steps");
    train->add_option("--seed", ta.seed, "override training.seed");
    train->add_option("--checkpoint-every", ta.checkpoint_every, "also write checkpoint-<step>.elit every N steps");

    SampleArgs sa;
    auto* sample = app.add_subcommand("sample", "draw class-conditional images; guidance and budget trade quality for compute");
    sample->add_option("-c,--config", sa.config, "run config, used without --checkpoint");
    sample->add_option("--checkpoint", sa.checkpoint, "trained checkpoint");
    sample->add_option("--guidance", sa.guidance, "none, cfg, ag or ccfg");
    sample->add_option("--lambda", sa.lambda, "guidance scale");
    sample->add_option("--budget", sa.budget, "latents per group for the main pass");
    sample->add_option("--weak-budget", sa.weak_budget, "latents per group for the weak pass (ag, ccfg)");
    sample->add_option("--steps", sa.steps, "Euler steps");
    sample->add_option("--labels", sa.labels, "comma-separated classes, -1 for unconditional (default: all)");
    sample->add_option("--seed", sa.seed, "noise seed");
    sample->add_flag("--raw", sa.raw, "use raw weights instead of the EMA");
    sample->add_option("-o,--out", sa.out, "PNG grid");

    std::string ck, budgets, out_csv;
    bool raw = false;
    auto* evalb = app.add_subcommand("eval-budgets", "paired validation loss per budget; shows the quality-compute curve of one model");
    evalb->add_option("--checkpoint", ck, "trained checkpoint")->required();
    evalb->add_option("--budgets", budgets, "comma-separated budgets (default: trained range)");
    evalb->add_flag("--raw", raw, "use raw weights instead of the EMA");
    evalb->add_option("-o,--out", out_csv, "also write the CSV here");

    std::string fcfg, fout;
    bool reference = false;
    auto* flops = app.add_subcommand("flops", "modeled cost per budget; lets budgets be chosen without running the model");
    flops->add_option("-c,--config", fcfg, "run config (defaults when omitted)");
    flops->add_flag("--reference", reference, "use the XL-like reference architecture");
    flops->add_option("-o,--out", fout, "CSV path (stdout when omitted)");

    std::string pck, pout = "read_attention.png";
    int pbudget = 0, pindex = 0;
    double pt = 0.5;
    auto* probe = app.add_subcommand("probe-attn", "Read attention heatmap; shows which tokens the latents look at");
    probe->add_option("--checkpoint", pck, "trained checkpoint")->required();
    probe->add_option("--budget", pbudget, "latents per group (default J_max)");
    probe->add_option("--index", pindex, "validation sample for the heatmap image");
    probe->add_option("--t", pt, "noise level, 0 noise to 1 data")->check(CLI::Range(0.0, 1.0));
    probe->add_option("-o,--out", pout, "PNG path");

    std::int64_t psteps = 0;
    std::string pseeds, pdir;
    auto* padded = app.add_subcommand("padded-probe", "four-model padding experiment; checks that latents ignore zero padding");
    padded->add_option("--steps", psteps, "training steps per model");
    padded->add_option("--seeds", pseeds, "comma-separated seeds (default 0,1,2)");
    padded->add_option("-o,--out", pdir, "directory for padded_probe.csv");

    bool table = false, higher = false;
    double mh = 0, ml = 0, fh = 0, fl = 0;
    auto* rhoc = app.add_subcommand("rho", "quality lost per unit of compute saved; compares elastic inference options");
    rhoc->add_flag("--table", table, "evaluate the published reference pairs");
    rhoc->add_option("--metric-high", mh, "metric at the higher compute");
    rhoc->add_option("--metric-low", ml, "metric at the lower compute");
    rhoc->add_option("--flops-high", fh, "higher compute");
    rhoc->add_option("--flops-low", fl, "lower compute");
    rhoc->add_flag("--higher-better", higher, "metric improves upward (IS)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kConfig;
    }

    if (*train) return cmd_train(ta);
    if (*sample) return cmd_sample(sa);
    if (*evalb) return cmd_eval_budgets(ck, budgets, raw, out_csv);
    if (*flops) return cmd_flops(fcfg, reference, fout);
    if (*probe) return cmd_probe_attn(pck, pbudget, pindex, pt, pout);
    if (*padded) return cmd_padded_probe(psteps, pseeds, pdir);
    if (*rhoc) {
        if (!table && (fh <= 0 || fl <= 0)) throw ConfigError("rho: give --table or all four values");
        return cmd_rho(table, mh, ml, fh, fl, higher);
    }
    return kOther;
}

} // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kConfig;
    } catch (const DivergenceError& e) {
        std::fprintf(stderr, "diverged: %s\n", e.what());
        if (!e.dump_path.empty()) std::fprintf(stderr, "state dump: %s\n", e.dump_path.c_str());
        return kDivergence;
    } catch (const IntegrityError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kIo;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kOther;
    }
}
