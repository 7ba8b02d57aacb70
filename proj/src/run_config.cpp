#include "elit/run_config.hpp"

#include <yaml-cpp/yaml.h>

#include <charconv>
#include <cstdlib>
#include <set>
#include <sstream>

#include "elit/binary_io.hpp"

namespace elit {

namespace {

void fail(const std::string& field, const std::string& msg) { throw ConfigError(field + ": " + msg); }

// Reads the keys of one mapping and rejects anything it did not ask for.
class Section {
public:
    Section(const YAML::Node& node, std::string name) : node_(node), name_(std::move(name)) {
        if (node_ && !node_.IsNull() && !node_.IsMap()) fail(name_, "expected a mapping");
    }

    template <typename T>
    void get(const char* key, T& out) {
        seen_.insert(key);
        if (!node_ || node_.IsNull()) return;
        const YAML::Node v = node_[key];
        if (!v) return;
        const std::string field = name_.empty() ? key : name_ + "." + key;
        if (!v.IsScalar()) fail(field, "expected a scalar");
        try {
            if constexpr (std::is_same_v<T, int>) {
                const long long x = v.as<long long>();
                if (x < INT32_MIN || x > INT32_MAX) fail(field, "out of range");
                out = static_cast<int>(x);
            } else {
                out = v.as<T>();
            }
        } catch (const YAML::BadConversion&) {
            fail(field, "cannot read '" + v.Scalar() + "' as " + type_name<T>());
        }
    }

    YAML::Node child(const char* key) {
        seen_.insert(key);
        if (!node_ || node_.IsNull()) return YAML::Node();
        return node_[key];
    }

    void finish() const {
        if (!node_ || node_.IsNull()) return;
        for (const auto& kv : node_) {
            const std::string key = kv.first.as<std::string>();
            if (!seen_.count(key)) fail(name_.empty() ? key : name_ + "." + key, "unknown key");
        }
    }

private:
    template <typename T>
    static const char* type_name() {
        if constexpr (std::is_same_v<T, bool>) return "a boolean";
        else if constexpr (std::is_same_v<T, std::string>) return "a string";
        else if constexpr (std::is_floating_point_v<T>) return "a number";
        else return "an integer";
    }

    YAML::Node node_;
    std::string name_;
    std::set<std::string> seen_;
};

std::string num(double x) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, x);
    std::string s(buf, r.ptr);
    // keep a float-looking literal so the type is obvious to readers
    if (s.find_first_of(".eEn") == std::string::npos) s += ".0";
    return s;
}

std::string quoted(const std::string& s) {
    std::string out = "\"";
    for (char c : s) {
        if (c == '"' || c == '\\') out += '\\';
        out += c;
    }
    return out + "\"";
}

class Writer {
public:
    void section(const std::string& name, const std::string& comment) {
        out_ << "\n# " << comment << "\n" << name << ":\n";
    }
    void line(const std::string& key, const std::string& value, const std::string& comment) {
        std::string kv = "  " + key + ": " + value;
        if (kv.size() < 32) kv.resize(32, ' ');
        else kv += "  ";
        out_ << kv << "# " << comment << "\n";
    }
    void raw(const std::string& s) { out_ << s; }
    std::string str() const { return out_.str(); }

private:
    std::ostringstream out_;
};

std::string b(bool v) { return v ? "true" : "false"; }
std::string i(long long v) { return std::to_string(v); }

} // namespace

void RunConfig::validate() const {
    backbone.validate();
    if (sampler_steps < 1) fail("flow.sampler_steps", "must be >= 1");
    if (backbone.latent_interface) budget.validate(backbone.latents_per_group);
    dataset.validate();
    if (padding) padding->validate();
    if (dataset.channels != backbone.channels) fail("dataset.channels", "must equal backbone.channels");
    if (dataset.num_classes != backbone.num_classes) fail("dataset.num_classes", "must equal backbone.num_classes");
    const int side = padding ? padding->side_factor() : 1;
    if (backbone.image_size != dataset.image_size * side)
        fail("backbone.image_size", "must equal dataset.image_size" + std::string(padding ? " x padding side factor" : "") +
                                        " (" + std::to_string(dataset.image_size * side) + ")");
    if (dataset.image_size % backbone.patch_size != 0)
        fail("dataset.image_size", "must be divisible by backbone.patch_size");
    const long long total = static_cast<long long>(dataset.num_classes) * dataset.samples_per_class;
    if (validation_samples < 0 || validation_samples >= total)
        fail("dataset.validation_samples", "must lie in [0, " + std::to_string(total) + ")");
    training.validate();
    if (!(guidance.lambda >= 0.0)) fail("guidance.lambda", "must be non-negative");
    const bool weak = guidance.mode == GuidanceMode::ag || guidance.mode == GuidanceMode::ccfg;
    if (!backbone.latent_interface) {
        if (weak) fail("guidance.mode", "ag and ccfg need backbone.latent_interface");
    } else {
        if (guidance.j_main != 0 && (guidance.j_main < budget.j_min || guidance.j_main > budget.j_max))
            fail("guidance.J_main", "must be 0 or lie in [budget.J_min, budget.J_max]");
        const int main = guidance.j_main ? guidance.j_main : budget.j_max;
        if (guidance.j_weak < 0 || guidance.j_weak > main) fail("guidance.J_weak", "must be 0 or lie in [1, J_main]");
    }
    if (output_dir.empty()) fail("output_dir", "must not be empty");
}

RunConfig parse_config(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw ConfigError("config: parse error at line " + std::to_string(e.mark.line + 1) + ": " + e.msg);
    }
    RunConfig c;
    Section top(root, "");

    Section bb(top.child("backbone"), "backbone");
    BackboneConfig& k = c.backbone;
    bb.get("width", k.width);
    bb.get("heads", k.heads);
    bb.get("blocks_in", k.blocks_in);
    bb.get("blocks_core", k.blocks_core);
    bb.get("blocks_out", k.blocks_out);
    bb.get("patch_size", k.patch_size);
    bb.get("image_size", k.image_size);
    bb.get("channels", k.channels);
    bb.get("num_classes", k.num_classes);
    bb.get("group_rows", k.group_rows);
    bb.get("group_cols", k.group_cols);
    bb.get("latents_per_group", k.latents_per_group);
    bb.get("latent_interface", k.latent_interface);
    bb.get("use_rope", k.use_rope);
    bb.get("use_abs_pos", k.use_abs_pos);
    bb.get("latent_rope", k.latent_rope);
    bb.get("write_adaln", k.write_adaln);
    bb.get("mlp_ratio", k.mlp_ratio);
    bb.get("time_freq_dim", k.time_freq_dim);
    bb.get("rope_theta", k.rope_theta);
    bb.get("norm_eps", k.norm_eps);
    bb.get("init_std", k.init_std);
    bb.finish();

    Section fl(top.child("flow"), "flow");
    fl.get("location", c.training.timesteps.location);
    fl.get("scale", c.training.timesteps.scale);
    fl.get("sampler_steps", c.sampler_steps);
    fl.finish();

    Section bu(top.child("budget"), "budget");
    bu.get("J_min", c.budget.j_min);
    bu.get("J_max", c.budget.j_max);
    std::string drop = to_string(c.training.drop);
    bu.get("drop", drop);
    c.training.drop = parse_drop_strategy(drop);
    bu.finish();

    Section gu(top.child("guidance"), "guidance");
    std::string mode = to_string(c.guidance.mode);
    gu.get("mode", mode);
    try {
        c.guidance.mode = parse_guidance_mode(mode);
    } catch (const std::exception&) {
        fail("guidance.mode", "unknown mode '" + mode + "' (expected none, cfg, ag or ccfg)");
    }
    gu.get("lambda", c.guidance.lambda);
    gu.get("J_main", c.guidance.j_main);
    gu.get("J_weak", c.guidance.j_weak);
    gu.finish();

    Section ds(top.child("dataset"), "dataset");
    std::string kind = to_string(c.dataset.kind);
    ds.get("kind", kind);
    c.dataset.kind = parse_dataset_kind(kind);
    ds.get("image_size", c.dataset.image_size);
    ds.get("channels", c.dataset.channels);
    ds.get("num_classes", c.dataset.num_classes);
    ds.get("samples_per_class", c.dataset.samples_per_class);
    ds.get("seed", c.dataset.seed);
    ds.get("image_dir", c.dataset.image_dir);
    ds.get("validation_samples", c.validation_samples);
    ds.finish();

    const YAML::Node pad = top.child("padding");
    if (pad && !pad.IsNull()) {
        PaddedVariantSpec p;
        Section ps(pad, "padding");
        ps.get("pad_factor", p.pad_factor);
        ps.get("fill_value", p.fill_value);
        ps.finish();
        c.padding = p;
    }

    Section tr(top.child("training"), "training");
    TrainingConfig& t = c.training;
    tr.get("steps", t.steps);
    tr.get("batch_size", t.batch_size);
    tr.get("seed", t.seed);
    tr.get("class_drop", t.class_drop);
    tr.get("lr", t.optim.lr);
    tr.get("beta1", t.optim.beta1);
    tr.get("beta2", t.optim.beta2);
    tr.get("eps", t.optim.eps);
    tr.get("weight_decay", t.optim.weight_decay);
    tr.get("warmup_fraction", t.optim.warmup_fraction);
    tr.get("grad_clip", t.optim.grad_clip);
    tr.get("ema_decay", t.optim.ema_decay);
    tr.get("ema_warmup", t.optim.ema_warmup);
    tr.get("log_every", t.log_every);
    tr.finish();

    top.get("output_dir", c.output_dir);
    top.finish();

    c.validate();
    return c;
}

RunConfig load_config(const std::filesystem::path& path) {
    const auto bytes = read_file(path.string());
    return parse_config(std::string(bytes.begin(), bytes.end()));
}

std::string emit_config(const RunConfig& c) {
    Writer w;
    w.raw("# ELIT run configuration. Every key is optional; omitted keys take the\n"
          "# values shown here.\n");
    const BackboneConfig& k = c.backbone;
    w.section("backbone", "architecture");
    w.line("width", i(k.width), "hidden width d");
    w.line("heads", i(k.heads), "attention heads, must divide width");
    w.line("blocks_in", i(k.blocks_in), "spatial blocks before Read");
    w.line("blocks_core", i(k.blocks_core), "latent blocks between Read and Write");
    w.line("blocks_out", i(k.blocks_out), "spatial blocks after Write");
    w.line("patch_size", i(k.patch_size), "pixels per patch side");
    w.line("image_size", i(k.image_size), "input side, padded canvas included");
    w.line("channels", i(k.channels), "image channels");
    w.line("num_classes", i(k.num_classes), "class labels, plus one null class for dropout");
    w.line("group_rows", i(k.group_rows), "group grid rows");
    w.line("group_cols", i(k.group_cols), "group grid cols");
    w.line("latents_per_group", i(k.latents_per_group), "J");
    w.line("latent_interface", b(k.latent_interface), "false gives the plain DiT baseline");
    w.line("use_rope", b(k.use_rope), "2D rotary embedding on spatial tokens");
    w.line("use_abs_pos", b(k.use_abs_pos), "learned absolute position table");
    w.line("latent_rope", b(k.latent_rope), "1D rotary embedding on latents");
    w.line("write_adaln", b(k.write_adaln), "timestep modulation in Write");
    w.line("mlp_ratio", i(k.mlp_ratio), "MLP hidden = mlp_ratio * width");
    w.line("time_freq_dim", i(k.time_freq_dim), "sinusoidal timestep features");
    w.line("rope_theta", num(k.rope_theta), "rotary base frequency");
    w.line("norm_eps", num(k.norm_eps), "layer norm epsilon");
    w.line("init_std", num(k.init_std), "normal init std for linear weights");

    w.section("flow", "logit-normal timestep sampling and Euler sampler");
    w.line("location", num(c.training.timesteps.location), "logit-normal mean");
    w.line("scale", num(c.training.timesteps.scale), "logit-normal std, > 0");
    w.line("sampler_steps", i(c.sampler_steps), "Euler steps at sampling");

    w.section("budget", "latents kept per group during training, drawn uniformly per step");
    w.line("J_min", i(c.budget.j_min), ">= 1");
    w.line("J_max", i(c.budget.j_max), "<= backbone.latents_per_group");
    w.line("drop", to_string(c.training.drop), "tail or random");

    w.section("guidance", "sampling guidance");
    w.line("mode", to_string(c.guidance.mode), "none, cfg, ag or ccfg");
    w.line("lambda", num(c.guidance.lambda), "(lambda + 1) main - lambda guide");
    w.line("J_main", i(c.guidance.j_main), "0 = budget.J_max");
    w.line("J_weak", i(c.guidance.j_weak), "0 = largest budget at <= 35% of the main cost");

    w.section("dataset", "toy data");
    w.line("kind", to_string(c.dataset.kind), "shapes or external_image_dir");
    w.line("image_size", i(c.dataset.image_size), "real content side, before padding");
    w.line("channels", i(c.dataset.channels), "1 or 3");
    w.line("num_classes", i(c.dataset.num_classes), "shape x color classes");
    w.line("samples_per_class", i(c.dataset.samples_per_class), "images per class");
    w.line("seed", std::to_string(c.dataset.seed), "generator seed");
    w.line("image_dir", quoted(c.dataset.image_dir), "external_image_dir only");
    w.line("validation_samples", i(c.validation_samples), "held out from the end of the dataset");

    if (c.padding) {
        w.section("padding", "padded variant; real content in the top-left sub-grid");
        w.line("pad_factor", i(c.padding->pad_factor), "token multiplier, a perfect square");
        w.line("fill_value", num(c.padding->fill_value), "pixel value of padded regions");
    } else {
        w.raw("\n# padded variant, off by default:\n"
              "# padding:\n#   pad_factor: 4\n#   fill_value: 0.0\n");
    }

    const TrainingConfig& t = c.training;
    w.section("training", "optimization");
    w.line("steps", i(t.steps), "optimizer iterations");
    w.line("batch_size", i(t.batch_size), "constant across budgets");
    w.line("seed", std::to_string(t.seed), "init and data order");
    w.line("class_drop", num(t.class_drop), "label dropout for guidance");
    w.line("lr", num(t.optim.lr), "peak learning rate");
    w.line("beta1", num(t.optim.beta1), "Adam");
    w.line("beta2", num(t.optim.beta2), "Adam");
    w.line("eps", num(t.optim.eps), "Adam");
    w.line("weight_decay", num(t.optim.weight_decay), "decoupled");
    w.line("warmup_fraction", num(t.optim.warmup_fraction), "linear warmup share of steps");
    w.line("grad_clip", num(t.optim.grad_clip), "global norm, <= 0 disables");
    w.line("ema_decay", num(t.optim.ema_decay), "EMA of weights");
    w.line("ema_warmup", b(t.optim.ema_warmup), "min(decay, (1+step)/(10+step))");
    w.line("log_every", i(t.log_every), "metrics log stride");

    w.raw("\n# relative paths go under $ELIT_OUTPUT_ROOT when it is set\n");
    w.raw("output_dir: " + quoted(c.output_dir) + "\n");
    return w.str();
}

void save_config(const std::filesystem::path& path, const RunConfig& cfg) {
    const std::string s = emit_config(cfg);
    write_file(path.string(), std::vector<unsigned char>(s.begin(), s.end()));
}

GuidanceSpec resolve_guidance(const RunConfig& cfg) {
    GuidanceSpec s;
    s.mode = cfg.guidance.mode;
    s.lambda = cfg.guidance.lambda;
    if (!cfg.backbone.latent_interface) {
        s.j_main = s.j_weak = 1;
        return s;
    }
    s.j_main = cfg.guidance.j_main ? cfg.guidance.j_main : cfg.budget.j_max;
    const bool weak = s.mode == GuidanceMode::ag || s.mode == GuidanceMode::ccfg;
    if (cfg.guidance.j_weak) s.j_weak = cfg.guidance.j_weak;
    else if (weak) s.j_weak = select_weak_budget(cfg.backbone, cfg.backbone.num_tokens(), s.j_main, 0.35);
    else s.j_weak = s.j_main;
    return s;
}

std::filesystem::path resolve_output_dir(const RunConfig& cfg) {
    std::filesystem::path p(cfg.output_dir);
    if (const char* root = std::getenv("ELIT_OUTPUT_ROOT"); root && *root && p.is_relative())
        return std::filesystem::path(root) / p;
    return p;
}

} // namespace elit
