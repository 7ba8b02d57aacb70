#include "elit/attention_map.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace elit {

namespace {

Heatmap empty_map(const BackboneConfig& cfg) {
    if (!cfg.latent_interface) throw ConfigError("backbone.latent_interface: attention maps need a Read layer");
    Heatmap h;
    h.rows = cfg.token_rows();
    h.cols = cfg.token_cols();
    h.groups = cfg.num_groups();
    h.values = Mat<double>::Zero(h.rows, h.cols);
    const GroupLayout layout = GroupLayout::from_config(cfg);
    for (int i = 0; i < cfg.num_tokens(); ++i) h.group_of.push_back(layout.group_of(i));
    return h;
}

// Adds the head- and query-averaged Read weights of every sample in one
// batch forward to h.values.
void accumulate(Model<float>& model, const ModelBatch<float>& batch, Heatmap& h) {
    const BackboneConfig& cfg = model.config();
    const GroupLayout layout = GroupLayout::from_config(cfg);
    const auto order = layout.group_major_order();
    const int tpg = layout.tokens_per_group();
    Graph<float> g(false);
    ForwardTrace trace;
    ForwardOptions opts;
    opts.cross = CrossAttentionImpl::grouped;
    model.forward(g, batch, opts, &trace);
    const auto& probs = g.attention_probs(trace.read_attention);
    const int heads = cfg.heads;
    const size_t segments = probs.size() / static_cast<size_t>(heads);
    for (size_t s = 0; s < segments; ++s) {
        const int group = static_cast<int>(s % static_cast<size_t>(h.groups));
        Eigen::RowVectorXd avg = Eigen::RowVectorXd::Zero(tpg);
        for (int hd = 0; hd < heads; ++hd) {
            const Mat<float>& p = probs[s * heads + static_cast<size_t>(hd)];
            avg += p.cast<double>().colwise().mean();
        }
        avg /= heads;
        for (int k = 0; k < tpg; ++k) h.values.data()[order[static_cast<size_t>(group * tpg + k)]] += avg(k);
    }
}

} // namespace

Heatmap read_attention_map(Model<float>& model, const Image& xt, double t, int label, int budget) {
    const BackboneConfig& cfg = model.config();
    Heatmap h = empty_map(cfg);
    ModelBatch<float> batch;
    batch.patches = patchify_pixels<float>(xt, cfg.patch_size);
    batch.t = {t};
    batch.labels = {label};
    batch.budget = budget;
    accumulate(model, batch, h);
    return h;
}

Heatmap mean_read_attention(Model<float>& model, const EvalSet& set, int budget, int max_samples) {
    const BackboneConfig& cfg = model.config();
    Heatmap h = empty_map(cfg);
    const Index n = set.tokens;
    const Index count = std::min<Index>(max_samples, set.samples());
    if (count < 1) throw ShapeError("mean_read_attention: empty evaluation set");
    constexpr Index chunk = 32;
    for (Index begin = 0; begin < count; begin += chunk) {
        const Index m = std::min(chunk, count - begin);
        ModelBatch<float> batch;
        batch.patches.resize(m * n, set.x1.cols());
        for (Index s = 0; s < m; ++s) {
            const float t = static_cast<float>(set.t[static_cast<size_t>(begin + s)]);
            batch.patches.middleRows(s * n, n) =
                (1.0f - t) * set.x0.middleRows((begin + s) * n, n) + t * set.x1.middleRows((begin + s) * n, n);
            batch.t.push_back(set.t[static_cast<size_t>(begin + s)]);
            batch.labels.push_back(set.labels[static_cast<size_t>(begin + s)]);
        }
        batch.budget = budget;
        accumulate(model, batch, h);
    }
    h.values /= static_cast<double>(count);
    return h;
}

double within_group_entropy(const Heatmap& h) {
    std::vector<double> mass(static_cast<size_t>(h.groups), 0.0), ent(static_cast<size_t>(h.groups), 0.0);
    const int n = h.rows * h.cols;
    for (int i = 0; i < n; ++i) mass[static_cast<size_t>(h.group_of[static_cast<size_t>(i)])] += h.at(i);
    for (int i = 0; i < n; ++i) {
        const size_t g = static_cast<size_t>(h.group_of[static_cast<size_t>(i)]);
        const double p = h.at(i) / mass[g];
        if (p > 0) ent[g] -= p * std::log(p);
    }
    return std::accumulate(ent.begin(), ent.end(), 0.0) / h.groups;
}

std::pair<double, double> masked_means(const Heatmap& h, const std::vector<bool>& mask) {
    const int n = h.rows * h.cols;
    if (static_cast<int>(mask.size()) != n) throw ShapeError("masked_means: mask size");
    double on = 0, off = 0;
    int n_on = 0, n_off = 0;
    for (int i = 0; i < n; ++i) {
        if (mask[static_cast<size_t>(i)]) {
            on += h.at(i);
            ++n_on;
        } else {
            off += h.at(i);
            ++n_off;
        }
    }
    return {n_on ? on / n_on : 0.0, n_off ? off / n_off : 0.0};
}

namespace {

std::vector<double> ranks(const std::vector<double>& v) {
    std::vector<size_t> idx(v.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](size_t a, size_t b) { return v[a] < v[b]; });
    std::vector<double> r(v.size());
    for (size_t i = 0; i < idx.size();) {
        size_t j = i;
        while (j + 1 < idx.size() && v[idx[j + 1]] == v[idx[i]]) ++j;
        const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
        for (size_t k = i; k <= j; ++k) r[idx[k]] = avg;
        i = j + 1;
    }
    return r;
}

} // namespace

double spearman(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("spearman: need two equal-length series");
    const auto ra = ranks(a), rb = ranks(b);
    const double n = static_cast<double>(a.size());
    const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
    const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
    double sab = 0, saa = 0, sbb = 0;
    for (size_t i = 0; i < ra.size(); ++i) {
        sab += (ra[i] - ma) * (rb[i] - mb);
        saa += (ra[i] - ma) * (ra[i] - ma);
        sbb += (rb[i] - mb) * (rb[i] - mb);
    }
    if (saa == 0 || sbb == 0) return 0.0;
    return sab / std::sqrt(saa * sbb);
}

Image render_heatmap(const Heatmap& h, int scale) {
    Image img(1, h.rows, h.cols);
    const double mx = h.values.maxCoeff();
    for (int y = 0; y < h.rows; ++y)
        for (int x = 0; x < h.cols; ++x)
            img.at(0, y, x) = mx > 0 ? static_cast<float>(2.0 * h.values(y, x) / mx - 1.0) : -1.0f;
    return upscale(img, scale);
}

} // namespace elit
