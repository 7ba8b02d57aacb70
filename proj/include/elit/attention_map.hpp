#pragma once

#include <vector>

#include "elit/backbone.hpp"
#include "elit/image_io.hpp"
#include "elit/train.hpp"

namespace elit {

// Read cross-attention averaged over heads and latent queries, laid out on
// the token grid (raster order). Inside each group the scores sum to 1;
// divide by `groups` for the average over all latent queries.
struct Heatmap {
    int rows = 0;
    int cols = 0;
    int groups = 1;
    std::vector<int> group_of; // raster token -> group
    Mat<double> values;        // rows x cols

    double at(int token) const { return values.data()[token]; }
};

Heatmap read_attention_map(Model<float>& model, const Image& xt, double t, int label, int budget);

// Average heatmap over the samples of an evaluation set (noised at their
// fixed timesteps).
Heatmap mean_read_attention(Model<float>& model, const EvalSet& set, int budget, int max_samples = 64);

// Entropy of each group's distribution, averaged over groups (nats).
double within_group_entropy(const Heatmap& h);

// Mean score over tokens with mask true and with mask false.
std::pair<double, double> masked_means(const Heatmap& h, const std::vector<bool>& mask);

// Spearman rank correlation with average ranks for ties.
double spearman(const std::vector<double>& a, const std::vector<double>& b);

// Grayscale rendering, brightest at the maximum score.
Image render_heatmap(const Heatmap& h, int scale = 8);

} // namespace elit
