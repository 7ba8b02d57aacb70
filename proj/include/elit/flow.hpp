#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "elit/tensor.hpp"

namespace elit {

// Logit-normal distribution over t: t = sigmoid(location + scale * z), z ~ N(0, 1).
struct TimestepDistribution {
    double location = 0.0;
    double scale = 1.0;

    bool operator==(const TimestepDistribution&) const = default;
};

using Rng = std::mt19937_64;

// Draws n timesteps strictly inside (0, 1).
std::vector<double> sample_timesteps(size_t n, const TimestepDistribution& dist, Rng& rng);

// Batches are stored one flattened sample per row.
template <typename T>
struct FlowSample {
    Mat<T> x0;
    Mat<T> x1;
    std::vector<T> t;
    Mat<T> xt;
    Mat<T> v_target;
};

// (1 - t) x0 + t x1, one t per row.
template <typename T>
Mat<T> interpolate_path(const Mat<T>& x0, const Mat<T>& x1, std::span<const T> t);

template <typename T>
FlowSample<T> make_flow_sample(Mat<T> x0, Mat<T> x1, std::vector<T> t);

// Mean squared error between pred_v and x1 - x0: mean over the unmasked
// entries of each row, then mean over rows. A mask entry != 0 marks an
// entry that contributes.
template <typename T>
T rf_loss(const Mat<T>& pred_v, const Mat<T>& x0, const Mat<T>& x1);
template <typename T>
T rf_loss(const Mat<T>& pred_v, const Mat<T>& x0, const Mat<T>& x1, const Mat<T>& mask);

template <typename T>
using VelocityFn = std::function<Mat<T>(const Mat<T>& x, double t)>;

// Forward Euler on the uniform grid t_k = k / steps, k = 0 .. steps - 1.
template <typename T>
Mat<T> euler_sample(const VelocityFn<T>& velocity, const Mat<T>& x0, int steps);

} // namespace elit
