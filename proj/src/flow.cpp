#include "elit/flow.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace elit {

std::vector<double> sample_timesteps(size_t n, const TimestepDistribution& dist, Rng& rng) {
    if (!(dist.scale > 0.0)) throw ConfigError("flow.logit_scale must be positive");
    if (n == 0) throw ConfigError("sample_timesteps: n must be >= 1");
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<double> t(n);
    for (auto& v : t) {
        const double logit = dist.location + dist.scale * normal(rng);
        v = 1.0 / (1.0 + std::exp(-logit));
        // keep strictly inside (0, 1) even when the logit saturates in double
        v = std::clamp(v, std::nextafter(0.0, 1.0), std::nextafter(1.0, 0.0));
    }
    return t;
}

template <typename T>
Mat<T> interpolate_path(const Mat<T>& x0, const Mat<T>& x1, std::span<const T> t) {
    if (x0.rows() != x1.rows() || x0.cols() != x1.cols()) throw ShapeError("interpolate_path: x0/x1 shape mismatch");
    if (static_cast<Index>(t.size()) != x0.rows()) throw ShapeError("interpolate_path: one t per row required");
    Mat<T> xt(x0.rows(), x0.cols());
    for (Index r = 0; r < x0.rows(); ++r) {
        const T tr = t[static_cast<size_t>(r)];
        if (!(tr >= T(0) && tr <= T(1))) throw std::domain_error("interpolate_path: t outside [0, 1]");
        xt.row(r) = (T(1) - tr) * x0.row(r) + tr * x1.row(r);
    }
    return xt;
}

template <typename T>
FlowSample<T> make_flow_sample(Mat<T> x0, Mat<T> x1, std::vector<T> t) {
    FlowSample<T> s;
    s.xt = interpolate_path<T>(x0, x1, t);
    s.v_target = x1 - x0;
    s.x0 = std::move(x0);
    s.x1 = std::move(x1);
    s.t = std::move(t);
    return s;
}

template <typename T>
T rf_loss(const Mat<T>& pred_v, const Mat<T>& x0, const Mat<T>& x1) {
    return rf_loss<T>(pred_v, x0, x1, Mat<T>::Ones(pred_v.rows(), pred_v.cols()));
}

template <typename T>
T rf_loss(const Mat<T>& pred_v, const Mat<T>& x0, const Mat<T>& x1, const Mat<T>& mask) {
    const auto same = [&](const Mat<T>& m) { return m.rows() == pred_v.rows() && m.cols() == pred_v.cols(); };
    if (!same(x0) || !same(x1) || !same(mask)) throw ShapeError("rf_loss: shape mismatch");
    if (pred_v.rows() == 0) throw ShapeError("rf_loss: empty batch");
    T total = 0;
    for (Index r = 0; r < pred_v.rows(); ++r) {
        const auto m = (mask.row(r).array() != T(0)).template cast<T>();
        const T count = m.sum();
        if (count == T(0)) throw std::domain_error("rf_loss: mask selects no element");
        const auto diff = pred_v.row(r).array() - (x1.row(r).array() - x0.row(r).array());
        total += (diff.square() * m).sum() / count;
    }
    return total / T(pred_v.rows());
}

template <typename T>
Mat<T> euler_sample(const VelocityFn<T>& velocity, const Mat<T>& x0, int steps) {
    if (steps < 1) throw ConfigError("euler_sample: steps must be >= 1");
    Mat<T> x = x0;
    const double dt = 1.0 / steps;
    for (int k = 0; k < steps; ++k) {
        Mat<T> v = velocity(x, k * dt);
        if (v.rows() != x.rows() || v.cols() != x.cols()) throw ShapeError("euler_sample: velocity shape");
        x += T(dt) * v;
    }
    return x;
}

#define ELIT_INSTANTIATE_FLOW(T)                                                                   \
    template Mat<T> interpolate_path<T>(const Mat<T>&, const Mat<T>&, std::span<const T>);         \
    template FlowSample<T> make_flow_sample<T>(Mat<T>, Mat<T>, std::vector<T>);                    \
    template T rf_loss<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&);                            \
    template T rf_loss<T>(const Mat<T>&, const Mat<T>&, const Mat<T>&, const Mat<T>&);             \
    template Mat<T> euler_sample<T>(const VelocityFn<T>&, const Mat<T>&, int);

ELIT_INSTANTIATE_FLOW(float)
ELIT_INSTANTIATE_FLOW(double)

#undef ELIT_INSTANTIATE_FLOW

} // namespace elit
