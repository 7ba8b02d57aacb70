#include "elit/autograd.hpp"

#include <cmath>
#include <limits>

namespace elit {

namespace {

void require(bool ok, const char* what) {
    if (!ok) throw ShapeError(what);
}

} // namespace

template <typename T>
Var Graph<T>::push(M value, bool needs_grad) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = record_ && needs_grad;
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

template <typename T>
typename Graph<T>::M& Graph<T>::grad_ref(Var v) {
    Node& n = nodes_[v.id];
    if (n.grad.size() == 0) n.grad.setZero(n.value.rows(), n.value.cols());
    return n.grad;
}

template <typename T>
void Graph<T>::count_weight(const CostTag& tag, std::uint64_t macs) {
    if (counter_) counter_->record_weight(tag, macs);
}

template <typename T>
void Graph<T>::count_activation(const CostTag& tag, std::uint64_t macs) {
    if (counter_) counter_->record_activation(tag, macs);
}

template <typename T>
Var Graph<T>::input(M value) {
    return push(std::move(value), false);
}

template <typename T>
Var Graph<T>::param(Parameter<T>& p) {
    Var v = push(p.value, true);
    if (needs(v)) {
        Parameter<T>* target = &p;
        nodes_[v.id].backward = [this, v, target] {
            const M& g = nodes_[v.id].grad;
            if (target->grad.size() == 0) target->grad.setZero(g.rows(), g.cols());
            target->grad += g;
        };
    }
    return v;
}

template <typename T>
void Graph<T>::backward(Var out) {
    require(value(out).size() == 1, "backward: output is not a scalar");
    backward(out, M::Ones(1, 1));
}

template <typename T>
void Graph<T>::backward(Var out, const M& seed) {
    require(record_, "backward: graph was built without recording");
    require(seed.rows() == value(out).rows() && seed.cols() == value(out).cols(), "backward: seed shape");
    grad_ref(out) += seed;
    for (int i = out.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (n.backward && n.grad.size() != 0) n.backward();
    }
}

template <typename T>
Var Graph<T>::linear(Var x, Var w, Var b, CostTag tag) {
    const M& xv = value(x);
    const M& wv = value(w);
    require(xv.cols() == wv.rows(), "linear: inner dimension mismatch");
    M y(xv.rows(), wv.cols());
    y.noalias() = xv * wv;
    if (b.valid()) {
        require(value(b).rows() == 1 && value(b).cols() == wv.cols(), "linear: bias shape");
        y.rowwise() += value(b).row(0);
    }
    count_weight(tag, static_cast<std::uint64_t>(xv.rows()) * xv.cols() * wv.cols());
    const bool ng = needs(x) || needs(w) || (b.valid() && needs(b));
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, w, b, out] {
            const M& g = nodes_[out.id].grad;
            if (needs(x)) grad_ref(x).noalias() += g * value(w).transpose();
            if (needs(w)) grad_ref(w).noalias() += value(x).transpose() * g;
            if (b.valid() && needs(b)) grad_ref(b) += g.colwise().sum();
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::add(Var a, Var b) {
    require(value(a).rows() == value(b).rows() && value(a).cols() == value(b).cols(), "add: shape mismatch");
    const bool ng = needs(a) || needs(b);
    Var out = push(value(a) + value(b), ng);
    if (ng) {
        nodes_[out.id].backward = [this, a, b, out] {
            const M& g = nodes_[out.id].grad;
            if (needs(a)) grad_ref(a) += g;
            if (needs(b)) grad_ref(b) += g;
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::add_tiled(Var x, Var table) {
    const M& xv = value(x);
    const M& tv = value(table);
    require(tv.cols() == xv.cols() && tv.rows() > 0 && xv.rows() % tv.rows() == 0, "add_tiled: shape mismatch");
    const Index tiles = xv.rows() / tv.rows();
    M y = xv;
    for (Index i = 0; i < tiles; ++i) y.middleRows(i * tv.rows(), tv.rows()) += tv;
    const bool ng = needs(x) || needs(table);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, table, out, tiles] {
            const M& g = nodes_[out.id].grad;
            if (needs(x)) grad_ref(x) += g;
            if (needs(table)) {
                M& gt = grad_ref(table);
                for (Index i = 0; i < tiles; ++i) gt += g.middleRows(i * gt.rows(), gt.rows());
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::scale(Var x, T s) {
    const bool ng = needs(x);
    Var out = push(value(x) * s, ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out, s] { grad_ref(x) += nodes_[out.id].grad * s; };
    }
    return out;
}

template <typename T>
Var Graph<T>::modulate(Var x, Var shift, Var scale_v, Index rows_per_sample) {
    const M& xv = value(x);
    const M& sh = value(shift);
    const M& sc = value(scale_v);
    require(sh.cols() == xv.cols() && sc.cols() == xv.cols() && sh.rows() == sc.rows(), "modulate: shape");
    require(xv.rows() == sh.rows() * rows_per_sample, "modulate: rows do not match samples");
    M y(xv.rows(), xv.cols());
    for (Index b = 0; b < sh.rows(); ++b) {
        auto blk = xv.middleRows(b * rows_per_sample, rows_per_sample);
        y.middleRows(b * rows_per_sample, rows_per_sample) =
            (blk.array().rowwise() * (sc.row(b).array() + T(1))).rowwise() + sh.row(b).array();
    }
    const bool ng = needs(x) || needs(shift) || needs(scale_v);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, shift, scale_v, out, rows_per_sample] {
            const M& g = nodes_[out.id].grad;
            const Index samples = value(shift).rows();
            for (Index b = 0; b < samples; ++b) {
                auto gb = g.middleRows(b * rows_per_sample, rows_per_sample);
                if (needs(x)) {
                    grad_ref(x).middleRows(b * rows_per_sample, rows_per_sample).array() +=
                        gb.array().rowwise() * (value(scale_v).row(b).array() + T(1));
                }
                if (needs(scale_v)) {
                    auto xb = value(x).middleRows(b * rows_per_sample, rows_per_sample);
                    grad_ref(scale_v).row(b) += (gb.array() * xb.array()).colwise().sum().matrix();
                }
                if (needs(shift)) grad_ref(shift).row(b) += gb.colwise().sum();
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::gated_residual(Var x, Var h, Var gate, Index rows_per_sample) {
    const M& xv = value(x);
    const M& hv = value(h);
    const M& gv = value(gate);
    require(xv.rows() == hv.rows() && xv.cols() == hv.cols(), "gated_residual: shape");
    require(gv.cols() == xv.cols() && xv.rows() == gv.rows() * rows_per_sample, "gated_residual: gate shape");
    M y = xv;
    for (Index b = 0; b < gv.rows(); ++b) {
        y.middleRows(b * rows_per_sample, rows_per_sample).array() +=
            hv.middleRows(b * rows_per_sample, rows_per_sample).array().rowwise() * gv.row(b).array();
    }
    const bool ng = needs(x) || needs(h) || needs(gate);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, h, gate, out, rows_per_sample] {
            const M& g = nodes_[out.id].grad;
            if (needs(x)) grad_ref(x) += g;
            const Index samples = value(gate).rows();
            for (Index b = 0; b < samples; ++b) {
                auto gb = g.middleRows(b * rows_per_sample, rows_per_sample);
                if (needs(h)) {
                    grad_ref(h).middleRows(b * rows_per_sample, rows_per_sample).array() +=
                        gb.array().rowwise() * value(gate).row(b).array();
                }
                if (needs(gate)) {
                    auto hb = value(h).middleRows(b * rows_per_sample, rows_per_sample);
                    grad_ref(gate).row(b) += (gb.array() * hb.array()).colwise().sum().matrix();
                }
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::layer_norm(Var x, T eps) {
    const M& xv = value(x);
    const Index n = xv.cols();
    M y(xv.rows(), n);
    Eigen::Matrix<T, Eigen::Dynamic, 1> inv_std(xv.rows());
    for (Index r = 0; r < xv.rows(); ++r) {
        const T mean = xv.row(r).mean();
        const T var = (xv.row(r).array() - mean).square().mean();
        inv_std(r) = T(1) / std::sqrt(var + eps);
        y.row(r) = (xv.row(r).array() - mean) * inv_std(r);
    }
    const bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out, inv_std] {
            const M& g = nodes_[out.id].grad;
            const M& yv = nodes_[out.id].value;
            M& gx = grad_ref(x);
            for (Index r = 0; r < g.rows(); ++r) {
                const T mg = g.row(r).mean();
                const T mgy = g.row(r).dot(yv.row(r)) / T(g.cols());
                gx.row(r).array() += inv_std(r) * (g.row(r).array() - mg - yv.row(r).array() * mgy);
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::head_rms_norm(Var x, Var weight, int heads, T eps) {
    const M& xv = value(x);
    const M& wv = value(weight);
    require(heads > 0 && xv.cols() % heads == 0, "head_rms_norm: heads must divide width");
    const Index hd = xv.cols() / heads;
    require(wv.rows() == 1 && wv.cols() == hd, "head_rms_norm: weight shape");
    M y(xv.rows(), xv.cols());
    M inv_rms(xv.rows(), heads);
    for (Index r = 0; r < xv.rows(); ++r) {
        for (int h = 0; h < heads; ++h) {
            auto seg = xv.row(r).segment(h * hd, hd);
            const T ir = T(1) / std::sqrt(seg.squaredNorm() / T(hd) + eps);
            inv_rms(r, h) = ir;
            y.row(r).segment(h * hd, hd) = (seg.array() * ir * wv.row(0).array()).matrix();
        }
    }
    const bool ng = needs(x) || needs(weight);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, weight, out, heads, hd, inv_rms] {
            const M& g = nodes_[out.id].grad;
            const M& xv2 = value(x);
            const auto w = value(weight).row(0).array();
            for (Index r = 0; r < g.rows(); ++r) {
                for (int h = 0; h < heads; ++h) {
                    const T ir = inv_rms(r, h);
                    auto gs = g.row(r).segment(h * hd, hd).array();
                    auto xs = xv2.row(r).segment(h * hd, hd).array();
                    if (needs(weight)) grad_ref(weight).row(0).array() += gs * xs * ir;
                    if (needs(x)) {
                        const auto gw = gs * w;
                        const T dot = (gw * xs).sum();
                        grad_ref(x).row(r).segment(h * hd, hd).array() +=
                            gw * ir - xs * (dot * ir * ir * ir / T(hd));
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::rope(Var x, const RopeTable<T>& table, int heads) {
    const M& xv = value(x);
    require(heads > 0 && xv.cols() % heads == 0, "rope: heads must divide width");
    const Index hd = xv.cols() / heads;
    const Index pairs = hd / 2;
    require(hd % 2 == 0 && table.cos.cols() == pairs && table.sin.cols() == pairs && table.cos.rows() > 0,
            "rope: table shape");
    const Index period = table.cos.rows();
    M y(xv.rows(), xv.cols());
    for (Index r = 0; r < xv.rows(); ++r) {
        const Index p = r % period;
        for (int h = 0; h < heads; ++h) {
            for (Index i = 0; i < pairs; ++i) {
                const Index c0 = h * hd + 2 * i;
                const T a = xv(r, c0), b = xv(r, c0 + 1);
                const T c = table.cos(p, i), s = table.sin(p, i);
                y(r, c0) = a * c - b * s;
                y(r, c0 + 1) = a * s + b * c;
            }
        }
    }
    const bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out, table, heads, hd, pairs, period] {
            const M& g = nodes_[out.id].grad;
            M& gx = grad_ref(x);
            for (Index r = 0; r < g.rows(); ++r) {
                const Index p = r % period;
                for (int h = 0; h < heads; ++h) {
                    for (Index i = 0; i < pairs; ++i) {
                        const Index c0 = h * hd + 2 * i;
                        const T g0 = g(r, c0), g1 = g(r, c0 + 1);
                        const T c = table.cos(p, i), s = table.sin(p, i);
                        gx(r, c0) += g0 * c + g1 * s;
                        gx(r, c0 + 1) += -g0 * s + g1 * c;
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::attention(Var q, Var k, Var v, int heads, const AttentionLayout& layout, CostTag tag) {
    const M& qv = value(q);
    const M& kv = value(k);
    const M& vv = value(v);
    require(heads > 0 && qv.cols() % heads == 0, "attention: heads must divide width");
    require(kv.cols() == qv.cols() && vv.cols() == qv.cols() && kv.rows() == vv.rows(), "attention: q/k/v shapes");
    require(layout.masks.empty() || layout.masks.size() == layout.segments.size(), "attention: mask count");
    const Index width = qv.cols();
    const Index hd = width / heads;
    const T inv_sqrt = T(1) / std::sqrt(T(hd));
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();

    M y = M::Zero(qv.rows(), width);
    std::vector<M> probs;
    probs.reserve(layout.segments.size() * heads);
    std::uint64_t macs = 0;
    for (size_t si = 0; si < layout.segments.size(); ++si) {
        const AttentionSegment& s = layout.segments[si];
        require(s.q_count > 0 && s.k_count > 0 && s.q_begin + s.q_count <= qv.rows() &&
                    s.k_begin + s.k_count <= kv.rows(),
                "attention: segment out of range");
        const KeyMask* mask = layout.masks.empty() ? nullptr : &layout.masks[si];
        if (mask) require(mask->rows() == s.q_count && mask->cols() == s.k_count, "attention: mask shape");
        for (int h = 0; h < heads; ++h) {
            auto qs = qv.block(s.q_begin, h * hd, s.q_count, hd);
            auto ks = kv.block(s.k_begin, h * hd, s.k_count, hd);
            auto vs = vv.block(s.k_begin, h * hd, s.k_count, hd);
            M p(s.q_count, s.k_count);
            p.noalias() = qs * ks.transpose();
            p *= inv_sqrt;
            if (mask) p = mask->select(p, M::Constant(p.rows(), p.cols(), neg_inf));
            for (Index r = 0; r < p.rows(); ++r) {
                const T mx = p.row(r).maxCoeff();
                if (mx == neg_inf) {
                    p.row(r).setZero();
                    continue;
                }
                p.row(r) = (p.row(r).array() - mx).exp().matrix();
                p.row(r) /= p.row(r).sum();
            }
            // vectorized exp clamps -inf to a denormal; masked weights must be exactly zero
            if (mask) p = mask->select(p, M::Zero(p.rows(), p.cols()));
            y.block(s.q_begin, h * hd, s.q_count, hd).noalias() += p * vs;
            probs.push_back(std::move(p));
        }
        macs += 2ull * static_cast<std::uint64_t>(s.q_count) * s.k_count * width;
    }
    count_activation(tag, macs);

    const bool ng = needs(q) || needs(k) || needs(v);
    Var out = push(std::move(y), ng);
    nodes_[out.id].probs = std::move(probs);
    if (ng) {
        nodes_[out.id].backward = [this, q, k, v, out, heads, hd, inv_sqrt, layout] {
            const M& g = nodes_[out.id].grad;
            const std::vector<M>& pr = nodes_[out.id].probs;
            const bool gq = needs(q), gk = needs(k), gv = needs(v);
            for (size_t si = 0; si < layout.segments.size(); ++si) {
                const AttentionSegment& s = layout.segments[si];
                for (int h = 0; h < heads; ++h) {
                    const M& p = pr[si * heads + h];
                    auto go = g.block(s.q_begin, h * hd, s.q_count, hd);
                    auto vs = value(v).block(s.k_begin, h * hd, s.k_count, hd);
                    if (gv) grad_ref(v).block(s.k_begin, h * hd, s.k_count, hd).noalias() += p.transpose() * go;
                    if (!gq && !gk) continue;
                    M dp(s.q_count, s.k_count);
                    dp.noalias() = go * vs.transpose();
                    const Eigen::Matrix<T, Eigen::Dynamic, 1> rs = (dp.array() * p.array()).rowwise().sum();
                    M ds = (p.array() * (dp.colwise() - rs).array()).matrix() * inv_sqrt;
                    if (gq) {
                        auto ks = value(k).block(s.k_begin, h * hd, s.k_count, hd);
                        grad_ref(q).block(s.q_begin, h * hd, s.q_count, hd).noalias() += ds * ks;
                    }
                    if (gk) {
                        auto qs = value(q).block(s.q_begin, h * hd, s.q_count, hd);
                        grad_ref(k).block(s.k_begin, h * hd, s.k_count, hd).noalias() += ds.transpose() * qs;
                    }
                }
            }
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::silu(Var x) {
    const auto xa = value(x).array();
    const bool ng = needs(x);
    Var out = push((xa / (T(1) + (-xa).exp())).matrix(), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out] {
            const auto xa2 = value(x).array();
            const auto sig = T(1) / (T(1) + (-xa2).exp());
            grad_ref(x).array() += nodes_[out.id].grad.array() * sig * (T(1) + xa2 * (T(1) - sig));
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::gelu(Var x) {
    // tanh approximation
    const T c = std::sqrt(T(2) / T(M_PI));
    const T a = T(0.044715);
    const auto xa = value(x).array();
    const bool ng = needs(x);
    Var out = push((T(0.5) * xa * (T(1) + (c * (xa + a * xa.cube())).tanh())).matrix(), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out, c, a] {
            const auto xa2 = value(x).array();
            const auto th = (c * (xa2 + a * xa2.cube())).tanh();
            const auto d = T(0.5) * (T(1) + th) + T(0.5) * xa2 * (T(1) - th.square()) * c * (T(1) + T(3) * a * xa2.square());
            grad_ref(x).array() += nodes_[out.id].grad.array() * d;
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::gather_rows(Var x, std::vector<Index> rows) {
    const M& xv = value(x);
    M y(static_cast<Index>(rows.size()), xv.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
        require(rows[i] >= 0 && rows[i] < xv.rows(), "gather_rows: index out of range");
        y.row(static_cast<Index>(i)) = xv.row(rows[i]);
    }
    const bool ng = needs(x);
    Var out = push(std::move(y), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out, rows = std::move(rows)] {
            const M& g = nodes_[out.id].grad;
            M& gx = grad_ref(x);
            for (size_t i = 0; i < rows.size(); ++i) gx.row(rows[i]) += g.row(static_cast<Index>(i));
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::slice_cols(Var x, Index begin, Index count) {
    require(begin >= 0 && count > 0 && begin + count <= value(x).cols(), "slice_cols: out of range");
    const bool ng = needs(x);
    Var out = push(value(x).middleCols(begin, count), ng);
    if (ng) {
        nodes_[out.id].backward = [this, x, out, begin, count] {
            grad_ref(x).middleCols(begin, count) += nodes_[out.id].grad;
        };
    }
    return out;
}

template <typename T>
Var Graph<T>::masked_mse(Var pred, const M& target, const M& mask, Index rows_per_sample) {
    const M& pv = value(pred);
    require(target.rows() == pv.rows() && target.cols() == pv.cols(), "masked_mse: target shape");
    require(mask.rows() == pv.rows() && mask.cols() == pv.cols(), "masked_mse: mask shape");
    require(rows_per_sample > 0 && pv.rows() % rows_per_sample == 0, "masked_mse: rows per sample");
    const Index samples = pv.rows() / rows_per_sample;
    std::vector<T> weight(static_cast<size_t>(samples));
    T loss = 0;
    for (Index b = 0; b < samples; ++b) {
        auto mb = mask.middleRows(b * rows_per_sample, rows_per_sample);
        const T count = mb.sum();
        require(count > 0, "masked_mse: sample has no unmasked element");
        weight[b] = T(1) / (count * T(samples));
        auto diff = (pv.middleRows(b * rows_per_sample, rows_per_sample) -
                     target.middleRows(b * rows_per_sample, rows_per_sample)).array() * mb.array();
        loss += diff.square().sum() * weight[b];
    }
    const bool ng = needs(pred);
    Var out = push(M::Constant(1, 1, loss), ng);
    if (ng) {
        nodes_[out.id].backward = [this, pred, out, target, mask, rows_per_sample, weight] {
            const T g = nodes_[out.id].grad(0, 0);
            M& gp = grad_ref(pred);
            for (size_t b = 0; b < weight.size(); ++b) {
                const Index r0 = static_cast<Index>(b) * rows_per_sample;
                gp.middleRows(r0, rows_per_sample).array() +=
                    (value(pred).middleRows(r0, rows_per_sample) - target.middleRows(r0, rows_per_sample)).array() *
                    mask.middleRows(r0, rows_per_sample).array() * (T(2) * weight[b] * g);
            }
        };
    }
    return out;
}

template class Graph<float>;
template class Graph<double>;

} // namespace elit
