#pragma once

#include <string>
#include <vector>

#include "elit/autograd.hpp"
#include "elit/params.hpp"

namespace elit {

enum class Init { trunc_normal, zeros };

template <typename T>
struct Linear {
    Parameter<T>* weight = nullptr;
    Parameter<T>* bias = nullptr;

    static Linear make(ParameterStore<T>& store, const std::string& name, int in, int out, Init init, double std,
                       std::mt19937_64& rng) {
        Linear l;
        l.weight = &store.add(name + ".weight",
                              init == Init::zeros ? Mat<T>::Zero(in, out) : trunc_normal<T>(in, out, std, rng));
        l.bias = &store.add(name + ".bias", Mat<T>::Zero(1, out));
        return l;
    }

    Var operator()(Graph<T>& g, Var x, CostTag tag) const {
        return g.linear(x, g.param(*weight), bias ? g.param(*bias) : Var{}, tag);
    }
};

// adaLN projection of silu(cond) into `chunks` per-sample vectors of the
// model width (shift/scale/gate...). Zero-initialized.
template <typename T>
struct AdaLN {
    Linear<T> proj;
    int chunks = 0;
    int width = 0;

    static AdaLN make(ParameterStore<T>& store, const std::string& name, int width, int chunks,
                      std::mt19937_64& rng) {
        AdaLN a;
        a.proj = Linear<T>::make(store, name, width, width * chunks, Init::zeros, 0.0, rng);
        a.chunks = chunks;
        a.width = width;
        return a;
    }

    std::vector<Var> operator()(Graph<T>& g, Var cond_silu) const {
        Var m = proj(g, cond_silu, CostTag{Site::unmodeled, Term::other, -1});
        std::vector<Var> out;
        for (int i = 0; i < chunks; ++i) out.push_back(g.slice_cols(m, Index(i) * width, width));
        return out;
    }
};

// Two-layer perceptron with GELU.
template <typename T>
struct Mlp {
    Linear<T> fc1;
    Linear<T> fc2;

    static Mlp make(ParameterStore<T>& store, const std::string& name, int width, int hidden, double std,
                    bool zero_out, std::mt19937_64& rng) {
        Mlp m;
        m.fc1 = Linear<T>::make(store, name + ".fc1", width, hidden, Init::trunc_normal, std, rng);
        m.fc2 = Linear<T>::make(store, name + ".fc2", hidden, width, zero_out ? Init::zeros : Init::trunc_normal,
                                std, rng);
        return m;
    }

    Var operator()(Graph<T>& g, Var x, CostTag tag) const { return fc2(g, g.gelu(fc1(g, x, tag)), tag); }
};

// QK-normalization weights shared by every head.
template <typename T>
struct QkNorm {
    Parameter<T>* q = nullptr;
    Parameter<T>* k = nullptr;

    static QkNorm make(ParameterStore<T>& store, const std::string& name, int head_dim) {
        QkNorm n;
        n.q = &store.add(name + ".q_norm", Mat<T>::Ones(1, head_dim));
        n.k = &store.add(name + ".k_norm", Mat<T>::Ones(1, head_dim));
        return n;
    }
};

} // namespace elit
