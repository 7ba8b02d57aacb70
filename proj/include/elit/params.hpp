#pragma once

#include <map>
#include <random>
#include <string>
#include <vector>

#include "elit/autograd.hpp"

namespace elit {

// Named parameters, ordered by name. Addresses are stable for the lifetime
// of the store, so layers may keep raw pointers into it.
template <typename T>
class ParameterStore {
public:
    Parameter<T>& add(const std::string& name, Mat<T> init) {
        auto [it, inserted] = params_.try_emplace(name);
        if (!inserted) throw std::logic_error("duplicate parameter " + name);
        it->second.name = name;
        it->second.value = std::move(init);
        it->second.zero_grad();
        return it->second;
    }

    Parameter<T>& get(const std::string& name) {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = params_.find(name);
        if (it == params_.end()) throw std::out_of_range("unknown parameter " + name);
        return it->second;
    }
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Parameter<T>>& all() { return params_; }
    const std::map<std::string, Parameter<T>>& all() const { return params_; }

    size_t scalar_count() const {
        size_t n = 0;
        for (const auto& [_, p] : params_) n += static_cast<size_t>(p.value.size());
        return n;
    }

    void zero_grad() {
        for (auto& [_, p] : params_) p.zero_grad();
    }

private:
    std::map<std::string, Parameter<T>> params_;
};

// Normal(0, std) truncated to two standard deviations.
template <typename T>
Mat<T> trunc_normal(Index rows, Index cols, double std, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, 1.0);
    Mat<T> m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
        double z = normal(rng);
        while (z < -2.0 || z > 2.0) z = normal(rng);
        m.data()[i] = static_cast<T>(z * std);
    }
    return m;
}

} // namespace elit
