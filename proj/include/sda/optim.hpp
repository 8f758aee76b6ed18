#pragma once

#include <map>
#include <string>

#include "autodiff.hpp"

namespace sda {

// A named trainable leaf plus its momentum buffer. Non-copyable on purpose:
// copying a Var aliases the underlying node, so duplication goes through
// clone() and is always deep.
struct Param {
    Var value;
    Tensor momentum;

    Param() = default;
    explicit Param(Tensor init) : value(Var::leaf(init)), momentum(init.rows, init.cols) {}

    Param(const Param&) = delete;
    Param& operator=(const Param&) = delete;
    Param(Param&&) = default;
    Param& operator=(Param&&) = default;

    Param clone() const {
        Param p(value.value());
        p.momentum = momentum;
        return p;
    }
};

// Ordered named group of parameters. Iteration order is the key order, so
// every walk over a ParamSet is deterministic.
struct ParamSet {
    std::string name;
    bool frozen = false;
    std::map<std::string, Param> items;

    ParamSet() = default;
    explicit ParamSet(std::string n) : name(std::move(n)) {}

    ParamSet(const ParamSet&) = delete;
    ParamSet& operator=(const ParamSet&) = delete;
    ParamSet(ParamSet&&) = default;
    ParamSet& operator=(ParamSet&&) = default;

    Param& add(const std::string& key, Tensor init) {
        auto [it, inserted] = items.emplace(key, Param(std::move(init)));
        if (!inserted) throw std::invalid_argument("ParamSet::add: duplicate key " + key);
        return it->second;
    }

    Param& at(const std::string& key) {
        auto it = items.find(key);
        if (it == items.end()) throw std::out_of_range("ParamSet: unknown parameter " + name + "/" + key);
        return it->second;
    }
    const Param& at(const std::string& key) const {
        auto it = items.find(key);
        if (it == items.end()) throw std::out_of_range("ParamSet: unknown parameter " + name + "/" + key);
        return it->second;
    }

    void zero_grad() {
        for (auto& [k, p] : items) p.value.zero_grad();
    }

    int scalar_count() const {
        int n = 0;
        for (const auto& [k, p] : items) n += p.value.value().size();
        return n;
    }

    ParamSet clone() const {
        ParamSet out(name);
        out.frozen = frozen;
        for (const auto& [k, p] : items) out.items.emplace(k, p.clone());
        return out;
    }
};

// Linear warmup: ramps from base_lr/warmup_epochs at epoch 0 up to base_lr
// at epoch warmup_epochs-1, then stays at base_lr.
inline double warmup_lr(int epoch, double base_lr, int warmup_epochs) {
    if (epoch < 0 || warmup_epochs < 0) throw std::invalid_argument("warmup_lr: negative epoch or window");
    if (warmup_epochs == 0 || epoch >= warmup_epochs) return base_lr;
    return base_lr * static_cast<double>(epoch + 1) / warmup_epochs;
}

// Momentum SGD with decoupled-from-nothing classic weight decay folded into
// the gradient: g += wd * p; v = m * v + g; p -= lr * v.
// Frozen groups are skipped entirely (values and momentum untouched).
inline void sgd_step(ParamSet& ps, double lr, double momentum, double weight_decay) {
    if (ps.frozen) return;
    for (auto& [key, p] : ps.items) {
        const Tensor& g = p.value.grad();
        Tensor& val = p.value.value_mut();
        for (int i = 0; i < val.size(); ++i) {
            double gi = g.v[i] + weight_decay * val.v[i];
            if (!std::isfinite(gi))
                throw std::runtime_error("sgd_step: non-finite gradient in " + ps.name + "/" + key);
            p.momentum.v[i] = momentum * p.momentum.v[i] + gi;
            val.v[i] -= lr * p.momentum.v[i];
        }
    }
}

}  // namespace sda
