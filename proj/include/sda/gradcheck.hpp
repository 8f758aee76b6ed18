#pragma once

#include <random>

#include "optim.hpp"
#include "rng.hpp"

namespace sda {

struct GradCheckReport {
    double max_rel_err = 0.0;
    std::string worst_param;
    int worst_index = -1;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int coords_checked = 0;
};

// Central-difference verification of reverse-mode gradients. loss_fn must
// rebuild its graph from the current leaf values on every call and must be
// deterministic: it is evaluated twice up front and a bitwise mismatch is a
// hard error, because finite differences on a noisy function are meaningless.
// Relative error uses max(1, |analytic|, |numeric|) in the denominator, so
// near-zero gradients are compared absolutely.
inline GradCheckReport grad_check(const std::function<Var()>& loss_fn, std::vector<ParamSet*> groups,
                                  double eps, int max_coords_per_tensor = -1, uint64_t seed = 0) {
    if (!(eps >= 1e-7 && eps <= 1e-3)) throw std::invalid_argument("grad_check: eps outside [1e-7, 1e-3]");

    for (ParamSet* g : groups) g->zero_grad();
    Var loss = loss_fn();
    if (loss.value().size() != 1) throw std::invalid_argument("grad_check: loss is not scalar");
    const double base = loss.value().item();
    const double again = loss_fn().value().item();
    if (std::memcmp(&base, &again, sizeof(double)) != 0)
        throw std::runtime_error("grad_check: loss_fn is not deterministic at the base point");
    loss.backward();

    std::map<std::string, Tensor> analytic;
    for (ParamSet* g : groups)
        for (auto& [k, p] : g->items) analytic.emplace(g->name + "/" + k, p.value.grad());

    auto rng = make_rng(derive_seed(seed, "grad_check"));
    GradCheckReport rep;
    for (ParamSet* g : groups) {
        for (auto& [k, p] : g->items) {
            Tensor& val = p.value.value_mut();
            std::vector<int> coords(val.size());
            for (int i = 0; i < val.size(); ++i) coords[i] = i;
            if (max_coords_per_tensor > 0 && val.size() > max_coords_per_tensor) {
                std::shuffle(coords.begin(), coords.end(), rng);
                coords.resize(max_coords_per_tensor);
                std::sort(coords.begin(), coords.end());
            }
            const Tensor& ga = analytic.at(g->name + "/" + k);
            for (int i : coords) {
                const double old = val.v[i];
                val.v[i] = old + eps;
                const double lp = loss_fn().value().item();
                val.v[i] = old - eps;
                const double lm = loss_fn().value().item();
                val.v[i] = old;
                const double numeric = (lp - lm) / (2.0 * eps);
                const double a = ga.v[i];
                const double rel = std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)});
                ++rep.coords_checked;
                if (rel > rep.max_rel_err) {
                    rep.max_rel_err = rel;
                    rep.worst_param = g->name + "/" + k;
                    rep.worst_index = i;
                    rep.worst_analytic = a;
                    rep.worst_numeric = numeric;
                }
            }
        }
    }
    return rep;
}

}  // namespace sda
