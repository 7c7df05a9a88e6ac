#pragma once

#include <algorithm>
#include <functional>

#include "spd/graph.hpp"

namespace spd {

template <class S>
struct GradCheckOptions {
    S probe_eps = S(1e-5);
    // 0 = check every coordinate; otherwise sample this many per tensor.
    size_t max_coords_per_tensor = 0;
    uint64_t sample_seed = 0;
    // Relative-error denominators never drop below noise_relief times the
    // roundoff noise of the central difference itself; gradients smaller than
    // that are below what the probe can resolve and get compared absolutely.
    S noise_relief = S(1e5);
    S denom_floor = S(1e-6);
};

template <class S>
struct GradCheckResult {
    S max_rel_err = S(0);
    std::string worst_param;
    size_t worst_coord = 0;
};

// Central-difference comparison of analytic gradients against the loss
// produced by `build`, which must deterministically construct the forward
// graph and return the scalar loss variable.
template <class S>
GradCheckResult<S> grad_check(ParamStore<S>& store,
                              const std::function<typename Graph<S>::Var(Graph<S>&)>& build,
                              const GradCheckOptions<S>& opt = {}) {
    const auto eval_loss = [&]() -> S {
        Graph<S> g(&store);
        auto loss = build(g);
        if (!g.value(loss).is_scalar()) throw ContractError("grad_check: loss must be a scalar");
        const S v = g.value(loss).data[0];
        if (!std::isfinite(static_cast<double>(v))) throw NumericError("grad_check: loss is not finite");
        return v;
    };

    store.zero_grads();
    S loss0 = 0;
    {
        Graph<S> g(&store);
        auto loss = build(g);
        loss0 = g.value(loss).data[0];
        g.backward(loss);
    }
    // Snapshot analytic grads before probing perturbs anything.
    std::map<std::string, std::vector<S>> analytic;
    for (const auto& [name, t] : store.items()) analytic[name] = t.grad;

    const S fd_noise = std::numeric_limits<S>::epsilon() * std::max(S(1), std::abs(loss0)) / opt.probe_eps;
    const S floor = std::max(opt.denom_floor, opt.noise_relief * fd_noise);

    GradCheckResult<S> result;
    Rng pick(opt.sample_seed);
    for (auto& [name, t] : store.items()) {
        if (!t.requires_grad) continue;
        std::vector<size_t> coords;
        if (opt.max_coords_per_tensor == 0 || t.numel() <= opt.max_coords_per_tensor) {
            coords.resize(t.numel());
            for (size_t i = 0; i < t.numel(); ++i) coords[i] = i;
        } else {
            for (size_t i = 0; i < opt.max_coords_per_tensor; ++i)
                coords.push_back(static_cast<size_t>(pick.next_below(t.numel())));
        }
        for (size_t c : coords) {
            const S orig = t.data[c];
            t.data[c] = orig + opt.probe_eps;
            const S lp = eval_loss();
            t.data[c] = orig - opt.probe_eps;
            const S lm = eval_loss();
            t.data[c] = orig;
            const S fd = (lp - lm) / (S(2) * opt.probe_eps);
            // Parameters never pulled into the graph carry no grad buffer;
            // their analytic gradient is zero.
            const auto& ag = analytic[name];
            const S an = c < ag.size() ? ag[c] : S(0);
            const S denom = std::max({std::abs(fd), std::abs(an), floor});
            const S rel = std::abs(fd - an) / denom;
            if (rel > result.max_rel_err) {
                result.max_rel_err = rel;
                result.worst_param = name;
                result.worst_coord = c;
            }
        }
    }
    return result;
}

}  // namespace spd
