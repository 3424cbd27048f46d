#pragma once

#include "tensor.hpp"

#include <cmath>
#include <span>
#include <vector>

namespace robad {

struct AdamOptions {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

/// First/second moment estimates, one buffer per parameter, plus the step
/// counter shared by all of them.
struct AdamState {
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    long t = 0;

    static AdamState for_params(std::span<const Tensor> params) {
        AdamState s;
        for (const auto &p : params) {
            s.m.emplace_back(p.numel(), 0.0);
            s.v.emplace_back(p.numel(), 0.0);
        }
        return s;
    }
};

/// One bias-corrected Adam update using the gradients currently held by
/// `params`. Parameters with no accumulated gradient are treated as having
/// a zero gradient.
inline void adam_step(std::span<Tensor> params, AdamState &state, const AdamOptions &opt = {}) {
    if (state.m.size() != params.size() || state.v.size() != params.size())
        throw DimensionError("adam_step: state holds " + std::to_string(state.m.size()) +
                             " buffers for " + std::to_string(params.size()) + " params");
    for (std::size_t i = 0; i < params.size(); ++i)
        if (state.m[i].size() != params[i].numel() || state.v[i].size() != params[i].numel())
            throw DimensionError("adam_step: state buffer " + std::to_string(i) +
                                 " does not match param shape " + shape_str(params[i].shape()));
    ++state.t;
    const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto &p = params[i];
        auto data = p.mutable_data();
        auto g = p.grad();
        auto &m = state.m[i];
        auto &v = state.v[i];
        for (std::size_t j = 0; j < data.size(); ++j) {
            m[j] = opt.beta1 * m[j] + (1.0 - opt.beta1) * g[j];
            v[j] = opt.beta2 * v[j] + (1.0 - opt.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            data[j] -= opt.lr * mhat / (std::sqrt(vhat) + opt.eps);
        }
    }
}

inline void zero_grad(std::span<Tensor> params) {
    for (auto &p : params)
        p.zero_grad();
}

} // namespace robad
