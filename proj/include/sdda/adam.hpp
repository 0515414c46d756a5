#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "sdda/errors.hpp"
#include "sdda/tensor.hpp"

namespace sdda {

struct AdamHyper {
    double learning_rate = 2e-4;
    double beta1 = 0.5;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

// Moment buffers mirror the parameter list they were created for.
struct AdamState {
    AdamHyper hyper;
    std::vector<std::vector<double>> m;
    std::vector<std::vector<double>> v;
    std::uint64_t t = 0;
};

inline AdamState make_adam_state(std::span<Tensor* const> params, AdamHyper hyper = {}) {
    AdamState state{hyper, {}, {}, 0};
    for (const Tensor* p : params) {
        state.m.emplace_back(p->size(), 0.0);
        state.v.emplace_back(p->size(), 0.0);
    }
    return state;
}

// One bias-corrected Adam update with explicit gradients.
inline void adam_step(std::span<Tensor* const> params, std::span<const std::vector<double>* const> grads,
                      AdamState& state) {
    if (params.size() != grads.size() || params.size() != state.m.size()) {
        throw ContractError("adam_step: " + std::to_string(params.size()) + " params, "
                            + std::to_string(grads.size()) + " grads, " + std::to_string(state.m.size())
                            + " state buffers");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        const std::size_t n = params[i]->size();
        if ((grads[i] != nullptr && grads[i]->size() != n) || state.m[i].size() != n || state.v[i].size() != n) {
            throw ContractError("adam_step: size mismatch for parameter " + std::to_string(i));
        }
    }
    state.t += 1;
    const AdamHyper& h = state.hyper;
    const double bc1 = 1.0 - std::pow(h.beta1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(h.beta2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (grads[i] == nullptr) continue;
        std::vector<double>& w = params[i]->values;
        std::vector<double>& m = state.m[i];
        std::vector<double>& v = state.v[i];
        const std::vector<double>& g = *grads[i];
        for (std::size_t k = 0; k < w.size(); ++k) {
            m[k] = h.beta1 * m[k] + (1.0 - h.beta1) * g[k];
            v[k] = h.beta2 * v[k] + (1.0 - h.beta2) * g[k] * g[k];
            const double m_hat = m[k] / bc1;
            const double v_hat = v[k] / bc2;
            w[k] -= h.learning_rate * m_hat / (std::sqrt(v_hat) + h.epsilon);
        }
    }
}

// Uses each parameter's own .grad buffer; a missing buffer counts as zero.
inline void adam_step(std::span<Tensor* const> params, AdamState& state) {
    std::vector<const std::vector<double>*> grads;
    grads.reserve(params.size());
    for (const Tensor* p : params) grads.push_back(p->grad ? &*p->grad : nullptr);
    adam_step(params, grads, state);
}

} // namespace sdda
