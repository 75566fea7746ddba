#pragma once

#include <span>
#include <vector>

#include "steerkit/steering.hpp"

namespace steerkit::detail {

// delta = scale * eps * W h
inline void lmsteer_delta(std::span<const float> h, const LmSteerParams& p, float scale,
                          std::span<float> delta) {
    const std::size_t d = h.size();
    const float* w = p.weight.values().data();
    const float coeff = scale * p.epsilon;
    for (std::size_t i = 0; i < d; ++i) {
        float acc = 0.0f;
        for (std::size_t j = 0; j < d; ++j) acc += w[i * d + j] * h[j];
        delta[i] = coeff * acc;
    }
}

// delta = scale * R^T (W h + b - R h)
inline void loreft_delta(std::span<const float> h, const LoreftParams& p, float scale,
                         std::span<float> delta) {
    const std::size_t d = h.size(), r = p.projection.dim(0);
    const float* R = p.projection.values().data();
    const float* W = p.weight.values().data();
    const float* b = p.bias.values().data();
    std::vector<float> u(r);
    for (std::size_t k = 0; k < r; ++k) {
        float wh = 0.0f, rh = 0.0f;
        for (std::size_t j = 0; j < d; ++j) {
            wh += W[k * d + j] * h[j];
            rh += R[k * d + j] * h[j];
        }
        u[k] = wh + b[k] - rh;
    }
    for (std::size_t i = 0; i < d; ++i) {
        float acc = 0.0f;
        for (std::size_t k = 0; k < r; ++k) acc += R[k * d + i] * u[k];
        delta[i] = scale * acc;
    }
}

}  // namespace steerkit::detail
