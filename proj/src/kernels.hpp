#pragma once

// Raw float32 loops shared by the checked tensor ops, the autodiff adjoints
// and the inference engine. Every kernel accumulates each output element in a
// fixed order that does not depend on how many rows are processed at once, so
// a row computed alone is bit-identical to the same row computed in a batch.

#include <algorithm>
#include <cmath>
#include <cstddef>

#include "steerkit/error.hpp"

namespace steerkit::kernels {

// out[m x n] = a[m x k] * b[k x n]
inline void matmul(const float* a, const float* b, float* out, std::size_t m, std::size_t k,
                   std::size_t n) {
    std::fill(out, out + m * n, 0.0f);
    for (std::size_t i = 0; i < m; ++i) {
        float* orow = out + i * n;
        const float* arow = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const float aip = arow[p];
            const float* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
        }
    }
}

// out[m x n] += a^T b where a is [k x m] and b is [k x n]
inline void matmul_at_b_accum(const float* a, const float* b, float* out, std::size_t k,
                              std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const float* arow = a + p * m;
        const float* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            const float api = arow[i];
            float* orow = out + i * n;
            for (std::size_t j = 0; j < n; ++j) orow[j] += api * brow[j];
        }
    }
}

// out[m x k] += a b^T where a is [m x n] and b is [k x n]
inline void matmul_a_bt_accum(const float* a, const float* b, float* out, std::size_t m,
                              std::size_t n, std::size_t k) {
    for (std::size_t i = 0; i < m; ++i) {
        const float* arow = a + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const float* brow = b + p * n;
            float acc = 0.0f;
            for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
            out[i * k + p] += acc;
        }
    }
}

inline float dot(const float* a, const float* b, std::size_t n) {
    float acc = 0.0f;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
}

inline constexpr float kGeluCoeff = 0.7978845608028654f;  // sqrt(2/pi)

inline float gelu(float x) {
    const float inner = kGeluCoeff * (x + 0.044715f * x * x * x);
    return 0.5f * x * (1.0f + std::tanh(inner));
}

inline float gelu_grad(float x) {
    const float inner = kGeluCoeff * (x + 0.044715f * x * x * x);
    const float t = std::tanh(inner);
    const float dinner = kGeluCoeff * (1.0f + 3.0f * 0.044715f * x * x);
    return 0.5f * (1.0f + t) + 0.5f * x * (1.0f - t * t) * dinner;
}

inline float sigmoid(float x) {
    if (x >= 0.0f) return 1.0f / (1.0f + std::exp(-x));
    const float e = std::exp(x);
    return e / (1.0f + e);
}

// log(sigmoid(x)) without overflow for large |x|.
inline float log_sigmoid(float x) {
    if (x >= 0.0f) return -std::log1p(std::exp(-x));
    return x - std::log1p(std::exp(x));
}

// Normalises one row; writes the inverse standard deviation to *inv_std when
// requested so the adjoint can reuse it.
inline void layernorm_row(const float* in, float* out, std::size_t d, float eps,
                          float* inv_std = nullptr) {
    float mean = 0.0f;
    for (std::size_t i = 0; i < d; ++i) mean += in[i];
    mean /= static_cast<float>(d);
    float var = 0.0f;
    for (std::size_t i = 0; i < d; ++i) {
        const float c = in[i] - mean;
        var += c * c;
    }
    var /= static_cast<float>(d);
    // Saturating here would silently map an overflowing residual stream to zeros.
    if (!std::isfinite(var)) fail(ErrorKind::Domain, "layernorm: row variance overflowed float32");
    const float r = 1.0f / std::sqrt(var + eps);
    for (std::size_t i = 0; i < d; ++i) out[i] = (in[i] - mean) * r;
    if (inv_std) *inv_std = r;
}

// Layer norm followed by the elementwise affine map gamma * x + beta.
inline void layernorm_affine_row(const float* in, float* out, const float* gamma,
                                 const float* beta, std::size_t d, float eps) {
    layernorm_row(in, out, d, eps);
    for (std::size_t i = 0; i < d; ++i) out[i] = out[i] * gamma[i] + beta[i];
}

inline void softmax_row(const float* in, float* out, std::size_t n) {
    float mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    float total = 0.0f;
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = std::exp(in[i] - mx);
        total += out[i];
    }
    const float inv = 1.0f / total;
    for (std::size_t i = 0; i < n; ++i) out[i] *= inv;
}

inline void log_softmax_row(const float* in, float* out, std::size_t n) {
    float mx = in[0];
    for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
    float total = 0.0f;
    for (std::size_t i = 0; i < n; ++i) total += std::exp(in[i] - mx);
    const float lse = mx + std::log(total);
    for (std::size_t i = 0; i < n; ++i) out[i] = in[i] - lse;
}

}  // namespace steerkit::kernels
