#include "steerkit/tensor.hpp"

#include <fmt/format.h>

#include <bit>
#include <cmath>
#include <cstring>

#include "kernels.hpp"
#include "steerkit/error.hpp"

namespace steerkit {

std::string shape_string(const Shape& shape) {
    return fmt::format("[{}]", fmt::join(shape, ", "));
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto e : shape) n *= e;
    return n;
}

namespace {

void check_finite(std::span<const float> values, std::string_view where) {
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (!std::isfinite(values[i])) {
            fail(ErrorKind::Domain,
                 fmt::format("{}: non-finite value {} at flat index {}", where, values[i], i));
        }
    }
}

}  // namespace

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    for (std::size_t axis = 0; axis < shape_.size(); ++axis) {
        if (shape_[axis] == 0) {
            fail(ErrorKind::Domain,
                 fmt::format("empty tensor: axis {} of shape {} has extent 0", axis,
                             shape_string(shape_)));
        }
    }
    if (shape_size(shape_) != data_.size()) {
        fail(ErrorKind::Dimension, fmt::format("shape {} needs {} values, got {}",
                                               shape_string(shape_), shape_size(shape_),
                                               data_.size()));
    }
    check_finite(data_, "tensor");
}

Tensor Tensor::scalar(float value) { return Tensor({}, {value}); }

Tensor Tensor::vector(std::vector<float> values) {
    const auto n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<float> values) {
    return Tensor({rows, cols}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<float>> rows) {
    std::vector<float> values;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
        if (r.size() != cols) fail(ErrorKind::Dimension, "ragged matrix literal");
        values.insert(values.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(values));
}

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
    const auto n = shape_size(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value));
}

Tensor Tensor::identity(std::size_t n) {
    std::vector<float> v(n * n, 0.0f);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0f;
    return Tensor({n, n}, std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size()) {
        fail(ErrorKind::Dimension,
             fmt::format("axis {} out of range for shape {}", axis, shape_string(shape_)));
    }
    return shape_[axis];
}

std::size_t Tensor::rows() const {
    if (rank() == 1) return 1;
    if (rank() == 2) return shape_[0];
    fail(ErrorKind::Dimension, fmt::format("rows() needs rank 1 or 2, got shape {}",
                                           shape_string(shape_)));
}

std::size_t Tensor::cols() const {
    if (rank() == 1) return shape_[0];
    if (rank() == 2) return shape_[1];
    fail(ErrorKind::Dimension, fmt::format("cols() needs rank 1 or 2, got shape {}",
                                           shape_string(shape_)));
}

std::span<const float> Tensor::row(std::size_t r) const {
    const auto c = cols();
    if (r >= rows()) fail(ErrorKind::Index, fmt::format("row {} out of {}", r, rows()));
    return std::span<const float>(data_).subspan(r * c, c);
}

float Tensor::at(std::size_t r, std::size_t c) const {
    if (r >= rows() || c >= cols()) {
        fail(ErrorKind::Index, fmt::format("index ({}, {}) outside shape {}", r, c,
                                           shape_string(shape_)));
    }
    return data_[r * cols() + c];
}

float Tensor::item() const {
    if (data_.size() != 1) {
        fail(ErrorKind::Contract,
             fmt::format("item() on non-scalar tensor of shape {}", shape_string(shape_)));
    }
    return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

bool bit_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) return false;
    const auto va = a.values();
    const auto vb = b.values();
    return std::memcmp(va.data(), vb.data(), va.size() * sizeof(float)) == 0;
}

float max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Dimension, fmt::format("max_abs_diff: shapes {} and {} differ",
                                               shape_string(a.shape()), shape_string(b.shape())));
    }
    float m = 0.0f;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::fabs(a[i] - b[i]));
    return m;
}

namespace ops {
namespace {

void require_nonempty(const Tensor& a, std::string_view op) {
    if (a.empty()) fail(ErrorKind::Domain, fmt::format("{}: empty tensor", op));
}

void require_rank(const Tensor& a, std::size_t lo, std::size_t hi, std::string_view op) {
    require_nonempty(a, op);
    if (a.rank() < lo || a.rank() > hi) {
        fail(ErrorKind::Dimension, fmt::format("{}: rank {} not in [{}, {}] (shape {})", op,
                                               a.rank(), lo, hi, shape_string(a.shape())));
    }
}

void require_same_shape(const Tensor& a, const Tensor& b, std::string_view op) {
    require_nonempty(a, op);
    require_nonempty(b, op);
    if (a.shape() != b.shape()) {
        fail(ErrorKind::Dimension, fmt::format("{}: shape {} vs {} (no implicit broadcasting)",
                                               op, shape_string(a.shape()),
                                               shape_string(b.shape())));
    }
}

Tensor finish(Shape shape, std::vector<float> data, std::string_view op) {
    check_finite(data, op);
    return Tensor(std::move(shape), std::move(data));
}

template <typename F>
Tensor unary(const Tensor& a, std::string_view op, F f) {
    require_nonempty(a, op);
    std::vector<float> out(a.size());
    const auto in = a.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[i]);
    return finish(a.shape(), std::move(out), op);
}

template <typename F>
Tensor binary(const Tensor& a, const Tensor& b, std::string_view op, F f) {
    require_same_shape(a, b, op);
    std::vector<float> out(a.size());
    const auto va = a.values();
    const auto vb = b.values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(va[i], vb[i]);
    return finish(a.shape(), std::move(out), op);
}

template <typename RowFn>
Tensor rowwise(const Tensor& a, std::string_view op, RowFn f) {
    require_rank(a, 1, 2, op);
    std::vector<float> out(a.size());
    const auto n = a.cols();
    for (std::size_t r = 0; r < a.rows(); ++r) f(a.values().data() + r * n, out.data() + r * n, n);
    return finish(a.shape(), std::move(out), op);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_rank(a, 2, 2, "matmul");
    require_rank(b, 2, 2, "matmul");
    if (a.dim(1) != b.dim(0)) {
        fail(ErrorKind::Dimension,
             fmt::format("matmul: lhs axis 1 (extent {}) != rhs axis 0 (extent {})", a.dim(1),
                         b.dim(0)));
    }
    const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
    std::vector<float> out(m * n);
    kernels::matmul(a.values().data(), b.values().data(), out.data(), m, k, n);
    return finish({m, n}, std::move(out), "matmul");
}

Tensor add(const Tensor& a, const Tensor& b) {
    return binary(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary(a, b, "sub", [](float x, float y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(a, b, "mul", [](float x, float y) { return x * y; });
}

Tensor scale(const Tensor& a, float s) {
    return unary(a, "scale", [s](float x) { return x * s; });
}

Tensor add_scalar(const Tensor& a, float s) {
    return unary(a, "add_scalar", [s](float x) { return x + s; });
}

Tensor relu(const Tensor& a) {
    return unary(a, "relu", [](float x) { return x > 0.0f ? x : 0.0f; });
}

Tensor gelu(const Tensor& a) { return unary(a, "gelu", kernels::gelu); }

Tensor sigmoid(const Tensor& a) { return unary(a, "sigmoid", kernels::sigmoid); }

Tensor log_sigmoid(const Tensor& a) { return unary(a, "log_sigmoid", kernels::log_sigmoid); }

Tensor layernorm(const Tensor& a, float eps) {
    return rowwise(a, "layernorm", [eps](const float* in, float* out, std::size_t n) {
        kernels::layernorm_row(in, out, n, eps);
    });
}

Tensor softmax(const Tensor& a) { return rowwise(a, "softmax", kernels::softmax_row); }

Tensor log_softmax(const Tensor& a) {
    return rowwise(a, "log_softmax", kernels::log_softmax_row);
}

Tensor transpose(const Tensor& a) {
    require_rank(a, 2, 2, "transpose");
    const auto m = a.dim(0), n = a.dim(1);
    std::vector<float> out(m * n);
    const auto in = a.values();
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = in[i * n + j];
    return Tensor({n, m}, std::move(out));
}

Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end) {
    require_rank(a, 1, 2, "slice");
    if (axis >= a.rank()) {
        fail(ErrorKind::Dimension, fmt::format("slice: axis {} invalid for shape {}", axis,
                                               shape_string(a.shape())));
    }
    if (begin >= end || end > a.dim(axis)) {
        fail(ErrorKind::Dimension, fmt::format("slice: range [{}, {}) invalid for axis {} of extent {}",
                                               begin, end, axis, a.dim(axis)));
    }
    const auto in = a.values();
    if (a.rank() == 1) {
        return Tensor({end - begin}, std::vector<float>(in.begin() + begin, in.begin() + end));
    }
    const auto m = a.dim(0), n = a.dim(1);
    if (axis == 0) {
        return Tensor({end - begin, n},
                      std::vector<float>(in.begin() + begin * n, in.begin() + end * n));
    }
    const auto w = end - begin;
    std::vector<float> out(m * w);
    for (std::size_t i = 0; i < m; ++i)
        std::copy(in.begin() + i * n + begin, in.begin() + i * n + end, out.begin() + i * w);
    return Tensor({m, w}, std::move(out));
}

Tensor concat(std::span<const Tensor> parts, std::size_t axis) {
    if (parts.empty()) fail(ErrorKind::Domain, "concat: no inputs");
    const auto& first = parts.front();
    require_rank(first, 1, 2, "concat");
    if (axis >= first.rank()) {
        fail(ErrorKind::Dimension, fmt::format("concat: axis {} invalid for rank {}", axis,
                                               first.rank()));
    }
    const std::size_t other = 1 - axis;
    std::size_t total = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const auto& t = parts[p];
        require_rank(t, first.rank(), first.rank(), "concat");
        if (first.rank() == 2 && t.dim(other) != first.dim(other)) {
            fail(ErrorKind::Dimension,
                 fmt::format("concat: input {} axis {} has extent {}, expected {}", p, other,
                             t.dim(other), first.dim(other)));
        }
        total += t.dim(axis);
    }
    std::vector<float> out;
    out.reserve(total * (first.rank() == 2 ? first.dim(other) : 1));
    if (first.rank() == 1 || axis == 0) {
        for (const auto& t : parts) out.insert(out.end(), t.values().begin(), t.values().end());
        Shape shape = first.shape();
        shape[axis] = total;
        return Tensor(std::move(shape), std::move(out));
    }
    const auto m = first.dim(0);
    for (std::size_t i = 0; i < m; ++i)
        for (const auto& t : parts) {
            const auto r = t.row(i);
            out.insert(out.end(), r.begin(), r.end());
        }
    return Tensor({m, total}, std::move(out));
}

Tensor broadcast_rows(const Tensor& v, std::size_t n) {
    require_rank(v, 1, 1, "broadcast_rows");
    if (n == 0) fail(ErrorKind::Domain, "broadcast_rows: zero rows");
    const auto d = v.size();
    std::vector<float> out(n * d);
    for (std::size_t i = 0; i < n; ++i) std::copy(v.values().begin(), v.values().end(), out.begin() + i * d);
    return Tensor({n, d}, std::move(out));
}

Tensor sum(const Tensor& a) {
    require_nonempty(a, "sum");
    float s = 0.0f;
    for (float x : a.values()) s += x;
    return finish({}, {s}, "sum");
}

Tensor mean(const Tensor& a) {
    require_nonempty(a, "mean");
    float s = 0.0f;
    for (float x : a.values()) s += x;
    return finish({}, {s / static_cast<float>(a.size())}, "mean");
}

}  // namespace ops
}  // namespace steerkit
