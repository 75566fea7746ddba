#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace steerkit {

using Shape = std::vector<std::size_t>;

std::string shape_string(const Shape& shape);
std::size_t shape_size(const Shape& shape);

// Dense row-major float32 array. Immutable once constructed; every extent is
// positive and every entry finite. A rank-0 tensor holds a single scalar.
class Tensor {
public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<float> data);

    static Tensor scalar(float value);
    static Tensor vector(std::vector<float> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<float> values);
    static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows);
    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, float value);
    static Tensor identity(std::size_t n);

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t dim(std::size_t axis) const;
    bool empty() const noexcept { return data_.empty(); }

    // Row/column view of rank-1 and rank-2 tensors; a vector is a single row.
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<const float> values() const noexcept { return data_; }
    std::span<const float> row(std::size_t r) const;
    float operator[](std::size_t i) const { return data_[i]; }
    float at(std::size_t r, std::size_t c) const;
    float item() const;

    std::vector<float> to_vector() const { return data_; }
    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<float> data_;
};

// Bitwise equality of values and shapes; distinguishes -0.0f from 0.0f.
bool bit_equal(const Tensor& a, const Tensor& b);

float max_abs_diff(const Tensor& a, const Tensor& b);

namespace ops {

inline constexpr float kLayerNormEps = 1e-5f;

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);
Tensor add_scalar(const Tensor& a, float s);
Tensor relu(const Tensor& a);
// tanh approximation
Tensor gelu(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor log_sigmoid(const Tensor& a);
// Row-wise normalisation without affine parameters.
Tensor layernorm(const Tensor& a, float eps = kLayerNormEps);
Tensor softmax(const Tensor& a);
Tensor log_softmax(const Tensor& a);
Tensor transpose(const Tensor& a);
// Half-open [begin, end) along axis 0 (rows) or 1 (columns).
Tensor slice(const Tensor& a, std::size_t axis, std::size_t begin, std::size_t end);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);
// Stacks `v` into an n-row matrix; the only sanctioned way to add a vector to
// every row of a matrix.
Tensor broadcast_rows(const Tensor& v, std::size_t n);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);

}  // namespace ops
}  // namespace steerkit
