#pragma once

#include <cstddef>
#include <functional>
#include <map>
#include <span>
#include <utility>
#include <vector>

#include "steerkit/tensor.hpp"

namespace steerkit::ad {

class GradTape;

// Handle to a value recorded on a tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
public:
    Var() = default;

    const Tensor& value() const;
    std::size_t id() const noexcept { return id_; }
    GradTape* tape() const noexcept { return tape_; }

private:
    friend class GradTape;
    Var(GradTape* tape, std::size_t id) : tape_(tape), id_(id) {}

    GradTape* tape_ = nullptr;
    std::size_t id_ = 0;
};

class Gradients {
public:
    const Tensor& operator[](Var v) const;
    bool contains(Var v) const { return by_id_.count(v.id()) != 0; }
    std::size_t size() const noexcept { return by_id_.size(); }

private:
    friend class GradTape;
    std::map<std::size_t, Tensor> by_id_;
};

enum class NodeKind {
    constant,
    parameter,
    matmul,
    add,
    sub,
    mul,
    scale,
    add_scalar,
    relu,
    gelu,
    sigmoid,
    log_sigmoid,
    layernorm,
    softmax,
    log_softmax,
    transpose,
    slice,
    concat,
    broadcast_rows,
    sum,
    mean,
    pick,
};

// Records primitive tensor operations in execution order and differentiates
// the recorded program with respect to the leaves marked as parameters.
// Constants never receive gradients, which is how frozen model weights are
// expressed. Confined to one thread.
class GradTape {
public:
    GradTape() = default;
    GradTape(const GradTape&) = delete;
    GradTape& operator=(const GradTape&) = delete;

    Var constant(Tensor value);
    Var parameter(Tensor value);

    std::size_t size() const noexcept { return nodes_.size(); }
    const Tensor& value(Var v) const;
    std::vector<Var> parameters() const;

    Var matmul(Var a, Var b);
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var a, float s);
    Var add_scalar(Var a, float s);
    Var relu(Var a);
    Var gelu(Var a);
    Var sigmoid(Var a);
    Var log_sigmoid(Var a);
    Var layernorm(Var a);
    Var softmax(Var a);
    Var log_softmax(Var a);
    Var transpose(Var a);
    Var slice(Var a, std::size_t axis, std::size_t begin, std::size_t end);
    Var concat(std::span<const Var> parts, std::size_t axis);
    Var broadcast_rows(Var v, std::size_t n);
    Var sum(Var a);
    Var mean(Var a);
    // Gathers a[r, c] for each (r, c) into a vector.
    Var pick(Var a, std::vector<std::pair<std::size_t, std::size_t>> indices);

    Gradients backward(Var loss) const;

    // Re-executes every recorded node from the stored leaves.
    std::vector<Tensor> replay() const;

private:
    struct Node {
        Node(NodeKind k, std::vector<std::size_t> in) : kind(k), inputs(std::move(in)) {}

        NodeKind kind;
        std::vector<std::size_t> inputs;
        float scalar = 0.0f;
        std::size_t axis = 0, begin = 0, end = 0;
        std::vector<std::pair<std::size_t, std::size_t>> picks;
        Tensor value;
        bool requires_grad = false;
    };

    Var record(Node node);
    void check_owned(Var v) const;
    Tensor compute(const Node& node, const std::vector<const Tensor*>& in) const;

    std::vector<Node> nodes_;
};

// Free-function spellings so model code reads as algebra.
inline Var matmul(Var a, Var b) { return a.tape()->matmul(a, b); }
inline Var add(Var a, Var b) { return a.tape()->add(a, b); }
inline Var sub(Var a, Var b) { return a.tape()->sub(a, b); }
inline Var mul(Var a, Var b) { return a.tape()->mul(a, b); }
inline Var scale(Var a, float s) { return a.tape()->scale(a, s); }
inline Var relu(Var a) { return a.tape()->relu(a); }
inline Var gelu(Var a) { return a.tape()->gelu(a); }
inline Var sigmoid(Var a) { return a.tape()->sigmoid(a); }
inline Var layernorm(Var a) { return a.tape()->layernorm(a); }
inline Var softmax(Var a) { return a.tape()->softmax(a); }
inline Var transpose(Var a) { return a.tape()->transpose(a); }
inline Var sum(Var a) { return a.tape()->sum(a); }
inline Var mean(Var a) { return a.tape()->mean(a); }

using LossFn = std::function<double(std::span<const Tensor>)>;

// Central differences over every coordinate of every parameter. The divisor is
// the perturbation actually realised in float32, not the nominal step.
std::vector<Tensor> finite_diff_oracle(const LossFn& loss_fn, std::span<const Tensor> params,
                                       double step);

}  // namespace steerkit::ad
