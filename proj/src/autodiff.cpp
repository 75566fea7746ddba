#include "steerkit/autodiff.hpp"

#include <fmt/format.h>

#include <cmath>

#include "kernels.hpp"
#include "steerkit/error.hpp"

namespace steerkit::ad {

const Tensor& Var::value() const {
    if (!tape_) fail(ErrorKind::Lineage, "variable is not attached to a tape");
    return tape_->value(*this);
}

const Tensor& Gradients::operator[](Var v) const {
    auto it = by_id_.find(v.id());
    if (it == by_id_.end()) {
        fail(ErrorKind::Lookup, fmt::format("no gradient for node {} (not trainable)", v.id()));
    }
    return it->second;
}

void GradTape::check_owned(Var v) const {
    if (v.tape() != this || v.id() >= nodes_.size()) {
        fail(ErrorKind::Lineage, fmt::format("node {} was not recorded on this tape", v.id()));
    }
}

const Tensor& GradTape::value(Var v) const {
    check_owned(v);
    return nodes_[v.id()].value;
}

std::vector<Var> GradTape::parameters() const {
    std::vector<Var> out;
    for (std::size_t i = 0; i < nodes_.size(); ++i)
        if (nodes_[i].kind == NodeKind::parameter) out.push_back(Var(const_cast<GradTape*>(this), i));
    return out;
}

Var GradTape::constant(Tensor value) {
    Node n{NodeKind::constant, {}};
    n.value = std::move(value);
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var GradTape::parameter(Tensor value) {
    Node n{NodeKind::parameter, {}};
    n.value = std::move(value);
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var(this, nodes_.size() - 1);
}

Var GradTape::record(Node node) {
    std::vector<const Tensor*> in;
    in.reserve(node.inputs.size());
    for (auto i : node.inputs) {
        in.push_back(&nodes_[i].value);
        node.requires_grad = node.requires_grad || nodes_[i].requires_grad;
    }
    node.value = compute(node, in);
    nodes_.push_back(std::move(node));
    return Var(this, nodes_.size() - 1);
}

Tensor GradTape::compute(const Node& node, const std::vector<const Tensor*>& in) const {
    switch (node.kind) {
        case NodeKind::constant:
        case NodeKind::parameter: return node.value;
        case NodeKind::matmul: return ops::matmul(*in[0], *in[1]);
        case NodeKind::add: return ops::add(*in[0], *in[1]);
        case NodeKind::sub: return ops::sub(*in[0], *in[1]);
        case NodeKind::mul: return ops::mul(*in[0], *in[1]);
        case NodeKind::scale: return ops::scale(*in[0], node.scalar);
        case NodeKind::add_scalar: return ops::add_scalar(*in[0], node.scalar);
        case NodeKind::relu: return ops::relu(*in[0]);
        case NodeKind::gelu: return ops::gelu(*in[0]);
        case NodeKind::sigmoid: return ops::sigmoid(*in[0]);
        case NodeKind::log_sigmoid: return ops::log_sigmoid(*in[0]);
        case NodeKind::layernorm: return ops::layernorm(*in[0]);
        case NodeKind::softmax: return ops::softmax(*in[0]);
        case NodeKind::log_softmax: return ops::log_softmax(*in[0]);
        case NodeKind::transpose: return ops::transpose(*in[0]);
        case NodeKind::slice: return ops::slice(*in[0], node.axis, node.begin, node.end);
        case NodeKind::concat: {
            std::vector<Tensor> parts;
            parts.reserve(in.size());
            for (auto* t : in) parts.push_back(*t);
            return ops::concat(parts, node.axis);
        }
        case NodeKind::broadcast_rows: return ops::broadcast_rows(*in[0], node.end);
        case NodeKind::sum: return ops::sum(*in[0]);
        case NodeKind::mean: return ops::mean(*in[0]);
        case NodeKind::pick: {
            const Tensor& a = *in[0];
            std::vector<float> out;
            out.reserve(node.picks.size());
            for (auto [r, c] : node.picks) out.push_back(a.at(r, c));
            return Tensor::vector(std::move(out));
        }
    }
    fail(ErrorKind::Contract, "unknown node kind");
}

#define STEERKIT_UNARY(name, kind)              \
    Var GradTape::name(Var a) {                 \
        check_owned(a);                         \
        Node n{NodeKind::kind, {a.id()}};       \
        return record(std::move(n));            \
    }

#define STEERKIT_BINARY(name, kind)             \
    Var GradTape::name(Var a, Var b) {          \
        check_owned(a);                         \
        check_owned(b);                         \
        Node n{NodeKind::kind, {a.id(), b.id()}}; \
        return record(std::move(n));            \
    }

STEERKIT_BINARY(matmul, matmul)
STEERKIT_BINARY(add, add)
STEERKIT_BINARY(sub, sub)
STEERKIT_BINARY(mul, mul)
STEERKIT_UNARY(relu, relu)
STEERKIT_UNARY(gelu, gelu)
STEERKIT_UNARY(sigmoid, sigmoid)
STEERKIT_UNARY(log_sigmoid, log_sigmoid)
STEERKIT_UNARY(layernorm, layernorm)
STEERKIT_UNARY(softmax, softmax)
STEERKIT_UNARY(log_softmax, log_softmax)
STEERKIT_UNARY(transpose, transpose)
STEERKIT_UNARY(sum, sum)
STEERKIT_UNARY(mean, mean)

#undef STEERKIT_UNARY
#undef STEERKIT_BINARY

Var GradTape::scale(Var a, float s) {
    check_owned(a);
    Node n{NodeKind::scale, {a.id()}};
    n.scalar = s;
    return record(std::move(n));
}

Var GradTape::add_scalar(Var a, float s) {
    check_owned(a);
    Node n{NodeKind::add_scalar, {a.id()}};
    n.scalar = s;
    return record(std::move(n));
}

Var GradTape::slice(Var a, std::size_t axis, std::size_t begin, std::size_t end) {
    check_owned(a);
    Node n{NodeKind::slice, {a.id()}};
    n.axis = axis;
    n.begin = begin;
    n.end = end;
    return record(std::move(n));
}

Var GradTape::concat(std::span<const Var> parts, std::size_t axis) {
    Node n{NodeKind::concat, {}};
    for (auto p : parts) {
        check_owned(p);
        n.inputs.push_back(p.id());
    }
    n.axis = axis;
    return record(std::move(n));
}

Var GradTape::broadcast_rows(Var v, std::size_t rows) {
    check_owned(v);
    Node n{NodeKind::broadcast_rows, {v.id()}};
    n.end = rows;
    return record(std::move(n));
}

Var GradTape::pick(Var a, std::vector<std::pair<std::size_t, std::size_t>> indices) {
    check_owned(a);
    if (indices.empty()) fail(ErrorKind::Domain, "pick: no indices");
    Node n{NodeKind::pick, {a.id()}};
    n.picks = std::move(indices);
    return record(std::move(n));
}

std::vector<Tensor> GradTape::replay() const {
    std::vector<Tensor> values;
    values.reserve(nodes_.size());
    for (const auto& node : nodes_) {
        std::vector<const Tensor*> in;
        for (auto i : node.inputs) in.push_back(&values[i]);
        values.push_back(compute(node, in));
    }
    return values;
}

Gradients GradTape::backward(Var loss) const {
    check_owned(loss);
    const Tensor& lv = nodes_[loss.id()].value;
    if (lv.size() != 1 || lv.rank() != 0) {
        fail(ErrorKind::Contract,
             fmt::format("loss must be a scalar, got shape {}", shape_string(lv.shape())));
    }
    bool any_param = false;
    for (const auto& n : nodes_) any_param = any_param || n.kind == NodeKind::parameter;
    if (!any_param) fail(ErrorKind::Contract, "backward: tape has no trainable parameters");

    const std::size_t count = loss.id() + 1;
    std::vector<std::vector<float>> grad(count);
    grad[loss.id()] = {1.0f};

    auto acc = [&](std::size_t id) -> std::vector<float>* {
        if (!nodes_[id].requires_grad) return nullptr;
        auto& g = grad[id];
        if (g.empty()) g.assign(nodes_[id].value.size(), 0.0f);
        return &g;
    };

    for (std::size_t idx = count; idx-- > 0;) {
        const Node& node = nodes_[idx];
        if (grad[idx].empty() || node.inputs.empty()) continue;
        const std::vector<float>& g = grad[idx];
        const Tensor& y = node.value;
        auto input = [&](std::size_t k) -> const Tensor& { return nodes_[node.inputs[k]].value; };

        switch (node.kind) {
            case NodeKind::constant:
            case NodeKind::parameter: break;
            case NodeKind::matmul: {
                const Tensor& a = input(0);
                const Tensor& b = input(1);
                const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
                if (auto* da = acc(node.inputs[0]))
                    kernels::matmul_a_bt_accum(g.data(), b.values().data(), da->data(), m, n, k);
                if (auto* db = acc(node.inputs[1]))
                    kernels::matmul_at_b_accum(a.values().data(), g.data(), db->data(), m, k, n);
                break;
            }
            case NodeKind::add:
            case NodeKind::sub: {
                const float sign = node.kind == NodeKind::sub ? -1.0f : 1.0f;
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                if (auto* db = acc(node.inputs[1]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += sign * g[i];
                break;
            }
            case NodeKind::mul: {
                const auto a = input(0).values();
                const auto b = input(1).values();
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * b[i];
                if (auto* db = acc(node.inputs[1]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*db)[i] += g[i] * a[i];
                break;
            }
            case NodeKind::scale:
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += node.scalar * g[i];
                break;
            case NodeKind::add_scalar:
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i];
                break;
            case NodeKind::relu: {
                const auto x = input(0).values();
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i)
                        if (x[i] > 0.0f) (*da)[i] += g[i];
                break;
            }
            case NodeKind::gelu: {
                const auto x = input(0).values();
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * kernels::gelu_grad(x[i]);
                break;
            }
            case NodeKind::sigmoid: {
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * y[i] * (1.0f - y[i]);
                break;
            }
            case NodeKind::log_sigmoid: {
                const auto x = input(0).values();
                if (auto* da = acc(node.inputs[0]))
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[i] += g[i] * kernels::sigmoid(-x[i]);
                break;
            }
            case NodeKind::layernorm: {
                const Tensor& x = input(0);
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const auto rows = x.rows(), d = x.cols();
                std::vector<float> scratch(d);
                for (std::size_t r = 0; r < rows; ++r) {
                    float inv_std = 0.0f;
                    kernels::layernorm_row(x.values().data() + r * d, scratch.data(), d,
                                           ops::kLayerNormEps, &inv_std);
                    const float* gr = g.data() + r * d;
                    const float* yr = y.values().data() + r * d;
                    float mg = 0.0f, mgy = 0.0f;
                    for (std::size_t i = 0; i < d; ++i) {
                        mg += gr[i];
                        mgy += gr[i] * yr[i];
                    }
                    mg /= static_cast<float>(d);
                    mgy /= static_cast<float>(d);
                    for (std::size_t i = 0; i < d; ++i)
                        (*da)[r * d + i] += inv_std * (gr[i] - mg - yr[i] * mgy);
                }
                break;
            }
            case NodeKind::softmax: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const auto rows = y.rows(), n = y.cols();
                for (std::size_t r = 0; r < rows; ++r) {
                    const float* gr = g.data() + r * n;
                    const float* yr = y.values().data() + r * n;
                    float dotgy = 0.0f;
                    for (std::size_t i = 0; i < n; ++i) dotgy += gr[i] * yr[i];
                    for (std::size_t i = 0; i < n; ++i) (*da)[r * n + i] += yr[i] * (gr[i] - dotgy);
                }
                break;
            }
            case NodeKind::log_softmax: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const auto rows = y.rows(), n = y.cols();
                for (std::size_t r = 0; r < rows; ++r) {
                    const float* gr = g.data() + r * n;
                    const float* yr = y.values().data() + r * n;
                    float gsum = 0.0f;
                    for (std::size_t i = 0; i < n; ++i) gsum += gr[i];
                    for (std::size_t i = 0; i < n; ++i)
                        (*da)[r * n + i] += gr[i] - std::exp(yr[i]) * gsum;
                }
                break;
            }
            case NodeKind::transpose: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const auto m = y.dim(0), n = y.dim(1);  // y is [m x n], input is [n x m]
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) (*da)[j * m + i] += g[i * n + j];
                break;
            }
            case NodeKind::slice: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const Tensor& x = input(0);
                if (x.rank() == 1 || node.axis == 0) {
                    const std::size_t stride = x.rank() == 1 ? 1 : x.dim(1);
                    for (std::size_t i = 0; i < g.size(); ++i) (*da)[node.begin * stride + i] += g[i];
                } else {
                    const auto m = x.dim(0), n = x.dim(1), w = node.end - node.begin;
                    for (std::size_t i = 0; i < m; ++i)
                        for (std::size_t j = 0; j < w; ++j) (*da)[i * n + node.begin + j] += g[i * w + j];
                }
                break;
            }
            case NodeKind::concat: {
                const bool by_rows = y.rank() == 1 || node.axis == 0;
                std::size_t offset = 0;
                for (std::size_t k = 0; k < node.inputs.size(); ++k) {
                    const Tensor& part = input(k);
                    auto* dp = acc(node.inputs[k]);
                    if (by_rows) {
                        if (dp)
                            for (std::size_t i = 0; i < part.size(); ++i) (*dp)[i] += g[offset + i];
                        offset += part.size();
                    } else {
                        const auto m = part.dim(0), w = part.dim(1), n = y.dim(1);
                        if (dp)
                            for (std::size_t i = 0; i < m; ++i)
                                for (std::size_t j = 0; j < w; ++j) (*dp)[i * w + j] += g[i * n + offset + j];
                        offset += w;
                    }
                }
                break;
            }
            case NodeKind::broadcast_rows: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const auto rows = y.dim(0), d = y.dim(1);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t i = 0; i < d; ++i) (*da)[i] += g[r * d + i];
                break;
            }
            case NodeKind::sum:
            case NodeKind::mean: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                float s = g[0];
                if (node.kind == NodeKind::mean) s /= static_cast<float>(da->size());
                for (auto& v : *da) v += s;
                break;
            }
            case NodeKind::pick: {
                auto* da = acc(node.inputs[0]);
                if (!da) break;
                const auto n = input(0).cols();
                for (std::size_t i = 0; i < node.picks.size(); ++i) {
                    auto [r, c] = node.picks[i];
                    (*da)[r * n + c] += g[i];
                }
                break;
            }
        }
    }

    Gradients out;
    for (std::size_t i = 0; i < count; ++i) {
        if (nodes_[i].kind != NodeKind::parameter) continue;
        std::vector<float> g = grad[i];
        if (g.empty()) g.assign(nodes_[i].value.size(), 0.0f);
        for (float v : g) {
            if (!std::isfinite(v)) fail(ErrorKind::Domain, fmt::format("non-finite gradient for node {}", i));
        }
        out.by_id_.emplace(i, Tensor(nodes_[i].value.shape(), std::move(g)));
    }
    for (std::size_t i = count; i < nodes_.size(); ++i) {
        if (nodes_[i].kind == NodeKind::parameter)
            out.by_id_.emplace(i, Tensor::zeros(nodes_[i].value.shape()));
    }
    return out;
}

std::vector<Tensor> finite_diff_oracle(const LossFn& loss_fn, std::span<const Tensor> params,
                                       double step) {
    if (!(step >= 1e-5 && step <= 1e-1)) {
        fail(ErrorKind::Domain, fmt::format("finite difference step {} outside [1e-5, 1e-1]", step));
    }
    std::vector<Tensor> work(params.begin(), params.end());
    std::vector<Tensor> grads;
    std::size_t flat = 0;
    for (std::size_t p = 0; p < work.size(); ++p) {
        std::vector<float> g(work[p].size());
        for (std::size_t i = 0; i < g.size(); ++i, ++flat) {
            const float base = params[p][i];
            const float hi = static_cast<float>(base + step);
            const float lo = static_cast<float>(base - step);
            auto eval_at = [&](float v) {
                auto vals = params[p].to_vector();
                vals[i] = v;
                work[p] = Tensor(params[p].shape(), std::move(vals));
                const double l = loss_fn(work);
                if (!std::isfinite(l)) {
                    fail(ErrorKind::Evaluation,
                         fmt::format("non-finite loss at perturbed coordinate {} (param {}, index {})",
                                     flat, p, i));
                }
                return l;
            };
            const double up = eval_at(hi);
            const double down = eval_at(lo);
            g[i] = static_cast<float>((up - down) / (static_cast<double>(hi) - static_cast<double>(lo)));
        }
        work[p] = params[p];
        grads.emplace_back(params[p].shape(), std::move(g));
    }
    return grads;
}

}  // namespace steerkit::ad
