#include "steerkit/steering.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>

#include "steering_math.hpp"
#include "steerkit/error.hpp"

namespace steerkit {

std::string_view method_of(const LearnedSteeringParams& params) {
    struct Visitor {
        std::string_view operator()(const SavParams&) const { return "sav"; }
        std::string_view operator()(const LmSteerParams&) const { return "lmsteer"; }
        std::string_view operator()(const LoreftParams&) const { return "loreft"; }
    };
    return std::visit(Visitor{}, params);
}

std::size_t parameter_count(const LearnedSteeringParams& params) {
    struct Visitor {
        std::size_t operator()(const SavParams& p) const { return p.bias.size(); }
        std::size_t operator()(const LmSteerParams& p) const { return p.weight.size(); }
        std::size_t operator()(const LoreftParams& p) const {
            return p.projection.size() + p.weight.size() + p.bias.size();
        }
    };
    return std::visit(Visitor{}, params);
}

void validate_params(const LearnedSteeringParams& params, int hidden_dim) {
    const auto d = static_cast<std::size_t>(hidden_dim);
    if (const auto* sav = std::get_if<SavParams>(&params)) {
        if (sav->bias.shape() != Shape{d}) {
            fail(ErrorKind::Dimension, fmt::format("sav bias has shape {}, expected [{}]",
                                                   shape_string(sav->bias.shape()), d));
        }
    } else if (const auto* lm = std::get_if<LmSteerParams>(&params)) {
        if (lm->weight.shape() != Shape{d, d}) {
            fail(ErrorKind::Dimension, fmt::format("lmsteer weight has shape {}, expected [{}, {}]",
                                                   shape_string(lm->weight.shape()), d, d));
        }
        if (!std::isfinite(lm->epsilon)) fail(ErrorKind::Config, "lmsteer epsilon must be finite");
    } else {
        const auto& lo = std::get<LoreftParams>(params);
        if (lo.projection.rank() != 2 || lo.projection.dim(1) != d) {
            fail(ErrorKind::Dimension, fmt::format("loreft projection has shape {}, expected [r, {}]",
                                                   shape_string(lo.projection.shape()), d));
        }
        const auto r = lo.projection.dim(0);
        if (r < 1 || r > d) fail(ErrorKind::Config, fmt::format("loreft rank {} outside [1, {}]", r, d));
        if (lo.weight.shape() != Shape{r, d}) {
            fail(ErrorKind::Dimension, fmt::format("loreft weight has shape {}, expected [{}, {}]",
                                                   shape_string(lo.weight.shape()), r, d));
        }
        if (lo.bias.shape() != Shape{r}) {
            fail(ErrorKind::Dimension, fmt::format("loreft bias has shape {}, expected [{}]",
                                                   shape_string(lo.bias.shape()), r));
        }
    }
}

const Tensor& SteeringVector::direction() const {
    if (is_learned()) fail(ErrorKind::Config, fmt::format("vector '{}' holds learned parameters", name));
    return std::get<Tensor>(payload);
}

const LearnedSteeringParams& SteeringVector::learned() const {
    if (!is_learned()) fail(ErrorKind::Config, fmt::format("vector '{}' holds a plain direction", name));
    return std::get<LearnedSteeringParams>(payload);
}

int SteeringVector::dim() const {
    if (!is_learned()) return static_cast<int>(std::get<Tensor>(payload).size());
    struct Visitor {
        std::size_t operator()(const SavParams& p) const { return p.bias.size(); }
        std::size_t operator()(const LmSteerParams& p) const { return p.weight.dim(1); }
        std::size_t operator()(const LoreftParams& p) const { return p.projection.dim(1); }
    };
    return static_cast<int>(std::visit(Visitor{}, learned()));
}

namespace {

void require_vector_pair(const Tensor& h, std::size_t expected, std::string_view op) {
    if (h.rank() != 1 || h.size() != expected) {
        fail(ErrorKind::Dimension, fmt::format("{}: hidden state has shape {}, expected [{}]", op,
                                               shape_string(h.shape()), expected));
    }
}

Tensor plus(const Tensor& h, const std::vector<float>& delta) {
    std::vector<float> out(h.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = h[i] + delta[i];
    return Tensor::vector(std::move(out));
}

}  // namespace

Tensor apply_direct_add(const Tensor& h, const Tensor& v, float alpha) {
    require_vector_pair(h, v.size(), "apply_direct_add");
    require_vector_pair(v, h.size(), "apply_direct_add");
    std::vector<float> delta(h.size());
    for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = alpha * v[i];
    return plus(h, delta);
}

Tensor apply_lmsteer(const Tensor& h, const LmSteerParams& params) {
    validate_params(params, static_cast<int>(h.size()));
    require_vector_pair(h, params.weight.dim(0), "apply_lmsteer");
    std::vector<float> delta(h.size());
    detail::lmsteer_delta(h.values(), params, 1.0f, delta);
    return plus(h, delta);
}

Tensor apply_loreft(const Tensor& h, const LoreftParams& params) {
    if (params.projection.rank() != 2) fail(ErrorKind::Dimension, "apply_loreft: projection must be a matrix");
    require_vector_pair(h, params.projection.dim(1), "apply_loreft");
    validate_params(params, static_cast<int>(h.size()));
    std::vector<float> delta(h.size());
    detail::loreft_delta(h.values(), params, 1.0f, delta);
    return plus(h, delta);
}

void TriggerSpec::validate() const {
    for (std::size_t i = 0; i < position_ranges.size(); ++i) {
        const auto& r = position_ranges[i];
        if (r.start < 0 || r.start >= r.end) {
            throw Error(ErrorKind::Validation,
                        fmt::format("position range [{}, {}) needs 0 <= start < end", r.start, r.end))
                .with_field(fmt::format("position_ranges[{}]", i));
        }
    }
    if (context_suffix.size() > kMaxContextSuffix) {
        throw Error(ErrorKind::Validation, fmt::format("context suffix has {} tokens, at most {} allowed",
                                                       context_suffix.size(), kMaxContextSuffix))
            .with_field("context_suffix");
    }
}

bool evaluate_trigger(const TriggerSpec& spec, const ForwardContext& ctx, std::span<const int> recent_tokens) {
    if (spec.stage == StageFilter::prefill && ctx.stage != Stage::prefill) return false;
    if (spec.stage == StageFilter::decode && ctx.stage != Stage::decode) return false;
    if (!spec.position_ranges.empty()) {
        const bool in_any = std::any_of(spec.position_ranges.begin(), spec.position_ranges.end(),
                                        [&](const PositionRange& r) {
                                            const int pos = r.anchor == PositionRange::Anchor::prompt
                                                                ? ctx.absolute_position
                                                                : ctx.generated_offset;
                                            return pos >= 0 && pos >= r.start && pos < r.end;
                                        });
        if (!in_any) return false;
    }
    if (spec.token_ids && spec.token_ids->count(ctx.token_id) == 0) return false;
    if (!spec.context_suffix.empty()) {
        const auto& suffix = spec.context_suffix;
        if (recent_tokens.size() < suffix.size()) return false;
        if (!std::equal(suffix.begin(), suffix.end(), recent_tokens.end() - suffix.size())) return false;
    }
    return true;
}

std::string_view to_string(ConflictPolicy policy) {
    return policy == ConflictPolicy::priority_select ? "priority_select" : "additive_superposition";
}

namespace {

bool stages_overlap(StageFilter a, StageFilter b) {
    return a == StageFilter::both || b == StageFilter::both || a == b;
}

bool layers_overlap(const VectorConfig& a, const VectorConfig& b, int num_layers) {
    for (int l = 1; l <= num_layers; ++l)
        if (a.targets(l) && b.targets(l)) return true;
    return false;
}

bool tokens_overlap(const TriggerSpec& a, const TriggerSpec& b) {
    if (!a.token_ids || !b.token_ids) return true;
    return std::any_of(a.token_ids->begin(), a.token_ids->end(),
                       [&](int t) { return b.token_ids->count(t) != 0; });
}

std::string field(std::size_t i, std::string_view leaf) { return fmt::format("configs[{}].{}", i, leaf); }

// Writes h + combined delta into out. Additive contributions are summed per
// coordinate in ascending value order, which makes the result independent of
// config order.
void combine(std::span<const float> h, const std::vector<std::span<const float>>& deltas,
             const std::vector<int>& priorities, const std::vector<std::size_t>& indices, ConflictPolicy policy,
             std::span<float> out) {
    const std::size_t d = h.size();
    if (deltas.empty()) {
        std::copy(h.begin(), h.end(), out.begin());
        return;
    }
    if (policy == ConflictPolicy::priority_select) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < deltas.size(); ++k)
            if (priorities[k] > priorities[best]) best = k;
        std::vector<std::size_t> tied;
        for (std::size_t k = 0; k < deltas.size(); ++k)
            if (priorities[k] == priorities[best]) tied.push_back(indices[k]);
        if (tied.size() > 1) {
            fail(ErrorKind::Resolution, fmt::format("priority tie at {} between configs [{}]", priorities[best],
                                                    fmt::join(tied, ", ")));
        }
        for (std::size_t i = 0; i < d; ++i) out[i] = h[i] + deltas[best][i];
        return;
    }
    if (deltas.size() == 1) {
        for (std::size_t i = 0; i < d; ++i) out[i] = h[i] + deltas[0][i];
        return;
    }
    std::vector<float> column(deltas.size());
    for (std::size_t i = 0; i < d; ++i) {
        for (std::size_t k = 0; k < deltas.size(); ++k) column[k] = deltas[k][i];
        std::sort(column.begin(), column.end(), [](float a, float b) {
            return a < b || (a == b && std::signbit(a) && !std::signbit(b));
        });
        float total = 0.0f;
        for (float c : column) total += c;
        out[i] = h[i] + total;
    }
}

}  // namespace

void validate_request(const SteerVectorRequest& request, const EngineConfig& engine,
                      const AlgorithmRegistry& registry) {
    for (std::size_t i = 0; i < request.configs.size(); ++i) {
        const auto& cfg = request.configs[i];
        if (!cfg.vector) throw Error(ErrorKind::Validation, "config has no vector").with_field(field(i, "vector"));
        if (!std::isfinite(cfg.scale)) {
            throw Error(ErrorKind::Validation, fmt::format("scale {} is not finite", cfg.scale))
                .with_field(field(i, "scale"));
        }
        if (cfg.target_layers) {
            if (cfg.target_layers->empty()) {
                throw Error(ErrorKind::Validation, "target_layers is empty").with_field(field(i, "target_layers"));
            }
            for (int l : *cfg.target_layers) {
                if (l < 1 || l > engine.num_layers) {
                    throw Error(ErrorKind::Validation,
                                fmt::format("target layer {} outside [1, {}]", l, engine.num_layers))
                        .with_field(field(i, "target_layers"));
                }
            }
        }
        try {
            cfg.trigger.validate();
        } catch (Error& e) {
            e.with_field(field(i, "trigger." + e.field()));
            throw;
        }
        if (!registry.contains(cfg.vector->method_id)) {
            throw Error(ErrorKind::Lookup, fmt::format("no steering algorithm registered as '{}'",
                                                       cfg.vector->method_id))
                .with_field(field(i, "vector.method_id"));
        }
        try {
            registry.resolve(cfg.vector->method_id).validate(*cfg.vector, cfg, engine);
        } catch (Error& e) {
            if (e.field().empty()) e.with_field(field(i, "vector"));
            throw;
        }
    }
    if (request.policy == ConflictPolicy::priority_select) {
        for (std::size_t i = 0; i < request.configs.size(); ++i)
            for (std::size_t j = i + 1; j < request.configs.size(); ++j) {
                const auto& a = request.configs[i];
                const auto& b = request.configs[j];
                if (a.priority == b.priority && layers_overlap(a, b, engine.num_layers) &&
                    stages_overlap(a.trigger.stage, b.trigger.stage) && tokens_overlap(a.trigger, b.trigger)) {
                    throw Error(ErrorKind::Validation,
                                fmt::format("configs {} and {} can fire together with equal priority {}", i, j,
                                            a.priority))
                        .with_field(field(j, "priority"));
                }
            }
    }
}

Tensor resolve_and_apply(const Tensor& h, std::span<const ActiveDelta> active, ConflictPolicy policy) {
    if (h.rank() != 1) fail(ErrorKind::Dimension, "resolve_and_apply: h must be a vector");
    std::vector<std::span<const float>> deltas;
    std::vector<int> priorities;
    std::vector<std::size_t> indices;
    for (std::size_t k = 0; k < active.size(); ++k) {
        const auto& a = active[k];
        if (a.delta.shape() != h.shape()) {
            fail(ErrorKind::Dimension, fmt::format("resolve_and_apply: delta {} has shape {}, h has {}", k,
                                                   shape_string(a.delta.shape()), shape_string(h.shape())));
        }
        deltas.push_back(a.delta.values());
        priorities.push_back(a.config ? a.config->priority : 0);
        indices.push_back(a.index);
    }
    std::vector<float> out(h.size());
    combine(h.values(), deltas, priorities, indices, policy, out);
    return Tensor::vector(std::move(out));
}

SteeringHook::SteeringHook(const EngineConfig& engine, SteerVectorRequest request, const AlgorithmRegistry& registry,
                           bool record)
    : hidden_dim_(engine.hidden_dim), request_(std::move(request)), record_(record) {
    validate_request(request_, engine, registry);
    for (const auto& cfg : request_.configs) algorithms_.push_back(&registry.resolve(cfg.vector->method_id));
}

void SteeringHook::operator()(int layer, const ForwardContext& ctx, std::span<float> hidden) {
    const std::size_t d = hidden.size();
    if (d != static_cast<std::size_t>(hidden_dim_)) {
        fail(ErrorKind::Dimension, fmt::format("steering hook got a row of {} values, expected {}", d, hidden_dim_));
    }
    const auto recent = ctx.history.size() > kMaxContextSuffix ? ctx.history.last(kMaxContextSuffix) : ctx.history;

    std::vector<std::vector<float>> storage;
    std::vector<std::span<const float>> deltas;
    std::vector<int> priorities;
    std::vector<std::size_t> fired;
    for (std::size_t i = 0; i < request_.configs.size(); ++i) {
        const auto& cfg = request_.configs[i];
        if (!cfg.targets(layer) || !evaluate_trigger(cfg.trigger, ctx, recent)) continue;
        auto& delta = storage.emplace_back(d);
        algorithms_[i]->compute_delta(hidden, *cfg.vector, cfg.scale, delta);
        priorities.push_back(cfg.priority);
        fired.push_back(i);
    }
    for (const auto& s : storage) deltas.emplace_back(s);

    HookEvent* event = nullptr;
    if (record_) {
        event = &events_.emplace_back();
        event->layer = layer;
        event->stage = ctx.stage;
        event->batch_index = ctx.batch_index;
        event->position = ctx.absolute_position;
        event->token_id = ctx.token_id;
        event->fired = fired;
        event->before.assign(hidden.begin(), hidden.end());
    }
    if (!deltas.empty()) {
        std::vector<float> before(hidden.begin(), hidden.end());
        combine(before, deltas, priorities, fired, request_.policy, hidden);
    }
    if (event) event->after.assign(hidden.begin(), hidden.end());
}

InterceptionHook build_steering_hook(const EngineConfig& engine, SteerVectorRequest request,
                                     const AlgorithmRegistry& registry) {
    auto hook = std::make_shared<SteeringHook>(engine, std::move(request), registry);
    return [hook](int layer, const ForwardContext& ctx, std::span<float> hidden) { (*hook)(layer, ctx, hidden); };
}

}  // namespace steerkit
