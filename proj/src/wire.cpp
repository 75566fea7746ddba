#include "steerkit/wire.hpp"

#include <cmath>
#include <limits>

#include <fmt/format.h>

#include "steerkit/error.hpp"

namespace steerkit::wire {

namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& message) {
    throw Error(ErrorKind::Validation, fmt::format("{}: {}", field, message)).with_field(field);
}

std::string join(const std::string& base, const std::string& key) { return base.empty() ? key : base + "." + key; }

const json* member(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end() || it->is_null()) return nullptr;
    return &*it;
}

void require_object(const json& j, const std::string& path) {
    if (!j.is_object()) invalid(path.empty() ? "body" : path, "expected an object");
}

int as_int(const json& v, const std::string& path) {
    if (v.is_number_integer()) {
        const auto x = v.get<std::int64_t>();
        if (x < std::numeric_limits<int>::min() || x > std::numeric_limits<int>::max())
            invalid(path, "integer out of range");
        return static_cast<int>(x);
    }
    if (v.is_number_unsigned()) {
        if (v.get<std::uint64_t>() > static_cast<std::uint64_t>(std::numeric_limits<int>::max()))
            invalid(path, "integer out of range");
        return static_cast<int>(v.get<std::uint64_t>());
    }
    invalid(path, "expected an integer");
}

float as_float(const json& v, const std::string& path) {
    if (!v.is_number()) invalid(path, "expected a number");
    const double x = v.get<double>();
    if (!std::isfinite(x) || std::fabs(x) > std::numeric_limits<float>::max()) invalid(path, "number out of range");
    return static_cast<float>(x);
}

std::string as_string(const json& v, const std::string& path) {
    if (!v.is_string()) invalid(path, "expected a string");
    return v.get<std::string>();
}

bool as_bool(const json& v, const std::string& path) {
    if (!v.is_boolean()) invalid(path, "expected a boolean");
    return v.get<bool>();
}

std::vector<int> as_int_list(const json& v, const std::string& path) {
    if (!v.is_array()) invalid(path, "expected a list of integers");
    std::vector<int> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back(as_int(v[i], fmt::format("{}[{}]", path, i)));
    return out;
}

// Re-roots a validation error raised by a nested decoder or validator.
[[noreturn]] void rethrow_under(const Error& e, const std::string& prefix) {
    Error copy(e.kind(), e.what());
    copy.with_field(e.field().empty() ? prefix : join(prefix, e.field()));
    throw copy;
}

}  // namespace

std::string_view to_string(StageFilter stage) {
    switch (stage) {
        case StageFilter::prefill: return "prefill";
        case StageFilter::decode: return "decode";
        case StageFilter::both: return "both";
    }
    return "both";
}

StageFilter stage_from_string(std::string_view name) {
    if (name == "prefill") return StageFilter::prefill;
    if (name == "decode") return StageFilter::decode;
    if (name == "both") return StageFilter::both;
    invalid("stage", fmt::format("unknown stage '{}' (prefill, decode, both)", name));
}

ConflictPolicy policy_from_string(std::string_view name) {
    if (name == "additive_superposition") return ConflictPolicy::additive_superposition;
    if (name == "priority_select") return ConflictPolicy::priority_select;
    invalid("policy", fmt::format("unknown policy '{}' (additive_superposition, priority_select)", name));
}

Objective objective_from_string(std::string_view name) {
    if (name == "next_token_cross_entropy" || name == "cross_entropy") return Objective::next_token_cross_entropy;
    if (name == "contrastive_preference") return Objective::contrastive_preference;
    invalid("objective", fmt::format("unknown objective '{}' (next_token_cross_entropy, contrastive_preference)", name));
}

TriggerSpec trigger_from_json(const json& j) {
    TriggerSpec t;
    if (j.is_null()) return t;
    require_object(j, "");
    if (auto v = member(j, "stage")) t.stage = stage_from_string(as_string(*v, "stage"));
    if (auto v = member(j, "position_ranges")) {
        if (!v->is_array()) invalid("position_ranges", "expected a list");
        for (std::size_t i = 0; i < v->size(); ++i) {
            const std::string path = fmt::format("position_ranges[{}]", i);
            const json& r = (*v)[i];
            require_object(r, path);
            PositionRange range;
            const json* start = member(r, "start");
            const json* end = member(r, "end");
            if (!start) invalid(join(path, "start"), "required");
            if (!end) invalid(join(path, "end"), "required");
            range.start = as_int(*start, join(path, "start"));
            range.end = as_int(*end, join(path, "end"));
            if (auto a = member(r, "anchor")) {
                const std::string anchor = as_string(*a, join(path, "anchor"));
                if (anchor == "prompt")
                    range.anchor = PositionRange::Anchor::prompt;
                else if (anchor == "generation")
                    range.anchor = PositionRange::Anchor::generation;
                else
                    invalid(join(path, "anchor"), "expected 'prompt' or 'generation'");
            }
            t.position_ranges.push_back(range);
        }
    }
    if (auto v = member(j, "token_ids")) {
        const auto ids = as_int_list(*v, "token_ids");
        t.token_ids = std::set<int>(ids.begin(), ids.end());
    }
    if (auto v = member(j, "context_suffix")) t.context_suffix = as_int_list(*v, "context_suffix");
    t.validate();
    return t;
}

json trigger_to_json(const TriggerSpec& t) {
    json ranges = json::array();
    for (const auto& r : t.position_ranges)
        ranges.push_back({{"start", r.start},
                          {"end", r.end},
                          {"anchor", r.anchor == PositionRange::Anchor::prompt ? "prompt" : "generation"}});
    json out = {{"stage", to_string(t.stage)}, {"position_ranges", ranges}, {"context_suffix", t.context_suffix}};
    out["token_ids"] = t.token_ids ? json(std::vector<int>(t.token_ids->begin(), t.token_ids->end())) : json(nullptr);
    return out;
}

SteerVectorRequest steer_request_from_json(const json& j, const VectorResolver& resolve) {
    require_object(j, "");
    SteerVectorRequest req;
    if (auto v = member(j, "policy")) req.policy = policy_from_string(as_string(*v, "policy"));
    const json* configs = member(j, "configs");
    if (!configs || !configs->is_array()) invalid("configs", "expected a list of vector configs");
    for (std::size_t i = 0; i < configs->size(); ++i) {
        const std::string path = fmt::format("configs[{}]", i);
        const json& c = (*configs)[i];
        require_object(c, path);
        VectorConfig vc;
        const json* name = member(c, "vector");
        if (!name) invalid(join(path, "vector"), "required");
        const std::string vector_name = as_string(*name, join(path, "vector"));
        vc.vector = resolve ? resolve(vector_name) : nullptr;
        if (!vc.vector)
            throw Error(ErrorKind::NotFound, fmt::format("unknown vector '{}'", vector_name))
                .with_field(join(path, "vector"));
        if (auto v = member(c, "scale")) vc.scale = as_float(*v, join(path, "scale"));
        if (auto v = member(c, "target_layers")) {
            if (!(v->is_string() && v->get<std::string>() == "all")) {
                const auto layers = as_int_list(*v, join(path, "target_layers"));
                vc.target_layers = std::set<int>(layers.begin(), layers.end());
            }
        }
        if (auto v = member(c, "priority")) vc.priority = as_int(*v, join(path, "priority"));
        if (auto v = member(c, "trigger")) {
            try {
                vc.trigger = trigger_from_json(*v);
            } catch (const Error& e) {
                rethrow_under(e, join(path, "trigger"));
            }
        }
        req.configs.push_back(std::move(vc));
    }
    return req;
}

json steer_request_to_json(const SteerVectorRequest& request) {
    json configs = json::array();
    for (const auto& c : request.configs) {
        json item = {{"vector", c.vector ? c.vector->name : std::string()},
                     {"scale", c.scale},
                     {"priority", c.priority},
                     {"trigger", trigger_to_json(c.trigger)}};
        item["target_layers"] =
            c.target_layers ? json(std::vector<int>(c.target_layers->begin(), c.target_layers->end())) : json(nullptr);
        configs.push_back(std::move(item));
    }
    return {{"policy", to_string(request.policy)}, {"configs", configs}};
}

Sampling sampling_from_json(const json& j) {
    if (j.is_null()) return Sampling::greedy();
    require_object(j, "");
    const std::string mode = member(j, "mode") ? as_string(j["mode"], "mode") : "greedy";
    if (mode == "greedy") return Sampling::greedy();
    if (mode != "top_k") invalid("mode", "expected 'greedy' or 'top_k'");
    const json* k = member(j, "top_k");
    if (!k) invalid("top_k", "required for top_k sampling");
    const int top_k = as_int(*k, "top_k");
    if (top_k < 1) invalid("top_k", "must be at least 1");
    std::uint64_t seed = 0;
    if (auto s = member(j, "seed")) {
        if (!s->is_number_integer() || (s->is_number_integer() && !s->is_number_unsigned() && s->get<std::int64_t>() < 0))
            invalid("seed", "expected a non-negative integer");
        seed = s->get<std::uint64_t>();
    }
    return Sampling::seeded_top_k(top_k, seed);
}

json sampling_to_json(const Sampling& s) {
    if (s.mode == Sampling::Mode::greedy) return {{"mode", "greedy"}};
    return {{"mode", "top_k"}, {"top_k", s.top_k}, {"seed", s.seed}};
}

GenerateRequest generate_request_from_json(const json& j, const VectorResolver& resolve) {
    require_object(j, "");
    GenerateRequest r;
    const json* prompt = member(j, "prompt");
    if (!prompt) invalid("prompt", "required");
    r.prompt = as_string(*prompt, "prompt");
    if (r.prompt.empty()) invalid("prompt", "must not be empty");
    if (r.prompt.find('\xFF') != std::string::npos) invalid("prompt", "byte 0xFF is reserved");
    if (auto v = member(j, "max_new_tokens")) r.max_new_tokens = as_int(*v, "max_new_tokens");
    if (r.max_new_tokens < 1) invalid("max_new_tokens", "must be at least 1");
    if (auto v = member(j, "sampling")) {
        try {
            r.sampling = sampling_from_json(*v);
        } catch (const Error& e) {
            rethrow_under(e, "sampling");
        }
    }
    if (auto v = member(j, "steering")) {
        try {
            r.steering = steer_request_from_json(*v, resolve);
        } catch (const Error& e) {
            rethrow_under(e, "steering");
        }
    }
    if (auto v = member(j, "compare_baseline")) r.compare_baseline = as_bool(*v, "compare_baseline");
    return r;
}

json generate_request_to_json(const GenerateRequest& r) {
    json out = {{"prompt", r.prompt},
                {"max_new_tokens", r.max_new_tokens},
                {"sampling", sampling_to_json(r.sampling)},
                {"compare_baseline", r.compare_baseline}};
    out["steering"] = r.steering ? steer_request_to_json(*r.steering) : json(nullptr);
    return out;
}

PositionSelector positions_from_json(const json& j) {
    if (j.is_null()) return PositionSelector::final_token();
    if (j.is_string()) {
        const auto s = j.get<std::string>();
        if (s == "final" || s == "final_token") return PositionSelector::final_token();
        if (s == "all") return PositionSelector::all();
        invalid("positions", "expected 'final', 'all' or a list of positions");
    }
    return PositionSelector::at(as_int_list(j, "positions"));
}

json positions_to_json(const PositionSelector& selector) {
    switch (selector.kind) {
        case PositionSelector::Kind::final_token: return "final";
        case PositionSelector::Kind::all: return "all";
        case PositionSelector::Kind::explicit_list: return selector.positions;
    }
    return "final";
}

TrainConfig train_config_from_json(const json& j) {
    require_object(j, "");
    TrainConfig cfg;
    if (auto v = member(j, "method")) cfg.method = as_string(*v, "method");
    if (auto v = member(j, "target_layer")) cfg.target_layer = as_int(*v, "target_layer");
    if (auto v = member(j, "rank")) cfg.rank = as_int(*v, "rank");
    if (auto v = member(j, "epsilon")) cfg.epsilon = as_float(*v, "epsilon");
    if (auto v = member(j, "learning_rate")) cfg.learning_rate = as_float(*v, "learning_rate");
    if (auto v = member(j, "max_steps")) cfg.max_steps = as_int(*v, "max_steps");
    if (auto v = member(j, "batch_size")) cfg.batch_size = as_int(*v, "batch_size");
    if (auto v = member(j, "seed")) {
        if (!v->is_number_unsigned()) invalid("seed", "expected a non-negative integer");
        cfg.seed = v->get<std::uint64_t>();
    }
    if (auto v = member(j, "objective")) cfg.objective = objective_from_string(as_string(*v, "objective"));
    if (auto v = member(j, "trigger")) {
        try {
            cfg.trigger = trigger_from_json(*v);
        } catch (const Error& e) {
            rethrow_under(e, "trigger");
        }
    }
    return cfg;
}

json train_config_to_json(const TrainConfig& cfg) {
    return {{"method", cfg.method},
            {"target_layer", cfg.target_layer},
            {"rank", cfg.rank},
            {"epsilon", cfg.epsilon},
            {"learning_rate", cfg.learning_rate},
            {"max_steps", cfg.max_steps},
            {"batch_size", cfg.batch_size},
            {"seed", cfg.seed},
            {"objective", to_string(cfg.objective)},
            {"trigger", trigger_to_json(cfg.trigger)}};
}

ExtractSpec extract_spec_from_json(const json& j) {
    require_object(j, "");
    ExtractSpec spec;
    if (auto v = member(j, "name")) spec.name = as_string(*v, "name");
    if (auto v = member(j, "method")) spec.method = as_string(*v, "method");
    if (auto v = member(j, "layer")) spec.layer = as_int(*v, "layer");
    if (auto v = member(j, "positions")) spec.positions = positions_from_json(*v);
    if (auto v = member(j, "feature")) spec.feature = as_int(*v, "feature");
    if (auto v = member(j, "query")) spec.query = as_string(*v, "query");
    return spec;
}

std::string dump_lossy(const json& j) { return j.dump(-1, ' ', false, json::error_handler_t::replace); }

}  // namespace steerkit::wire
