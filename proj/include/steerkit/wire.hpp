#pragma once

#include <functional>
#include <memory>
#include <string>

#include "json.hpp"
#include "steerkit/extraction.hpp"
#include "steerkit/learning.hpp"
#include "steerkit/model.hpp"
#include "steerkit/pipeline.hpp"
#include "steerkit/steering.hpp"

// JSON forms of the request types exchanged with the HTTP service. Decoders
// throw Error(Validation) with the dotted path of the offending field,
// relative to the object being decoded.
namespace steerkit::wire {

using json = nlohmann::json;

// Looks up a stored vector by name; returns null when unknown.
using VectorResolver = std::function<std::shared_ptr<const SteeringVector>(const std::string&)>;

// {"policy": "additive_superposition" | "priority_select",
//  "configs": [{"vector": name, "scale": a, "target_layers": [l...] | null,
//               "priority": p, "trigger": {...}}]}
// Unknown vector names raise Error(NotFound) naming the vector.
SteerVectorRequest steer_request_from_json(const json& j, const VectorResolver& resolve);
json steer_request_to_json(const SteerVectorRequest& request);

// {"stage": "prefill" | "decode" | "both",
//  "position_ranges": [{"start": s, "end": e, "anchor": "prompt" | "generation"}],
//  "token_ids": [t...] | null, "context_suffix": [t...]}
TriggerSpec trigger_from_json(const json& j);
json trigger_to_json(const TriggerSpec& trigger);

// {"mode": "greedy"} or {"mode": "top_k", "top_k": k, "seed": s}
Sampling sampling_from_json(const json& j);
json sampling_to_json(const Sampling& sampling);

struct GenerateRequest {
    std::string prompt;
    int max_new_tokens = 32;
    Sampling sampling;
    std::optional<SteerVectorRequest> steering;
    bool compare_baseline = false;
};

GenerateRequest generate_request_from_json(const json& j, const VectorResolver& resolve);
json generate_request_to_json(const GenerateRequest& request);

// Field names match TrainConfig members; "trigger" uses the trigger form.
TrainConfig train_config_from_json(const json& j);
json train_config_to_json(const TrainConfig& cfg);

// {"name", "method", "layer", "positions": "final" | "all" | [p...],
//  "feature", "query"}; the dataset is resolved by the caller.
ExtractSpec extract_spec_from_json(const json& j);

PositionSelector positions_from_json(const json& j);
json positions_to_json(const PositionSelector& selector);

std::string_view to_string(StageFilter stage);
StageFilter stage_from_string(std::string_view name);
ConflictPolicy policy_from_string(std::string_view name);
Objective objective_from_string(std::string_view name);

// Serialises text that may hold partial UTF-8 sequences; invalid bytes become
// U+FFFD.
std::string dump_lossy(const json& j);

}  // namespace steerkit::wire
