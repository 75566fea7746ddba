#include "steerkit/pipeline.hpp"

#include <fmt/format.h>

#include "steerkit/error.hpp"

namespace steerkit {

namespace {

[[noreturn]] void invalid(const std::string& field, const std::string& message) {
    throw Error(ErrorKind::Validation, fmt::format("{}: {}", field, message)).with_field(field);
}

}  // namespace

void ExtractSpec::validate(const EngineConfig& engine) const {
    if (name.empty()) invalid("name", "required");
    if (method != "caa" && method != "pca_center" && method != "pca_diff" && method != "linear_probe" &&
        method != "sae")
        invalid("method", fmt::format("unknown extraction method '{}' (caa, pca_center, pca_diff, linear_probe, sae)",
                                      method));
    if (layer < 1 || layer > engine.num_layers) invalid("layer", fmt::format("must be in [1, {}]", engine.num_layers));
    if (method == "sae" && feature < 0 && query.empty()) invalid("feature", "sae extraction needs a feature or a query");
}

SteeringVector run_extraction(std::shared_ptr<const ModelBundle> bundle, const ExtractSpec& spec,
                              const ContrastivePairSet* data, const SaeWeights* sae) {
    spec.validate(bundle->config());
    SteeringVector v;
    if (spec.method == "sae") {
        if (!sae) fail(ErrorKind::NotFound, "no sparse autoencoder is loaded");
        int k = spec.feature;
        if (k < 0) {
            const auto matches = sae_search_labels(*sae, spec.query, 1);
            if (matches.empty())
                throw Error(ErrorKind::NotFound, fmt::format("no feature label matches '{}'", spec.query))
                    .with_field("query");
            k = matches.front().index;
        }
        if (k >= sae->num_features())
            invalid("feature", fmt::format("must be below {}", sae->num_features()));
        v = sae_extract_feature_vector(*sae, k, spec.layer);
    } else {
        if (!data) fail(ErrorKind::Contract, "extraction needs a contrastive dataset");
        ContrastivePairSet set = *data;
        set.layer = spec.layer;
        set.positions = spec.positions;
        const PairActivations acts = collect_pair_activations(bundle, set);
        if (spec.method == "caa") {
            v = extract_caa(acts.plus, acts.minus, spec.layer);
        } else if (spec.method == "pca_center") {
            v = extract_pca_center(acts.plus, acts.minus, spec.layer).vector;
        } else if (spec.method == "pca_diff") {
            v = extract_pca_diff(acts.plus, acts.minus, spec.layer).vector;
        } else {
            std::vector<LabeledActivation> labelled;
            for (const auto& h : acts.plus) labelled.push_back({h, 1});
            for (const auto& h : acts.minus) labelled.push_back({h, 0});
            v = train_linear_probe(labelled, {}, spec.layer).vector;
        }
        v.metadata["pairs"] = std::to_string(set.pairs.size());
    }
    v.name = spec.name;
    v.source_layer = spec.layer;
    if (!spec.dataset.empty()) v.metadata["dataset"] = spec.dataset;
    return v;
}

}  // namespace steerkit
