#pragma once

#include <memory>
#include <string>

#include "steerkit/extraction.hpp"
#include "steerkit/learning.hpp"
#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"

// End-to-end extraction shared by the CLI and the HTTP service.
namespace steerkit {

struct ExtractSpec {
    std::string name;
    std::string method = "caa";  // caa | pca_center | pca_diff | linear_probe | sae
    int layer = 1;
    PositionSelector positions = PositionSelector::final_token();
    std::string dataset;  // recorded in metadata
    // sae: a feature index, or a label query whose best match is used.
    int feature = -1;
    std::string query;

    void validate(const EngineConfig& engine) const;
    bool needs_dataset() const { return method != "sae"; }
};

// Positive examples are labelled 1 for the probe.
SteeringVector run_extraction(std::shared_ptr<const ModelBundle> bundle, const ExtractSpec& spec,
                              const ContrastivePairSet* data, const SaeWeights* sae = nullptr);

}  // namespace steerkit
