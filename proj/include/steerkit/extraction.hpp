#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"

namespace steerkit {

struct ContrastivePair {
    std::vector<int> positive;
    std::vector<int> negative;
};

struct ContrastivePairSet {
    std::vector<ContrastivePair> pairs;
    int layer = 1;
    PositionSelector positions = PositionSelector::final_token();

    void validate(const EngineConfig& engine) const;
};

struct PairActivations {
    std::vector<Tensor> plus;
    std::vector<Tensor> minus;
};

// One hidden state per side of every pair. When the selector picks several
// positions their states are averaged.
PairActivations collect_pair_activations(std::shared_ptr<const ModelBundle> bundle, const ContrastivePairSet& data);

// mean(plus) - mean(minus), unnormalised.
SteeringVector extract_caa(std::span<const Tensor> plus, std::span<const Tensor> minus, int layer = 0);

struct PcaDiagnostics {
    std::vector<Tensor> centroids;  // per-pair midpoints (center variant only)
    double proj_plus = 0.0;         // after alignment
    double proj_minus = 0.0;
    bool flipped = false;
    double explained_variance_ratio = 0.0;
};

struct PcaResult {
    SteeringVector vector;
    PcaDiagnostics diagnostics;
};

PcaResult extract_pca_center(std::span<const Tensor> plus, std::span<const Tensor> minus, int layer = 0);
PcaResult extract_pca_diff(std::span<const Tensor> plus, std::span<const Tensor> minus, int layer = 0);

// Leading eigenpair of a symmetric matrix given row-major in double precision.
// Jacobi rotations up to d = 64, power iteration beyond.
struct Eigenpair {
    std::vector<double> vector;
    double value = 0.0;
    double trace = 0.0;
};
Eigenpair leading_eigenpair(const std::vector<double>& sym, std::size_t d);

struct LabeledActivation {
    Tensor h;
    int label = 0;
};

struct ProbeOptions {
    double l2_lambda = 1e-3;
    int max_steps = 2000;
    double learning_rate = 0.1;
    double tolerance = 1e-7;
};

struct ProbeResult {
    SteeringVector vector;  // w / |w|
    Tensor weights;         // raw w
    double accuracy = 0.0;
    double final_loss = 0.0;
    int steps = 0;
};

// Logistic regression without bias, full-batch gradient descent from w = 0.
ProbeResult train_linear_probe(std::span<const LabeledActivation> data, const ProbeOptions& options = {},
                               int layer = 0);

struct SaeWeights {
    Tensor w_enc;  // [n x d]
    Tensor b_enc;  // [n]
    Tensor w_dec;  // [d x n]
    Tensor b_dec;  // [d]
    std::vector<std::string> feature_labels;

    int input_dim() const { return static_cast<int>(w_enc.dim(1)); }
    int num_features() const { return static_cast<int>(w_enc.dim(0)); }
    void validate() const;
};

Tensor sae_encode(const SaeWeights& sae, const Tensor& h);
Tensor sae_decode(const SaeWeights& sae, const Tensor& f);
SteeringVector sae_extract_feature_vector(const SaeWeights& sae, int k, int layer = 0);

struct LabelMatch {
    int index = 0;
    std::string label;
    double score = 0.0;
};

// Case-insensitive word overlap between the query and each label.
std::vector<LabelMatch> sae_search_labels(const SaeWeights& sae, std::string_view query, int top_m);

struct SaeTrainOptions {
    int num_features = 0;  // 0 means 4d
    double l1 = 1e-3;
    float learning_rate = 0.05f;
    int steps = 300;
    std::uint64_t seed = 0;
};

// Small SAE fitted by gradient descent on reconstruction error plus an L1
// penalty on activations. Labels default to "feature <k>".
SaeWeights train_sae(std::span<const Tensor> activations, const SaeTrainOptions& options = {});

}  // namespace steerkit
