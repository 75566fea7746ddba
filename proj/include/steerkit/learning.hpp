#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "steerkit/autodiff.hpp"
#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"

namespace steerkit {

enum class Objective { next_token_cross_entropy, contrastive_preference };

std::string_view to_string(Objective objective);

struct IoPair {
    std::vector<int> prompt;
    std::vector<int> target;
};

struct PreferencePair {
    std::vector<int> prompt;
    std::vector<int> preferred;
    std::vector<int> dispreferred;
};

// Holds exactly one of the two record kinds.
struct TaskDataset {
    std::vector<IoPair> io_pairs;
    std::vector<PreferencePair> preference_pairs;

    bool is_preference() const { return !preference_pairs.empty(); }
    std::size_t size() const { return io_pairs.size() + preference_pairs.size(); }
    TaskDataset subset(std::span<const std::size_t> indices) const;
    void validate(int vocab_size) const;
};

struct TrainConfig {
    std::string method = "sav";  // sav | lmsteer | loreft
    int target_layer = 1;
    int rank = 1;          // loreft only
    float epsilon = 1.0f;  // lmsteer only
    float learning_rate = 0.1f;
    int max_steps = 100;
    int batch_size = 0;  // 0 means full batch
    std::uint64_t seed = 0;
    Objective objective = Objective::next_token_cross_entropy;
    // Positions at which the intervention is applied while training; all by default.
    TriggerSpec trigger;

    void validate(const EngineConfig& engine) const;
};

// Identity steering: sav b = 0; lmsteer W = 0; loreft R with seeded random
// orthonormal rows, W = R, b = 0.
LearnedSteeringParams init_params(const TrainConfig& cfg, int hidden_dim, std::uint64_t seed);

// Trainable tensors in a fixed order: sav {b}; lmsteer {W}; loreft {R, W, b}.
std::vector<Tensor> param_tensors(const LearnedSteeringParams& params);
LearnedSteeringParams with_tensors(const LearnedSteeringParams& like, std::span<const Tensor> tensors);

struct SteeringLoss {
    ad::Var loss;
    std::vector<ad::Var> params;  // same order as param_tensors
};

// Records the steered loss on `tape`. Activations up to target_layer come
// from the inference engine as constants; the intervention and every later
// layer are differentiated. Only the steering parameters are trainable.
SteeringLoss steering_loss(ad::GradTape& tape, const ModelBundle& bundle, const LearnedSteeringParams& params,
                           int target_layer, const TaskDataset& batch, Objective objective,
                           const TriggerSpec& trigger = {});

// The same objective through the whole frozen model with no intervention.
double unsteered_loss(const ModelBundle& bundle, const TaskDataset& batch, Objective objective);

struct TrainResult {
    LearnedSteeringParams params;
    std::vector<double> loss_history;  // entry 0 is the loss at initialisation
    int steps = 0;
    bool early_stopped = false;
};

using TrainProgress = std::function<void(int step, double loss)>;

TrainResult train_steering(const ModelBundle& bundle, const TrainConfig& cfg, const TaskDataset& data,
                           const TrainProgress& progress = {});

SteeringVector make_learned_vector(std::string name, const TrainConfig& cfg, LearnedSteeringParams params);

}  // namespace steerkit
