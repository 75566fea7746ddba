#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "learning_oracle.hpp"
#include "steerkit/error.hpp"
#include "steerkit/learning.hpp"
#include "test_util.hpp"

using namespace steerkit;
using testutil::random_tokens;
using testutil::random_values;
using testutil::small_config;

using namespace oracle;

TEST(TrainConfig, Validation) {
    auto engine = small_config();
    TrainConfig cfg;
    EXPECT_NO_THROW(cfg.validate(engine));
    auto expect_field = [&](TrainConfig c, const std::string& field) {
        try {
            c.validate(engine);
            ADD_FAILURE() << "no error for " << field;
        } catch (const Error& e) {
            EXPECT_EQ(e.kind(), ErrorKind::Validation);
            EXPECT_EQ(e.field(), field);
        }
    };
    auto c = cfg;
    c.method = "lora";
    expect_field(c, "method");
    c = cfg;
    c.target_layer = 3;
    expect_field(c, "target_layer");
    c = cfg;
    c.method = "lmsteer";
    expect_field(c, "target_layer");
    c.target_layer = engine.num_layers;
    EXPECT_NO_THROW(c.validate(engine));
    c = cfg;
    c.method = "loreft";
    c.rank = 0;
    expect_field(c, "rank");
    c.rank = engine.hidden_dim + 1;
    expect_field(c, "rank");
    c = cfg;
    c.learning_rate = -1;
    expect_field(c, "learning_rate");
    c = cfg;
    c.max_steps = -1;
    expect_field(c, "max_steps");
}

TEST(InitParams, IdentityOrthonormalDeterministic) {
    TrainConfig cfg;
    cfg.method = "loreft";
    cfg.rank = 5;
    auto p = std::get<LoreftParams>(init_params(cfg, 16, 9));
    auto rrt = ops::matmul(p.projection, ops::transpose(p.projection));
    EXPECT_LE(max_abs_diff(rrt, Tensor::identity(5)), 1e-5f);
    auto again = std::get<LoreftParams>(init_params(cfg, 16, 9));
    EXPECT_TRUE(bit_equal(p.projection, again.projection));
    EXPECT_TRUE(bit_equal(p.weight, again.weight));
    std::mt19937_64 rng(1);
    auto h = Tensor::vector(random_values(rng, 16));
    EXPECT_TRUE(bit_equal(apply_loreft(h, p), h));
    cfg.method = "sav";
    EXPECT_TRUE(bit_equal(std::get<SavParams>(init_params(cfg, 16, 0)).bias, Tensor::zeros({16})));
    cfg.method = "lmsteer";
    EXPECT_TRUE(bit_equal(std::get<LmSteerParams>(init_params(cfg, 16, 0)).weight, Tensor::zeros({16, 16})));
}

TEST(SteeringLoss, IdentityEqualsUnsteeredExactly) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 3);
    auto data = constant_shift_task(engine.vocab_size, 7, 6, 3);
    auto prefs = preference_task(engine.vocab_size, 4, 4);
    for (const char* method : {"sav", "lmsteer", "loreft"}) {
        TrainConfig cfg;
        cfg.method = method;
        cfg.rank = 4;
        cfg.target_layer = std::string(method) == "lmsteer" ? engine.num_layers : 1;
        auto params = init_params(cfg, engine.hidden_dim, 1);
        for (auto objective : {Objective::next_token_cross_entropy, Objective::contrastive_preference}) {
            const auto& batch = objective == Objective::contrastive_preference ? prefs : data;
            ad::GradTape tape;
            auto loss = steering_loss(tape, bundle, params, cfg.target_layer, batch, objective);
            EXPECT_EQ(loss.loss.value().item(), static_cast<float>(unsteered_loss(bundle, batch, objective)))
                << method << " " << to_string(objective);
        }
    }
}

TEST(SteeringLoss, UniformModelGivesLogVocab) {
    auto engine = small_config();
    auto random = ModelBundle::random(engine, 1);
    std::map<std::string, Tensor> w(random.weights().begin(), random.weights().end());
    w["unembed"] = Tensor::zeros(w["unembed"].shape());
    ModelBundle uniform(engine, w);
    auto data = constant_shift_task(engine.vocab_size, 3, 5, 1);
    EXPECT_NEAR(unsteered_loss(uniform, data, Objective::next_token_cross_entropy), std::log(32.0), 1e-5);
}

TEST(SteeringLoss, IdenticalContinuationsGiveLn2) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 2);
    TaskDataset data;
    data.preference_pairs.push_back({{1, 2, 3}, {4, 5}, {4, 5}});
    data.preference_pairs.push_back({{6}, {7}, {7}});
    ad::GradTape tape;
    SavParams p{Tensor::vector(std::vector<float>(16, 0.3f))};
    auto loss = steering_loss(tape, bundle, p, 1, data, Objective::contrastive_preference);
    EXPECT_NEAR(loss.loss.value().item(), std::log(2.0), 1e-6);
}

TEST(SteeringLoss, ErrorsAndFrozenWeights) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 2);
    ad::GradTape tape;
    SavParams p{Tensor::zeros({16})};
    try {
        steering_loss(tape, bundle, p, 1, TaskDataset{}, Objective::next_token_cross_entropy);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Domain);
    }
    auto data = constant_shift_task(engine.vocab_size, 3, 2, 1);
    auto loss = steering_loss(tape, bundle, p, 1, data, Objective::next_token_cross_entropy);
    auto grads = tape.backward(loss.loss);
    EXPECT_EQ(grads.size(), 1u);
    EXPECT_EQ(tape.parameters().size(), 1u);
}

// Reverse-mode gradients against central differences of an independent
// double-precision model.
TEST(SteeringLoss, GradientsMatchFiniteDifferences) {
    auto engine = small_config(2, 16, 2, 32);
    for (const std::string method : {"sav", "lmsteer", "loreft"}) {
        for (int seed = 0; seed < 5; ++seed) {
            auto bundle = ModelBundle::random(engine, 50 + seed);
            std::mt19937_64 rng(seed);
            auto params = random_params(method, engine.hidden_dim, rng);
            const int layer = method == "lmsteer" ? 2 : 1;
            const bool pref = seed % 2 == 1;
            auto data = pref ? preference_task(engine.vocab_size, 2, seed)
                             : constant_shift_task(engine.vocab_size, 5, 3, seed);
            const auto objective = pref ? Objective::contrastive_preference : Objective::next_token_cross_entropy;
            ad::GradTape tape;
            auto loss = steering_loss(tape, bundle, params, layer, data, objective);
            EXPECT_NEAR(loss.loss.value().item(), reference_loss(bundle, params, layer, data, objective), 1e-4);
            auto grads = tape.backward(loss.loss);
            auto tensors = param_tensors(params);
            auto oracle = ad::finite_diff_oracle(
                [&](std::span<const Tensor> p) {
                    return reference_loss(bundle, with_tensors(params, p), layer, data, objective);
                },
                tensors, 1e-3);
            for (std::size_t i = 0; i < tensors.size(); ++i)
                EXPECT_LE(rel_error(grads[loss.params[i]], oracle[i]), 1e-3) << method << " seed " << seed << " param " << i;
        }
    }
}

TEST(Train, SavHalvesLossOnConstantShiftTask) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 7);
    const auto hash = weights_fingerprint(bundle);
    auto data = constant_shift_task(engine.vocab_size, 11, 16, 7);
    TrainConfig cfg;
    cfg.method = "sav";
    cfg.target_layer = 1;
    cfg.learning_rate = 0.5f;
    cfg.max_steps = 300;
    auto result = train_steering(bundle, cfg, data);
    ASSERT_FALSE(result.loss_history.empty());
    EXPECT_NEAR(result.loss_history.front(), unsteered_loss(bundle, data, cfg.objective), 1e-6);
    EXPECT_LE(result.loss_history.back(), 0.5 * result.loss_history.front());
    EXPECT_EQ(weights_fingerprint(bundle), hash);
    EXPECT_EQ(result.loss_history.size(), static_cast<std::size_t>(result.steps + 1));
}

TEST(Train, ZeroLearningRateKeepsLossConstant) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 8);
    auto data = constant_shift_task(engine.vocab_size, 4, 4, 8);
    for (const char* method : {"sav", "loreft"}) {
        TrainConfig cfg;
        cfg.method = method;
        cfg.rank = 3;
        cfg.learning_rate = 0.0f;
        cfg.max_steps = 60;
        auto result = train_steering(bundle, cfg, data);
        for (double l : result.loss_history) EXPECT_EQ(l, result.loss_history.front());
        EXPECT_TRUE(result.early_stopped);
        EXPECT_EQ(result.loss_history.size(), 51u);
    }
}

TEST(Train, IdentityStartForAllMethods) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 9);
    auto data = constant_shift_task(engine.vocab_size, 4, 4, 9);
    const double base = unsteered_loss(bundle, data, Objective::next_token_cross_entropy);
    for (const char* method : {"sav", "lmsteer", "loreft"}) {
        TrainConfig cfg;
        cfg.method = method;
        cfg.rank = 4;
        cfg.target_layer = std::string(method) == "lmsteer" ? engine.num_layers : 1;
        cfg.max_steps = 3;
        auto result = train_steering(bundle, cfg, data);
        EXPECT_NEAR(result.loss_history.front(), base, 1e-6) << method;
        EXPECT_EQ(result.loss_history.size(), 4u);
    }
}

TEST(Train, DeterministicWithMiniBatches) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 10);
    auto data = constant_shift_task(engine.vocab_size, 4, 10, 10);
    TrainConfig cfg;
    cfg.batch_size = 3;
    cfg.max_steps = 20;
    cfg.seed = 5;
    auto a = train_steering(bundle, cfg, data);
    auto b = train_steering(bundle, cfg, data);
    EXPECT_EQ(a.loss_history, b.loss_history);
    EXPECT_TRUE(bit_equal(std::get<SavParams>(a.params).bias, std::get<SavParams>(b.params).bias));
}

TEST(Train, MonotoneWindowsAtSmallLearningRate) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 11);
    auto data = constant_shift_task(engine.vocab_size, 9, 8, 11);
    TrainConfig cfg;
    cfg.learning_rate = 0.01f;
    cfg.max_steps = 200;
    auto result = train_steering(bundle, cfg, data);
    const auto& h = result.loss_history;
    for (std::size_t t = 50; t < h.size(); ++t) EXPECT_LE(h[t], h[t - 50]) << t;
}

TEST(Train, DivergenceReportsStep) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 12);
    auto data = constant_shift_task(engine.vocab_size, 9, 4, 12);
    TrainConfig cfg;
    cfg.learning_rate = std::numeric_limits<float>::max();
    cfg.max_steps = 50;
    try {
        train_steering(bundle, cfg, data);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::Divergence);
        EXPECT_NE(std::string(e.what()).find("step"), std::string::npos);
    }
}

TEST(Train, TriggerRestrictsTrainingPositions) {
    auto engine = small_config();
    auto bundle = ModelBundle::random(engine, 13);
    auto data = constant_shift_task(engine.vocab_size, 9, 4, 13);
    ad::GradTape tape;
    SavParams p{Tensor::vector(std::vector<float>(16, 1.0f))};
    TriggerSpec never;
    never.token_ids = std::set<int>{};
    auto loss = steering_loss(tape, bundle, p, 1, data, Objective::next_token_cross_entropy, never);
    EXPECT_EQ(loss.loss.value().item(), static_cast<float>(unsteered_loss(bundle, data, Objective::next_token_cross_entropy)));
}

TEST(LearnedVector, CarriesMethodAndLayer) {
    TrainConfig cfg;
    cfg.method = "loreft";
    cfg.rank = 2;
    cfg.target_layer = 2;
    auto v = make_learned_vector("reft", cfg, init_params(cfg, 16, 0));
    EXPECT_EQ(v.method_id, "loreft");
    EXPECT_EQ(v.source_layer, 2);
    EXPECT_TRUE(v.is_learned());
    EXPECT_EQ(v.dim(), 16);
}
