#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "steerkit/fixtures.hpp"
#include "steerkit/persistence.hpp"
#include "test_util.hpp"

using namespace steerkit;
using namespace steerkit::fixtures;

TEST(Fixtures, CorpusStylesCarryTheirMarker) {
    const StyleCorpus c = make_style_corpus(20, 3, 1);
    ASSERT_EQ(c.style_a.size(), 20u);
    for (const auto& p : c.style_a) {
        EXPECT_EQ(std::count(p.begin(), p.end(), '!'), 3) << p;
        EXPECT_EQ(p.find('?'), std::string::npos) << p;
    }
    for (const auto& p : c.style_b) {
        EXPECT_EQ(std::count(p.begin(), p.end(), '?'), 3) << p;
        EXPECT_EQ(p.find('!'), std::string::npos) << p;
    }
    EXPECT_EQ(make_style_corpus(20, 3, 1).style_a, c.style_a);
}

TEST(Fixtures, PairsShareFramesAndDifferInStyle) {
    const auto pairs = style_pairs(10, 4);
    ASSERT_EQ(pairs.pairs.size(), 10u);
    for (const auto& p : pairs.pairs) {
        const std::string a = byte_detokenize(p.positive), b = byte_detokenize(p.negative);
        EXPECT_EQ(a.substr(0, a.find(' ', a.find(' ') + 1)), b.substr(0, b.find(' ', b.find(' ') + 1)));
        EXPECT_NE(a.find('!'), std::string::npos);
        EXPECT_NE(b.find('?'), std::string::npos);
    }
}

TEST(Fixtures, PretrainingLowersLoss) {
    const auto corpus = make_style_corpus(10, 1, 2);
    std::vector<double> losses;
    PretrainConfig cfg;
    cfg.steps = 15;
    cfg.batch_size = 4;
    cfg.learning_rate = 1e-2f;
    const EngineConfig engine = testutil::small_config(1, 16, 2, 256);
    const auto bundle = pretrain(engine, corpus.style_a, cfg, [&](int, double l) { losses.push_back(l); });
    ASSERT_EQ(losses.size(), 15u);
    EXPECT_LT(losses.back(), losses.front() * 0.8);
    EXPECT_NE(weights_fingerprint(bundle), weights_fingerprint(ModelBundle::random(engine, cfg.seed)));
}

TEST(Fixtures, StyleSaeHasStyleDirectionAndUnitColumns) {
    auto bundle = testutil::random_bundle(testutil::small_config(2, 16, 2, 256), 9);
    const SaeWeights sae = style_sae(bundle, 1, 32, 5);
    sae.validate();
    ASSERT_EQ(sae.num_features(), 32);
    for (int k = 0; k < 32; ++k) {
        double norm = 0.0;
        for (int j = 0; j < 16; ++j) norm += double(sae.w_dec.at(j, k)) * sae.w_dec.at(j, k);
        EXPECT_NEAR(std::sqrt(norm), 1.0, 1e-5);
        for (int j = 0; j < 16; ++j) EXPECT_EQ(sae.w_enc.at(k, j), sae.w_dec.at(j, k));
    }
    for (int j = 0; j < 16; ++j) EXPECT_EQ(sae.w_dec.at(j, 1), -sae.w_dec.at(j, 0));
    EXPECT_EQ(sae_search_labels(sae, "cheerful", 1).front().index, 0);
}
