#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "steerkit/extraction.hpp"
#include "steerkit/model.hpp"

// Demo material: a two-style toy corpus, a model pretrained on it, a labelled
// SAE over its residual stream and matching TSV datasets.
namespace steerkit::fixtures {

// Style A sentences use cheerful adjectives and end in '!', style B uses
// gloomy adjectives and ends in '?'. Both share subjects and verbs.
inline constexpr int kMarkerA = '!';
inline constexpr int kMarkerB = '?';

struct StyleCorpus {
    std::vector<std::string> style_a;
    std::vector<std::string> style_b;
};

// `per_style` passages of `sentences` sentences each.
StyleCorpus make_style_corpus(int per_style, int sentences, std::uint64_t seed);

// Prompts that end right before an adjective, e.g. "my cat is ".
std::vector<std::string> neutral_prompts();

struct PretrainConfig {
    int steps = 300;
    int batch_size = 16;
    float learning_rate = 3e-3f;
    std::uint64_t seed = 7;
};

using PretrainProgress = std::function<void(int step, double loss)>;

// Next-token cross-entropy with Adam over every model weight.
ModelBundle pretrain(const EngineConfig& config, const std::vector<std::string>& passages, const PretrainConfig& cfg,
                     const PretrainProgress& progress = {});

// Pairs (style A passage, style B passage) built from the same subjects.
ContrastivePairSet style_pairs(int count, std::uint64_t seed);

// Unit decoder columns: the normalised style direction (A minus B) at
// `layer`, its negation, then seeded random unit directions.
SaeWeights style_sae(const std::shared_ptr<const ModelBundle>& bundle, int layer, int num_features,
                     std::uint64_t seed);

struct FixturePaths {
    std::filesystem::path model;
    std::filesystem::path sae;
    std::filesystem::path datasets_dir;
    std::filesystem::path vectors_dir;
};

FixturePaths fixture_paths(const std::filesystem::path& root);

// Writes model.stwt, sae.stwt, data/*.tsv and an empty vectors/ under root.
FixturePaths write_fixtures(const std::filesystem::path& root, const PretrainConfig& cfg,
                            const PretrainProgress& progress = {});

}  // namespace steerkit::fixtures
