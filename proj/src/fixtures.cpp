#include "steerkit/fixtures.hpp"

#include <fmt/format.h>

#include <cmath>
#include <fstream>
#include <random>

#include "steerkit/error.hpp"
#include "steerkit/persistence.hpp"
#include "steerkit/tape_model.hpp"

namespace steerkit::fixtures {

namespace fs = std::filesystem;

namespace {

const std::vector<std::string> kSubjects = {"my cat", "the day", "this song", "our team", "the sea", "her room",
                                            "the film", "his plan"};
const std::vector<std::string> kVerbs = {"is", "was", "looks", "feels"};
const std::vector<std::string> kCheerful = {"happy", "bright", "sunny", "warm", "glad", "lovely"};
const std::vector<std::string> kGloomy = {"sad", "dark", "rainy", "cold", "grim", "dull"};

template <class T>
const T& pick(const std::vector<T>& from, std::mt19937_64& rng) {
    return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
}

struct Frame {
    std::string subject, verb;
    std::size_t adjective;
};

std::vector<Frame> frames(int sentences, std::mt19937_64& rng) {
    std::vector<Frame> out;
    for (int i = 0; i < sentences; ++i)
        out.push_back({pick(kSubjects, rng), pick(kVerbs, rng),
                       std::uniform_int_distribution<std::size_t>(0, kCheerful.size() - 1)(rng)});
    return out;
}

std::string render(const std::vector<Frame>& fs, bool cheerful) {
    std::string text;
    for (const auto& f : fs) {
        if (!text.empty()) text += ' ';
        text += fmt::format("{} {} {}{}", f.subject, f.verb, cheerful ? kCheerful[f.adjective] : kGloomy[f.adjective],
                            static_cast<char>(cheerful ? kMarkerA : kMarkerB));
    }
    return text;
}

void write_lines(const fs::path& path, const std::vector<std::string>& lines) {
    std::string text;
    for (const auto& l : lines) text += l + '\n';
    write_text_file_atomic(path, text);
}

Tensor unit(std::vector<float> v) {
    double norm = 0.0;
    for (float x : v) norm += double(x) * x;
    norm = std::sqrt(norm);
    if (norm == 0.0) fail(ErrorKind::Domain, "cannot normalise a zero vector");
    for (float& x : v) x = static_cast<float>(x / norm);
    return Tensor::vector(std::move(v));
}

}  // namespace

StyleCorpus make_style_corpus(int per_style, int sentences, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    StyleCorpus corpus;
    for (int i = 0; i < per_style; ++i) {
        corpus.style_a.push_back(render(frames(sentences, rng), true));
        corpus.style_b.push_back(render(frames(sentences, rng), false));
    }
    return corpus;
}

std::vector<std::string> neutral_prompts() {
    std::vector<std::string> out;
    for (const auto& s : kSubjects) out.push_back(s + " is ");
    return out;
}

ModelBundle pretrain(const EngineConfig& config, const std::vector<std::string>& passages, const PretrainConfig& cfg,
                     const PretrainProgress& progress) {
    if (passages.empty()) fail(ErrorKind::Domain, "pretraining needs at least one passage");
    if (cfg.steps < 0 || cfg.batch_size < 1) fail(ErrorKind::Validation, "invalid pretraining configuration");

    std::vector<std::vector<int>> sequences;
    for (const auto& p : passages) {
        auto t = byte_tokenize(p);
        t.push_back(kEosToken);
        if (static_cast<int>(t.size()) > config.max_seq_len)
            fail(ErrorKind::Domain, fmt::format("passage of {} tokens exceeds max_seq_len", t.size()));
        sequences.push_back(std::move(t));
    }

    ModelBundle bundle = ModelBundle::random(config, cfg.seed);
    std::map<std::string, std::vector<float>> m, v;
    for (const auto& [name, w] : bundle.weights()) {
        m[name].assign(w.size(), 0.0f);
        v[name].assign(w.size(), 0.0f);
    }
    constexpr double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::mt19937_64 rng(cfg.seed ^ 0xA5A5A5A5ull);
    std::uniform_int_distribution<std::size_t> any(0, sequences.size() - 1);

    for (int step = 1; step <= cfg.steps; ++step) {
        ad::GradTape tape;
        TapeModel model(tape, bundle, true);
        std::vector<ad::Var> picked;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& seq = sequences[any(rng)];
            const std::span<const int> inputs(seq.data(), seq.size() - 1);
            std::vector<std::pair<std::size_t, std::size_t>> targets;
            for (std::size_t i = 0; i + 1 < seq.size(); ++i) targets.emplace_back(i, seq[i + 1]);
            auto x = model.layers(model.embed(inputs), 1, config.num_layers);
            picked.push_back(tape.pick(tape.log_softmax(model.logits(x)), std::move(targets)));
        }
        const ad::Var loss = tape.scale(tape.mean(tape.concat(picked, 0)), -1.0f);
        const double value = loss.value().item();
        if (progress) progress(step, value);
        const ad::Gradients grads = tape.backward(loss);

        const double c1 = 1.0 - std::pow(beta1, step), c2 = 1.0 - std::pow(beta2, step);
        std::map<std::string, Tensor> next;
        for (const auto& [name, var] : model.weights()) {
            const auto g = grads[var].values();
            auto w = bundle.weight(name).to_vector();
            auto& mm = m[name];
            auto& vv = v[name];
            for (std::size_t j = 0; j < w.size(); ++j) {
                mm[j] = static_cast<float>(beta1 * mm[j] + (1.0 - beta1) * g[j]);
                vv[j] = static_cast<float>(beta2 * vv[j] + (1.0 - beta2) * double(g[j]) * g[j]);
                w[j] -= static_cast<float>(cfg.learning_rate * (mm[j] / c1) / (std::sqrt(vv[j] / c2) + eps));
            }
            next.emplace(name, Tensor(bundle.weight(name).shape(), std::move(w)));
        }
        bundle = ModelBundle(config, std::move(next));
    }
    return bundle;
}

ContrastivePairSet style_pairs(int count, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    ContrastivePairSet set;
    for (int i = 0; i < count; ++i) {
        const auto f = frames(2, rng);
        set.pairs.push_back({byte_tokenize(render(f, true)), byte_tokenize(render(f, false))});
    }
    return set;
}

SaeWeights style_sae(const std::shared_ptr<const ModelBundle>& bundle, int layer, int num_features,
                     std::uint64_t seed) {
    const int d = bundle->config().hidden_dim;
    if (num_features < 2) fail(ErrorKind::Domain, "the style SAE needs at least two features");
    ContrastivePairSet pairs = style_pairs(32, seed);
    pairs.layer = layer;
    const PairActivations acts = collect_pair_activations(bundle, pairs);
    const Tensor style = unit(extract_caa(acts.plus, acts.minus, layer).direction().to_vector());

    std::vector<Tensor> columns = {style};
    std::vector<float> neg(style.values().begin(), style.values().end());
    for (float& x : neg) x = -x;
    columns.push_back(Tensor::vector(neg));
    std::mt19937_64 rng(seed + 1);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    while (static_cast<int>(columns.size()) < num_features) {
        std::vector<float> r(d);
        for (float& x : r) x = normal(rng);
        columns.push_back(unit(std::move(r)));
    }

    std::vector<float> enc(std::size_t(num_features) * d), dec(std::size_t(d) * num_features);
    for (int k = 0; k < num_features; ++k)
        for (int i = 0; i < d; ++i) {
            enc[std::size_t(k) * d + i] = columns[k][i];
            dec[std::size_t(i) * num_features + k] = columns[k][i];
        }
    SaeWeights sae{Tensor::matrix(num_features, d, std::move(enc)), Tensor::zeros({std::size_t(num_features)}),
                   Tensor::matrix(d, num_features, std::move(dec)), Tensor::zeros({std::size_t(d)}), {}};
    sae.feature_labels = {"cheerful exclamation style", "gloomy question style"};
    for (int k = 2; k < num_features; ++k) sae.feature_labels.push_back(fmt::format("unlabelled feature {}", k));
    sae.validate();
    return sae;
}

FixturePaths fixture_paths(const fs::path& root) {
    return {root / "model.stwt", root / "sae.stwt", root / "data", root / "vectors"};
}

FixturePaths write_fixtures(const fs::path& root, const PretrainConfig& cfg, const PretrainProgress& progress) {
    const FixturePaths paths = fixture_paths(root);
    fs::create_directories(paths.datasets_dir);
    fs::create_directories(paths.vectors_dir);

    const StyleCorpus corpus = make_style_corpus(200, 3, cfg.seed);
    std::vector<std::string> passages = corpus.style_a;
    passages.insert(passages.end(), corpus.style_b.begin(), corpus.style_b.end());
    auto bundle = std::make_shared<const ModelBundle>(pretrain(EngineConfig{}, passages, cfg, progress));
    save_model(paths.model, *bundle);

    const int mid = (bundle->config().num_layers + 1) / 2;
    save_sae(paths.sae, style_sae(bundle, mid, 2 * bundle->config().hidden_dim, cfg.seed));

    std::vector<std::string> contrastive;
    for (const auto& p : style_pairs(24, cfg.seed + 2).pairs)
        contrastive.push_back(byte_detokenize(p.positive) + '\t' + byte_detokenize(p.negative));
    write_lines(paths.datasets_dir / "styles.tsv", contrastive);

    std::vector<std::string> io, prefs;
    std::mt19937_64 rng(cfg.seed + 3);
    for (const auto& prompt : neutral_prompts()) {
        const std::size_t k = std::uniform_int_distribution<std::size_t>(0, kCheerful.size() - 1)(rng);
        io.push_back(fmt::format("{}\t{}!", prompt, kCheerful[k]));
        prefs.push_back(fmt::format("{}\t{}!\t{}?", prompt, kCheerful[k], kGloomy[k]));
    }
    write_lines(paths.datasets_dir / "cheerful.tsv", io);
    write_lines(paths.datasets_dir / "cheerful_prefs.tsv", prefs);
    return paths;
}

}  // namespace steerkit::fixtures
