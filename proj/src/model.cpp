#include "steerkit/model.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>

#include "kernels.hpp"
#include "steerkit/error.hpp"

namespace steerkit {

void EngineConfig::validate() const {
    if (num_layers < 1) fail(ErrorKind::Config, fmt::format("num_layers must be >= 1, got {}", num_layers));
    if (hidden_dim < 1) fail(ErrorKind::Config, fmt::format("hidden_dim must be >= 1, got {}", hidden_dim));
    if (num_heads < 1 || hidden_dim % num_heads != 0) {
        fail(ErrorKind::Config,
             fmt::format("num_heads {} must be positive and divide hidden_dim {}", num_heads, hidden_dim));
    }
    if (vocab_size < 2) fail(ErrorKind::Config, fmt::format("vocab_size must be >= 2, got {}", vocab_size));
    if (max_seq_len < 1) fail(ErrorKind::Config, fmt::format("max_seq_len must be >= 1, got {}", max_seq_len));
}

std::string layer_weight_name(int layer, std::string_view leaf) {
    return fmt::format("layers.{}.{}", layer, leaf);
}

std::vector<std::pair<std::string, Shape>> expected_weight_shapes(const EngineConfig& cfg) {
    const auto d = static_cast<std::size_t>(cfg.hidden_dim);
    const auto f = static_cast<std::size_t>(cfg.mlp_dim());
    const auto v = static_cast<std::size_t>(cfg.vocab_size);
    std::vector<std::pair<std::string, Shape>> out{
        {"tok_emb", {v, d}},
        {"pos_emb", {static_cast<std::size_t>(cfg.max_seq_len), d}},
    };
    for (int l = 1; l <= cfg.num_layers; ++l) {
        for (auto leaf : {"ln1.weight", "ln1.bias"}) out.emplace_back(layer_weight_name(l, leaf), Shape{d});
        for (auto leaf : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            out.emplace_back(layer_weight_name(l, leaf), Shape{d, d});
        for (auto leaf : {"attn.bq", "attn.bk", "attn.bv", "attn.bo"})
            out.emplace_back(layer_weight_name(l, leaf), Shape{d});
        for (auto leaf : {"ln2.weight", "ln2.bias"}) out.emplace_back(layer_weight_name(l, leaf), Shape{d});
        out.emplace_back(layer_weight_name(l, "mlp.w1"), Shape{d, f});
        out.emplace_back(layer_weight_name(l, "mlp.b1"), Shape{f});
        out.emplace_back(layer_weight_name(l, "mlp.w2"), Shape{f, d});
        out.emplace_back(layer_weight_name(l, "mlp.b2"), Shape{d});
    }
    out.emplace_back("ln_f.weight", Shape{d});
    out.emplace_back("ln_f.bias", Shape{d});
    out.emplace_back("unembed", Shape{d, v});
    return out;
}

ModelBundle::ModelBundle(EngineConfig config, std::map<std::string, Tensor> weights)
    : config_(config), weights_(weights.begin(), weights.end()) {
    config_.validate();
    const auto expected = expected_weight_shapes(config_);
    for (const auto& [name, shape] : expected) {
        auto it = weights_.find(name);
        if (it == weights_.end()) fail(ErrorKind::Validation, fmt::format("model weight '{}' missing", name));
        if (it->second.shape() != shape) {
            fail(ErrorKind::Dimension, fmt::format("model weight '{}' has shape {}, expected {}", name,
                                                   shape_string(it->second.shape()), shape_string(shape)));
        }
    }
    if (weights_.size() != expected.size()) {
        for (const auto& [name, t] : weights_) {
            const bool known = std::any_of(expected.begin(), expected.end(),
                                           [&](const auto& e) { return e.first == name; });
            if (!known) fail(ErrorKind::Validation, fmt::format("unexpected model weight '{}'", name));
        }
    }
}

ModelBundle ModelBundle::random(const EngineConfig& config, std::uint64_t seed) {
    config.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<float> normal(0.0f, 1.0f);
    std::map<std::string, Tensor> weights;
    for (const auto& [name, shape] : expected_weight_shapes(config)) {
        const auto n = shape_size(shape);
        std::vector<float> v(n, 0.0f);
        const bool is_norm_gain = name.ends_with("ln1.weight") || name.ends_with("ln2.weight") ||
                                  name == "ln_f.weight";
        const bool is_bias = name.ends_with(".bias") || name.find(".b") != std::string::npos;
        if (is_norm_gain) {
            std::fill(v.begin(), v.end(), 1.0f);
        } else if (name == "tok_emb" || name == "pos_emb") {
            for (auto& x : v) x = 0.5f * normal(rng);
        } else if (!is_bias) {
            const float stdev = 1.0f / std::sqrt(static_cast<float>(shape[0]));
            for (auto& x : v) x = stdev * normal(rng);
        }
        weights.emplace(name, Tensor(shape, std::move(v)));
    }
    return ModelBundle(config, std::move(weights));
}

const Tensor& ModelBundle::weight(std::string_view name) const {
    auto it = weights_.find(name);
    if (it == weights_.end()) fail(ErrorKind::Lookup, fmt::format("no model weight named '{}'", name));
    return it->second;
}

const Tensor& ModelBundle::layer_weight(int layer, std::string_view leaf) const {
    return weight(layer_weight_name(layer, leaf));
}

std::uint64_t weights_fingerprint(const ModelBundle& bundle) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](const void* data, std::size_t n) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= p[i];
            h *= 1099511628211ull;
        }
    };
    for (const auto& [name, t] : bundle.weights()) {
        mix(name.data(), name.size());
        for (auto e : t.shape()) mix(&e, sizeof(e));
        mix(t.values().data(), t.size() * sizeof(float));
    }
    return h;
}

std::string_view to_string(Stage stage) { return stage == Stage::prefill ? "prefill" : "decode"; }

std::string_view to_string(FinishReason reason) {
    return reason == FinishReason::eos ? "eos" : "max_tokens";
}

std::size_t GenerationResult::total_tokens() const {
    std::size_t n = 0;
    for (const auto& s : sequences) n += s.token_ids.size();
    return n;
}

WrappedModel::WrappedModel(std::shared_ptr<const ModelBundle> bundle, InterceptionHook hook)
    : bundle_(std::move(bundle)), hook_(std::move(hook)) {
    if (!bundle_) fail(ErrorKind::Contract, "wrap_model: null bundle");
}

WrappedModel wrap_model(std::shared_ptr<const ModelBundle> bundle, InterceptionHook hook) {
    return WrappedModel(std::move(bundle), std::move(hook));
}

void WrappedModel::check_tokens(std::span<const int> tokens) const {
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (tokens[i] < 0 || tokens[i] >= config().vocab_size) {
            fail(ErrorKind::Domain, fmt::format("token id {} at index {} outside vocabulary [0, {})",
                                                tokens[i], i, config().vocab_size));
        }
    }
}

namespace {

void add_bias_rows(float* x, const float* bias, std::size_t rows, std::size_t d) {
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t i = 0; i < d; ++i) x[r * d + i] += bias[i];
}

}  // namespace

// Runs `tokens` (appended after whatever the cache already holds) through all
// layers and returns the logits of the last new row.
std::vector<float> WrappedModel::run_rows(SequenceCache& seq, std::span<const int> tokens, Stage stage,
                                          int batch_index) const {
    const auto& cfg = config();
    const auto& W = *bundle_;
    const std::size_t d = cfg.hidden_dim, m = tokens.size(), f = cfg.mlp_dim();
    const std::size_t heads = cfg.num_heads, dh = cfg.head_dim();
    const std::size_t pos0 = seq.tokens.size();
    if (pos0 + m > static_cast<std::size_t>(cfg.max_seq_len)) {
        fail(ErrorKind::Capacity, fmt::format("sequence {} would reach length {} beyond max_seq_len {}",
                                              batch_index, pos0 + m, cfg.max_seq_len));
    }
    if (seq.keys.empty()) {
        seq.keys.assign(cfg.num_layers, {});
        seq.values.assign(cfg.num_layers, {});
    }
    seq.tokens.insert(seq.tokens.end(), tokens.begin(), tokens.end());

    std::vector<float> x(m * d);
    const float* tok_emb = W.weight("tok_emb").values().data();
    const float* pos_emb = W.weight("pos_emb").values().data();
    for (std::size_t r = 0; r < m; ++r)
        for (std::size_t i = 0; i < d; ++i)
            x[r * d + i] = tok_emb[tokens[r] * d + i] + pos_emb[(pos0 + r) * d + i];

    std::vector<float> a(m * d), q(m * d), k(m * d), v(m * d), o(m * d), y(m * d);
    std::vector<float> hid(m * f), scores(pos0 + m);
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

    for (int l = 1; l <= cfg.num_layers; ++l) {
        auto p = [&](std::string_view leaf) { return W.layer_weight(l, leaf).values().data(); };
        for (std::size_t r = 0; r < m; ++r)
            kernels::layernorm_affine_row(&x[r * d], &a[r * d], p("ln1.weight"), p("ln1.bias"), d,
                                          ops::kLayerNormEps);
        kernels::matmul(a.data(), p("attn.wq"), q.data(), m, d, d);
        add_bias_rows(q.data(), p("attn.bq"), m, d);
        kernels::matmul(a.data(), p("attn.wk"), k.data(), m, d, d);
        add_bias_rows(k.data(), p("attn.bk"), m, d);
        kernels::matmul(a.data(), p("attn.wv"), v.data(), m, d, d);
        add_bias_rows(v.data(), p("attn.bv"), m, d);

        auto& kc = seq.keys[l - 1];
        auto& vc = seq.values[l - 1];
        kc.insert(kc.end(), k.begin(), k.end());
        vc.insert(vc.end(), v.begin(), v.end());

        for (std::size_t r = 0; r < m; ++r) {
            const std::size_t span = pos0 + r + 1;
            for (std::size_t h = 0; h < heads; ++h) {
                const float* qh = &q[r * d + h * dh];
                for (std::size_t j = 0; j < span; ++j)
                    scores[j] = kernels::dot(qh, &kc[j * d + h * dh], dh) * inv_sqrt;
                kernels::softmax_row(scores.data(), scores.data(), span);
                float* oh = &o[r * d + h * dh];
                std::fill(oh, oh + dh, 0.0f);
                for (std::size_t j = 0; j < span; ++j) {
                    const float pj = scores[j];
                    const float* vj = &vc[j * d + h * dh];
                    for (std::size_t t = 0; t < dh; ++t) oh[t] += pj * vj[t];
                }
            }
        }
        kernels::matmul(o.data(), p("attn.wo"), y.data(), m, d, d);
        add_bias_rows(y.data(), p("attn.bo"), m, d);
        for (std::size_t i = 0; i < m * d; ++i) x[i] = x[i] + y[i];

        for (std::size_t r = 0; r < m; ++r)
            kernels::layernorm_affine_row(&x[r * d], &a[r * d], p("ln2.weight"), p("ln2.bias"), d,
                                          ops::kLayerNormEps);
        kernels::matmul(a.data(), p("mlp.w1"), hid.data(), m, d, f);
        add_bias_rows(hid.data(), p("mlp.b1"), m, f);
        for (auto& h : hid) h = kernels::gelu(h);
        kernels::matmul(hid.data(), p("mlp.w2"), y.data(), m, f, d);
        add_bias_rows(y.data(), p("mlp.b2"), m, d);
        for (std::size_t i = 0; i < m * d; ++i) x[i] = x[i] + y[i];

        if (hook_) {
            for (std::size_t r = 0; r < m; ++r) {
                ForwardContext ctx;
                ctx.stage = stage;
                ctx.batch_index = batch_index;
                ctx.absolute_position = static_cast<int>(pos0 + r);
                ctx.token_id = tokens[r];
                ctx.generated_offset = stage == Stage::prefill ? -1 : seq.generated;
                ctx.history = std::span<const int>(seq.tokens).first(pos0 + r + 1);
                hook_(l, ctx, std::span<float>(&x[r * d], d));
            }
        }
    }

    std::vector<float> last(d);
    kernels::layernorm_affine_row(&x[(m - 1) * d], last.data(), W.weight("ln_f.weight").values().data(),
                                  W.weight("ln_f.bias").values().data(), d, ops::kLayerNormEps);
    std::vector<float> logits(cfg.vocab_size);
    kernels::matmul(last.data(), W.weight("unembed").values().data(), logits.data(), 1, d, cfg.vocab_size);
    return logits;
}

PrefillResult WrappedModel::prefill(const std::vector<std::vector<int>>& batch) const {
    if (batch.empty()) fail(ErrorKind::Domain, "prefill: empty batch");
    PrefillResult out;
    out.cache.sequences.resize(batch.size());
    for (std::size_t b = 0; b < batch.size(); ++b) {
        const auto& tokens = batch[b];
        if (tokens.empty()) fail(ErrorKind::Domain, fmt::format("prefill: sequence {} is empty", b));
        if (tokens.size() > static_cast<std::size_t>(config().max_seq_len)) {
            fail(ErrorKind::Capacity, fmt::format("prefill: sequence {} has {} tokens, max_seq_len is {}",
                                                  b, tokens.size(), config().max_seq_len));
        }
        check_tokens(tokens);
    }
    for (std::size_t b = 0; b < batch.size(); ++b) {
        auto& seq = out.cache.sequences[b];
        seq.prompt_length = static_cast<int>(batch[b].size());
        auto logits = run_rows(seq, batch[b], Stage::prefill, static_cast<int>(b));
        out.logits.push_back(Tensor::vector(std::move(logits)));
    }
    return out;
}

std::vector<Tensor> WrappedModel::decode_step(KVCache& cache, std::span<const int> last_tokens) const {
    if (cache.batch_size() != last_tokens.size()) {
        fail(ErrorKind::Contract, fmt::format("decode_step: cache holds {} sequences but {} tokens given",
                                              cache.batch_size(), last_tokens.size()));
    }
    check_tokens(last_tokens);
    std::vector<Tensor> out;
    out.reserve(last_tokens.size());
    for (std::size_t b = 0; b < last_tokens.size(); ++b) {
        auto& seq = cache.sequences[b];
        if (seq.tokens.empty()) fail(ErrorKind::Contract, fmt::format("decode_step: sequence {} was never prefilled", b));
        const int tok = last_tokens[b];
        auto logits = run_rows(seq, std::span<const int>(&tok, 1), Stage::decode, static_cast<int>(b));
        ++seq.generated;
        out.push_back(Tensor::vector(std::move(logits)));
    }
    return out;
}

namespace {

int choose_token(std::span<const float> logits, const Sampling& sampling, std::mt19937_64& rng) {
    if (sampling.mode == Sampling::Mode::greedy) {
        return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
    }
    const std::size_t k = std::min<std::size_t>(std::max(sampling.top_k, 1), logits.size());
    std::vector<int> idx(logits.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
        return logits[a] > logits[b] || (logits[a] == logits[b] && a < b);
    });
    std::vector<double> weights(k);
    for (std::size_t i = 0; i < k; ++i) weights[i] = std::exp(double(logits[idx[i]]) - double(logits[idx[0]]));
    // Inverse-CDF draw on a raw 64-bit sample keeps results independent of the
    // standard library's distribution implementations.
    const double u = static_cast<double>(rng() >> 11) * 0x1.0p-53;
    double total = 0.0;
    for (double w : weights) total += w;
    double acc = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
        acc += weights[i] / total;
        if (u < acc) return idx[i];
    }
    return idx[k - 1];
}

}  // namespace

GenerationResult WrappedModel::generate(const std::vector<std::vector<int>>& prompts,
                                        const GenerateOptions& options) const {
    if (options.max_new_tokens < 1) {
        fail(ErrorKind::Domain, fmt::format("max_new_tokens must be >= 1, got {}", options.max_new_tokens));
    }
    if (options.sampling.mode == Sampling::Mode::top_k && options.sampling.top_k < 1) {
        fail(ErrorKind::Domain, fmt::format("top_k must be >= 1, got {}", options.sampling.top_k));
    }
    GenerationResult result;
    result.start = Clock::now();
    auto pre = prefill(prompts);
    KVCache& cache = pre.cache;
    const std::size_t n = prompts.size();
    result.sequences.resize(n);

    std::vector<std::mt19937_64> rngs;
    for (std::size_t b = 0; b < n; ++b) rngs.emplace_back(options.sampling.seed + 0x9E3779B97F4A7C15ull * (b + 1));

    std::vector<bool> active(n, true);
    std::vector<int> last(n, 0);
    auto emit = [&](std::size_t b, const Tensor& logits) {
        auto& out = result.sequences[b];
        const int tok = choose_token(logits.values(), options.sampling, rngs[b]);
        const auto now = Clock::now();
        if (tok == kEosToken) {
            out.finish_reason = FinishReason::eos;
            active[b] = false;
            return;
        }
        out.token_ids.push_back(tok);
        out.timestamps.push_back(now);
        if (options.on_token) options.on_token(b, tok, static_cast<int>(out.token_ids.size()) - 1);
        last[b] = tok;
        if (static_cast<int>(out.token_ids.size()) >= options.max_new_tokens) {
            out.finish_reason = FinishReason::max_tokens;
            active[b] = false;
        }
    };

    for (std::size_t b = 0; b < n; ++b) emit(b, pre.logits[b]);

    while (std::any_of(active.begin(), active.end(), [](bool a) { return a; })) {
        for (std::size_t b = 0; b < n; ++b) {
            if (!active[b]) continue;
            auto& seq = cache.sequences[b];
            auto logits = run_rows(seq, std::span<const int>(&last[b], 1), Stage::decode, static_cast<int>(b));
            ++seq.generated;
            emit(b, Tensor::vector(std::move(logits)));
        }
    }
    return result;
}

std::vector<int> PositionSelector::resolve(int length) const {
    if (length < 1) fail(ErrorKind::Domain, "position selector on empty sequence");
    switch (kind) {
        case Kind::final_token: return {length - 1};
        case Kind::all: {
            std::vector<int> out(length);
            std::iota(out.begin(), out.end(), 0);
            return out;
        }
        case Kind::explicit_list: {
            std::vector<int> out;
            for (int p : positions) {
                const int resolved = p < 0 ? length + p : p;
                if (resolved < 0 || resolved >= length) {
                    fail(ErrorKind::Domain, fmt::format("position {} not resolvable in a sequence of length {}",
                                                        p, length));
                }
                out.push_back(resolved);
            }
            return out;
        }
    }
    return {};
}

std::vector<HiddenStateRecord> capture_hidden_states(std::shared_ptr<const ModelBundle> bundle,
                                                     std::span<const int> token_ids,
                                                     const std::set<int>& layers,
                                                     const PositionSelector& positions) {
    const int num_layers = bundle->config().num_layers;
    for (int l : layers) {
        if (l < 1 || l > num_layers) {
            fail(ErrorKind::Domain, fmt::format("capture layer {} outside [1, {}]", l, num_layers));
        }
    }
    const auto wanted = positions.resolve(static_cast<int>(token_ids.size()));
    const std::set<int> wanted_set(wanted.begin(), wanted.end());
    std::map<std::pair<int, int>, Tensor> seen;
    auto recorder = [&](int layer, const ForwardContext& ctx, std::span<float> hidden) {
        if (layers.count(layer) && wanted_set.count(ctx.absolute_position)) {
            seen.insert_or_assign({layer, ctx.absolute_position},
                                  Tensor::vector(std::vector<float>(hidden.begin(), hidden.end())));
        }
    };
    WrappedModel model(std::move(bundle), recorder);
    model.prefill({std::vector<int>(token_ids.begin(), token_ids.end())});

    std::vector<HiddenStateRecord> out;
    for (int l : layers)
        for (int p : wanted) out.push_back({l, p, seen.at({l, p})});
    return out;
}

}  // namespace steerkit
