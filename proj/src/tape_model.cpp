#include "steerkit/tape_model.hpp"

#include <fmt/format.h>

#include <cmath>

#include "steerkit/error.hpp"

namespace steerkit {

TapeModel::TapeModel(ad::GradTape& tape, const ModelBundle& bundle, bool trainable_weights)
    : tape_(tape), bundle_(bundle) {
    for (const auto& [name, t] : bundle.weights()) {
        vars_.emplace(name, trainable_weights ? tape.parameter(t) : tape.constant(t));
    }
}

ad::Var TapeModel::weight(std::string_view name) const {
    auto it = vars_.find(name);
    if (it == vars_.end()) fail(ErrorKind::Lookup, fmt::format("no model weight named '{}'", name));
    return it->second;
}

ad::Var TapeModel::embed(std::span<const int> tokens, int start) {
    const auto& cfg = config();
    if (tokens.empty()) fail(ErrorKind::Domain, "embed: empty token list");
    if (start < 0 || start + static_cast<int>(tokens.size()) > cfg.max_seq_len) {
        fail(ErrorKind::Capacity, fmt::format("embed: positions [{}, {}) exceed max_seq_len {}", start,
                                              start + tokens.size(), cfg.max_seq_len));
    }
    const std::size_t n = tokens.size();
    // Gather rows via one-hot selection matrices so embeddings stay
    // differentiable when they are trainable.
    std::vector<float> tok_sel(n * cfg.vocab_size, 0.0f), pos_sel(n * cfg.max_seq_len, 0.0f);
    for (std::size_t r = 0; r < n; ++r) {
        const int t = tokens[r];
        if (t < 0 || t >= cfg.vocab_size) {
            fail(ErrorKind::Domain, fmt::format("token id {} outside vocabulary [0, {})", t, cfg.vocab_size));
        }
        tok_sel[r * cfg.vocab_size + t] = 1.0f;
        pos_sel[r * cfg.max_seq_len + start + r] = 1.0f;
    }
    auto tok = tape_.matmul(tape_.constant(Tensor::matrix(n, cfg.vocab_size, std::move(tok_sel))), weight("tok_emb"));
    auto pos = tape_.matmul(tape_.constant(Tensor::matrix(n, cfg.max_seq_len, std::move(pos_sel))), weight("pos_emb"));
    return tape_.add(tok, pos);
}

ad::Var TapeModel::norm(ad::Var x, std::string_view gain, std::string_view bias) {
    const auto n = x.value().dim(0);
    auto y = tape_.layernorm(x);
    y = tape_.mul(y, tape_.broadcast_rows(weight(gain), n));
    return tape_.add(y, tape_.broadcast_rows(weight(bias), n));
}

ad::Var TapeModel::linear(ad::Var x, std::string_view w, std::string_view b) {
    const auto n = x.value().dim(0);
    return tape_.add(tape_.matmul(x, weight(w)), tape_.broadcast_rows(weight(b), n));
}

ad::Var TapeModel::layer(int l, ad::Var x) {
    const auto& cfg = config();
    if (l < 1 || l > cfg.num_layers) fail(ErrorKind::Domain, fmt::format("layer {} outside [1, {}]", l, cfg.num_layers));
    auto name = [l](std::string_view leaf) { return layer_weight_name(l, leaf); };
    const std::size_t n = x.value().dim(0), dh = cfg.head_dim();

    auto a = norm(x, name("ln1.weight"), name("ln1.bias"));
    auto q = linear(a, name("attn.wq"), name("attn.bq"));
    auto k = linear(a, name("attn.wk"), name("attn.bk"));
    auto v = linear(a, name("attn.wv"), name("attn.bv"));

    std::vector<float> mask(n * n, 0.0f);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) mask[i * n + j] = -1e30f;
    auto causal = tape_.constant(Tensor::matrix(n, n, std::move(mask)));
    const float inv_sqrt = 1.0f / std::sqrt(static_cast<float>(dh));

    std::vector<ad::Var> heads;
    for (int h = 0; h < cfg.num_heads; ++h) {
        const std::size_t c0 = h * dh, c1 = c0 + dh;
        auto qh = tape_.slice(q, 1, c0, c1);
        auto kh = tape_.slice(k, 1, c0, c1);
        auto vh = tape_.slice(v, 1, c0, c1);
        auto scores = tape_.scale(tape_.matmul(qh, tape_.transpose(kh)), inv_sqrt);
        auto probs = tape_.softmax(tape_.add(scores, causal));
        heads.push_back(tape_.matmul(probs, vh));
    }
    auto attn = heads.size() == 1 ? heads[0] : tape_.concat(heads, 1);
    x = tape_.add(x, linear(attn, name("attn.wo"), name("attn.bo")));

    auto b = norm(x, name("ln2.weight"), name("ln2.bias"));
    auto hid = tape_.gelu(linear(b, name("mlp.w1"), name("mlp.b1")));
    return tape_.add(x, linear(hid, name("mlp.w2"), name("mlp.b2")));
}

ad::Var TapeModel::layers(ad::Var x, int first, int last) {
    for (int l = first; l <= last; ++l) x = layer(l, x);
    return x;
}

ad::Var TapeModel::logits(ad::Var x) {
    return tape_.matmul(norm(x, "ln_f.weight", "ln_f.bias"), weight("unembed"));
}

}  // namespace steerkit
