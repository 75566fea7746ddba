#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "steerkit/tensor.hpp"

namespace steerkit {

inline constexpr int kEosToken = 255;

struct EngineConfig {
    int num_layers = 4;
    int hidden_dim = 64;
    int num_heads = 4;
    int vocab_size = 256;
    int max_seq_len = 512;

    int head_dim() const { return hidden_dim / num_heads; }
    int mlp_dim() const { return 4 * hidden_dim; }
    void validate() const;

    friend bool operator==(const EngineConfig&, const EngineConfig&) = default;
};

// Weight names follow "tok_emb", "pos_emb", "layers.<l>.<leaf>" with l in
// [1, L], "ln_f.weight", "ln_f.bias" and "unembed". Activations are row
// vectors, so every projection is x * W with W shaped [in, out].
std::string layer_weight_name(int layer, std::string_view leaf);
std::vector<std::pair<std::string, Shape>> expected_weight_shapes(const EngineConfig& cfg);

class ModelBundle {
public:
    ModelBundle(EngineConfig config, std::map<std::string, Tensor> weights);

    // Seeded random initialisation: embeddings and projections drawn from
    // scaled normals, layer norms at identity, biases at zero.
    static ModelBundle random(const EngineConfig& config, std::uint64_t seed);

    const EngineConfig& config() const noexcept { return config_; }
    const Tensor& weight(std::string_view name) const;
    const Tensor& layer_weight(int layer, std::string_view leaf) const;
    const std::map<std::string, Tensor, std::less<>>& weights() const noexcept { return weights_; }

private:
    EngineConfig config_;
    std::map<std::string, Tensor, std::less<>> weights_;
};

// FNV-1a over names, shapes and raw bytes of every weight.
std::uint64_t weights_fingerprint(const ModelBundle& bundle);

enum class Stage { prefill, decode };

std::string_view to_string(Stage stage);

struct ForwardContext {
    Stage stage = Stage::prefill;
    int batch_index = 0;
    int absolute_position = 0;
    int token_id = 0;
    // -1 during prefill, otherwise index into the generated tokens.
    int generated_offset = -1;
    // Tokens of this sequence from position 0 through absolute_position.
    std::span<const int> history;
};

// Invoked once per (layer, position) on the residual stream leaving each
// decoder layer. The callee may overwrite `hidden` in place; leaving it
// untouched is bit-identical to running without a hook. Layers are 1-based.
using InterceptionHook =
    std::function<void(int layer, const ForwardContext& ctx, std::span<float> hidden)>;

struct SequenceCache {
    // Per layer, row-major [length x d].
    std::vector<std::vector<float>> keys;
    std::vector<std::vector<float>> values;
    std::vector<int> tokens;
    int prompt_length = 0;
    int generated = 0;

    int length() const { return static_cast<int>(tokens.size()); }
};

struct KVCache {
    std::vector<SequenceCache> sequences;

    std::size_t batch_size() const { return sequences.size(); }
};

struct PrefillResult {
    std::vector<Tensor> logits;  // one [vocab] row per sequence
    KVCache cache;
};

struct Sampling {
    enum class Mode { greedy, top_k };

    Mode mode = Mode::greedy;
    int top_k = 0;
    std::uint64_t seed = 0;

    static Sampling greedy() { return {}; }
    static Sampling seeded_top_k(int k, std::uint64_t seed) { return {Mode::top_k, k, seed}; }
};

enum class FinishReason { max_tokens, eos };

std::string_view to_string(FinishReason reason);

using Clock = std::chrono::steady_clock;

struct GenerateOptions {
    int max_new_tokens = 16;
    Sampling sampling;
    // Called as each token is chosen: (sequence index, token id, generated index).
    std::function<void(std::size_t, int, int)> on_token;
};

struct GenerationResult {
    struct Sequence {
        std::vector<int> token_ids;
        std::vector<Clock::time_point> timestamps;
        FinishReason finish_reason = FinishReason::max_tokens;
    };

    Clock::time_point start;
    std::vector<Sequence> sequences;

    std::size_t total_tokens() const;
};

// A ModelBundle plus an optional interception hook on every decoder layer.
// Weights are shared read-only; one generate call at a time per instance.
class WrappedModel {
public:
    explicit WrappedModel(std::shared_ptr<const ModelBundle> bundle, InterceptionHook hook = {});

    const ModelBundle& bundle() const noexcept { return *bundle_; }
    const EngineConfig& config() const noexcept { return bundle_->config(); }
    bool has_hook() const noexcept { return static_cast<bool>(hook_); }

    PrefillResult prefill(const std::vector<std::vector<int>>& batch) const;
    std::vector<Tensor> decode_step(KVCache& cache, std::span<const int> last_tokens) const;
    GenerationResult generate(const std::vector<std::vector<int>>& prompts,
                              const GenerateOptions& options) const;

private:
    std::vector<float> run_rows(SequenceCache& seq, std::span<const int> tokens, Stage stage,
                                int batch_index) const;
    void check_tokens(std::span<const int> tokens) const;

    std::shared_ptr<const ModelBundle> bundle_;
    InterceptionHook hook_;
};

WrappedModel wrap_model(std::shared_ptr<const ModelBundle> bundle, InterceptionHook hook);

// Which positions of a sequence to record; negative explicit positions count
// from the end (-1 is the final token).
struct PositionSelector {
    enum class Kind { final_token, all, explicit_list };

    Kind kind = Kind::final_token;
    std::vector<int> positions;

    static PositionSelector final_token() { return {}; }
    static PositionSelector all() { return {Kind::all, {}}; }
    static PositionSelector at(std::vector<int> p) { return {Kind::explicit_list, std::move(p)}; }

    std::vector<int> resolve(int length) const;
};

struct HiddenStateRecord {
    int layer = 0;
    int position = 0;
    Tensor hidden;
};

std::vector<HiddenStateRecord> capture_hidden_states(std::shared_ptr<const ModelBundle> bundle,
                                                     std::span<const int> token_ids,
                                                     const std::set<int>& layers,
                                                     const PositionSelector& positions);

}  // namespace steerkit
