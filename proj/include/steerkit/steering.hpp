#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "steerkit/model.hpp"
#include "steerkit/tensor.hpp"

namespace steerkit {

// h + b
struct SavParams {
    Tensor bias;  // [d]
};

// h + eps * W h, final layer only
struct LmSteerParams {
    Tensor weight;  // [d x d]
    float epsilon = 1.0f;
};

// h + R^T (W h + b - R h)
struct LoreftParams {
    Tensor projection;  // R, [r x d]
    Tensor weight;      // W, [r x d]
    Tensor bias;        // b, [r]

    int rank() const { return static_cast<int>(projection.dim(0)); }
};

using LearnedSteeringParams = std::variant<SavParams, LmSteerParams, LoreftParams>;

std::string_view method_of(const LearnedSteeringParams& params);
std::size_t parameter_count(const LearnedSteeringParams& params);
void validate_params(const LearnedSteeringParams& params, int hidden_dim);

struct SteeringVector {
    std::string name;
    std::string method_id;
    int source_layer = 0;
    std::variant<Tensor, LearnedSteeringParams> payload;
    std::map<std::string, std::string> metadata;

    bool is_learned() const { return std::holds_alternative<LearnedSteeringParams>(payload); }
    const Tensor& direction() const;
    const LearnedSteeringParams& learned() const;
    int dim() const;
};

// Free-standing forms of the three steering functions.
Tensor apply_direct_add(const Tensor& h, const Tensor& v, float alpha);
Tensor apply_lmsteer(const Tensor& h, const LmSteerParams& params);
Tensor apply_loreft(const Tensor& h, const LoreftParams& params);

struct VectorConfig;

// A steering method: turns (h, vector, scale) into the additive change it
// wants to make to h. Implementations are stateless after construction.
class SteeringAlgorithm {
public:
    virtual ~SteeringAlgorithm() = default;

    virtual std::string_view name() const = 0;
    virtual void validate(const SteeringVector& vector, const VectorConfig& config,
                          const EngineConfig& engine) const = 0;
    // Writes scale * (f(h) - h) into delta.
    virtual void compute_delta(std::span<const float> h, const SteeringVector& vector, float scale,
                               std::span<float> delta) const = 0;
};

using AlgorithmFactory = std::function<std::unique_ptr<SteeringAlgorithm>()>;

// Method id -> factory. Instances are built on first resolve and cached.
class AlgorithmRegistry {
public:
    void register_algorithm(std::string method_id, AlgorithmFactory factory);
    const SteeringAlgorithm& resolve(std::string_view method_id) const;
    bool contains(std::string_view method_id) const;
    std::vector<std::string> ids() const;
    std::size_t constructions() const { return constructions_.load(); }

    // Process-wide registry with every built-in method registered.
    static AlgorithmRegistry& global();

private:
    struct Entry {
        AlgorithmFactory factory;
        mutable std::unique_ptr<SteeringAlgorithm> instance;
    };

    mutable std::mutex mutex_;
    std::map<std::string, Entry, std::less<>> entries_;
    mutable std::atomic<std::size_t> constructions_{0};
};

void register_builtin_algorithms(AlgorithmRegistry& registry);

struct AlgorithmRegistrar {
    AlgorithmRegistrar(std::string method_id, AlgorithmFactory factory);
};

#define STEERKIT_CONCAT_INNER(a, b) a##b
#define STEERKIT_CONCAT(a, b) STEERKIT_CONCAT_INNER(a, b)
#define STEERKIT_REGISTER_ALGORITHM(method_id, Type)                                           \
    static const ::steerkit::AlgorithmRegistrar STEERKIT_CONCAT(steerkit_registrar_, __LINE__)( \
        method_id, [] { return std::unique_ptr<::steerkit::SteeringAlgorithm>(new Type()); })

enum class StageFilter { prefill, decode, both };

struct PositionRange {
    enum class Anchor { prompt, generation };

    int start = 0;
    int end = 0;  // exclusive
    Anchor anchor = Anchor::prompt;
};

inline constexpr std::size_t kMaxContextSuffix = 8;

// All present constraints must hold. A default-constructed spec always fires.
struct TriggerSpec {
    StageFilter stage = StageFilter::both;
    std::vector<PositionRange> position_ranges;
    std::optional<std::set<int>> token_ids;
    std::vector<int> context_suffix;

    void validate() const;
};

// `recent_tokens` ends with the token at ctx.absolute_position.
bool evaluate_trigger(const TriggerSpec& spec, const ForwardContext& ctx,
                      std::span<const int> recent_tokens);

struct VectorConfig {
    std::shared_ptr<const SteeringVector> vector;
    float scale = 1.0f;
    std::optional<std::set<int>> target_layers;  // nullopt targets every layer
    TriggerSpec trigger;
    int priority = 0;

    bool targets(int layer) const { return !target_layers || target_layers->count(layer) != 0; }
};

enum class ConflictPolicy { additive_superposition, priority_select };

std::string_view to_string(ConflictPolicy policy);

struct SteerVectorRequest {
    std::vector<VectorConfig> configs;
    ConflictPolicy policy = ConflictPolicy::additive_superposition;
};

// Throws Error (with a field path such as "configs[1].scale") on the first
// violation.
void validate_request(const SteerVectorRequest& request, const EngineConfig& engine,
                      const AlgorithmRegistry& registry = AlgorithmRegistry::global());

struct ActiveDelta {
    const VectorConfig* config = nullptr;
    std::size_t index = 0;
    Tensor delta;
};

// Every delta must have been computed from the same pre-intervention h.
Tensor resolve_and_apply(const Tensor& h, std::span<const ActiveDelta> active, ConflictPolicy policy);

struct HookEvent {
    int layer = 0;
    Stage stage = Stage::prefill;
    int batch_index = 0;
    int position = 0;
    int token_id = 0;
    std::vector<std::size_t> fired;  // config indices that triggered here
    std::vector<float> before;
    std::vector<float> after;
};

class SteeringHook {
public:
    SteeringHook(const EngineConfig& engine, SteerVectorRequest request,
                 const AlgorithmRegistry& registry = AlgorithmRegistry::global(), bool record = false);

    void operator()(int layer, const ForwardContext& ctx, std::span<float> hidden);

    const std::vector<HookEvent>& events() const { return events_; }
    void clear_events() { events_.clear(); }
    const SteerVectorRequest& request() const { return request_; }

private:
    int hidden_dim_;
    SteerVectorRequest request_;
    std::vector<const SteeringAlgorithm*> algorithms_;
    bool record_;
    std::vector<HookEvent> events_;
};

InterceptionHook build_steering_hook(const EngineConfig& engine, SteerVectorRequest request,
                                     const AlgorithmRegistry& registry = AlgorithmRegistry::global());

}  // namespace steerkit
