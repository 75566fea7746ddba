#include <fmt/format.h>

#include "steerkit/error.hpp"
#include "steering_math.hpp"
#include "steerkit/steering.hpp"

namespace steerkit {

void AlgorithmRegistry::register_algorithm(std::string method_id, AlgorithmFactory factory) {
    if (method_id.empty()) fail(ErrorKind::Registration, "algorithm id must be non-empty");
    if (!factory) fail(ErrorKind::Registration, fmt::format("algorithm '{}' has no factory", method_id));
    std::lock_guard lock(mutex_);
    if (entries_.count(method_id)) {
        fail(ErrorKind::Registration, fmt::format("algorithm '{}' is already registered", method_id));
    }
    entries_.emplace(std::move(method_id), Entry{std::move(factory), nullptr});
}

const SteeringAlgorithm& AlgorithmRegistry::resolve(std::string_view method_id) const {
    std::lock_guard lock(mutex_);
    auto it = entries_.find(method_id);
    if (it == entries_.end()) {
        fail(ErrorKind::Lookup, fmt::format("no steering algorithm registered as '{}'", method_id));
    }
    if (!it->second.instance) {
        it->second.instance = it->second.factory();
        ++constructions_;
    }
    return *it->second.instance;
}

bool AlgorithmRegistry::contains(std::string_view method_id) const {
    std::lock_guard lock(mutex_);
    return entries_.find(method_id) != entries_.end();
}

std::vector<std::string> AlgorithmRegistry::ids() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, e] : entries_) out.push_back(id);
    return out;
}

AlgorithmRegistry& AlgorithmRegistry::global() {
    static AlgorithmRegistry* registry = [] {
        auto* r = new AlgorithmRegistry();
        register_builtin_algorithms(*r);
        return r;
    }();
    return *registry;
}

AlgorithmRegistrar::AlgorithmRegistrar(std::string method_id, AlgorithmFactory factory) {
    AlgorithmRegistry::global().register_algorithm(std::move(method_id), std::move(factory));
}

namespace {

void require_dim(const SteeringVector& vector, const EngineConfig& engine) {
    if (vector.dim() != engine.hidden_dim) {
        fail(ErrorKind::Dimension, fmt::format("vector '{}' has dim {}, model hidden_dim is {}", vector.name,
                                               vector.dim(), engine.hidden_dim));
    }
}

// h + scale * v for every analysis-derived direction.
class DirectAdd final : public SteeringAlgorithm {
public:
    explicit DirectAdd(std::string id) : id_(std::move(id)) {}

    std::string_view name() const override { return id_; }

    void validate(const SteeringVector& vector, const VectorConfig&, const EngineConfig& engine) const override {
        if (vector.is_learned()) {
            fail(ErrorKind::Config, fmt::format("'{}' expects a direction vector but '{}' holds learned parameters",
                                                id_, vector.name));
        }
        require_dim(vector, engine);
    }

    void compute_delta(std::span<const float>, const SteeringVector& vector, float scale,
                       std::span<float> delta) const override {
        const auto v = vector.direction().values();
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = scale * v[i];
    }

private:
    std::string id_;
};

template <typename Params>
const Params& learned_as(const SteeringVector& vector, std::string_view method) {
    if (!vector.is_learned() || !std::holds_alternative<Params>(vector.learned())) {
        fail(ErrorKind::Config, fmt::format("vector '{}' does not hold {} parameters", vector.name, method));
    }
    return std::get<Params>(vector.learned());
}

class SupervisedAdditive final : public SteeringAlgorithm {
public:
    std::string_view name() const override { return "sav"; }

    void validate(const SteeringVector& vector, const VectorConfig&, const EngineConfig& engine) const override {
        learned_as<SavParams>(vector, "sav");
        require_dim(vector, engine);
    }

    void compute_delta(std::span<const float>, const SteeringVector& vector, float scale,
                       std::span<float> delta) const override {
        const auto b = std::get<SavParams>(vector.learned()).bias.values();
        for (std::size_t i = 0; i < delta.size(); ++i) delta[i] = scale * b[i];
    }
};

class LmSteer final : public SteeringAlgorithm {
public:
    std::string_view name() const override { return "lmsteer"; }

    void validate(const SteeringVector& vector, const VectorConfig& config, const EngineConfig& engine) const override {
        learned_as<LmSteerParams>(vector, "lmsteer");
        require_dim(vector, engine);
        const bool final_only = config.target_layers && config.target_layers->size() == 1 &&
                                *config.target_layers->begin() == engine.num_layers;
        const bool all_is_final = !config.target_layers && engine.num_layers == 1;
        if (!final_only && !all_is_final) {
            fail(ErrorKind::Config, fmt::format("lmsteer vector '{}' may only target the final layer {}",
                                                vector.name, engine.num_layers));
        }
    }

    void compute_delta(std::span<const float> h, const SteeringVector& vector, float scale,
                       std::span<float> delta) const override {
        detail::lmsteer_delta(h, std::get<LmSteerParams>(vector.learned()), scale, delta);
    }
};

class Loreft final : public SteeringAlgorithm {
public:
    std::string_view name() const override { return "loreft"; }

    void validate(const SteeringVector& vector, const VectorConfig&, const EngineConfig& engine) const override {
        learned_as<LoreftParams>(vector, "loreft");
        require_dim(vector, engine);
    }

    void compute_delta(std::span<const float> h, const SteeringVector& vector, float scale,
                       std::span<float> delta) const override {
        detail::loreft_delta(h, std::get<LoreftParams>(vector.learned()), scale, delta);
    }
};

}  // namespace

void register_builtin_algorithms(AlgorithmRegistry& registry) {
    for (const char* id : {"direct_add", "caa", "pca_center", "pca_diff", "linear_probe", "sae"}) {
        registry.register_algorithm(id, [id] { return std::make_unique<DirectAdd>(id); });
    }
    registry.register_algorithm("sav", [] { return std::make_unique<SupervisedAdditive>(); });
    registry.register_algorithm("lmsteer", [] { return std::make_unique<LmSteer>(); });
    registry.register_algorithm("loreft", [] { return std::make_unique<Loreft>(); });
}

}  // namespace steerkit
