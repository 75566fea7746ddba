#include "steerkit/learning.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "steerkit/error.hpp"
#include "steerkit/tape_model.hpp"

namespace steerkit {

std::string_view to_string(Objective objective) {
    return objective == Objective::contrastive_preference ? "contrastive_preference" : "next_token_cross_entropy";
}

TaskDataset TaskDataset::subset(std::span<const std::size_t> indices) const {
    TaskDataset out;
    for (auto i : indices) {
        if (is_preference()) {
            out.preference_pairs.push_back(preference_pairs.at(i));
        } else {
            out.io_pairs.push_back(io_pairs.at(i));
        }
    }
    return out;
}

void TaskDataset::validate(int vocab_size) const {
    if (size() == 0) fail(ErrorKind::Domain, "task dataset is empty");
    if (!io_pairs.empty() && !preference_pairs.empty()) {
        fail(ErrorKind::Validation, "task dataset mixes input/output and preference records");
    }
    auto check = [&](const std::vector<int>& tokens, std::size_t record, std::string_view part) {
        if (tokens.empty()) fail(ErrorKind::Validation, fmt::format("record {} has an empty {}", record, part));
        for (int t : tokens) {
            if (t < 0 || t >= vocab_size) {
                fail(ErrorKind::Validation,
                     fmt::format("record {} {} holds token {} outside [0, {})", record, part, t, vocab_size));
            }
        }
    };
    for (std::size_t i = 0; i < io_pairs.size(); ++i) {
        check(io_pairs[i].prompt, i, "prompt");
        check(io_pairs[i].target, i, "target");
    }
    for (std::size_t i = 0; i < preference_pairs.size(); ++i) {
        check(preference_pairs[i].prompt, i, "prompt");
        check(preference_pairs[i].preferred, i, "preferred");
        check(preference_pairs[i].dispreferred, i, "dispreferred");
    }
}

void TrainConfig::validate(const EngineConfig& engine) const {
    auto bad = [](std::string field, std::string message) { throw Error(ErrorKind::Validation, message).with_field(field); };
    if (method != "sav" && method != "lmsteer" && method != "loreft") {
        bad("method", fmt::format("unknown learned method '{}' (expected sav, lmsteer or loreft)", method));
    }
    if (target_layer < 1 || target_layer > engine.num_layers) {
        bad("target_layer", fmt::format("target_layer {} outside [1, {}]", target_layer, engine.num_layers));
    }
    if (method == "lmsteer" && target_layer != engine.num_layers) {
        bad("target_layer", fmt::format("lmsteer must target the final layer {}", engine.num_layers));
    }
    if (method == "loreft" && (rank < 1 || rank > engine.hidden_dim)) {
        bad("rank", fmt::format("loreft rank {} outside [1, {}]", rank, engine.hidden_dim));
    }
    if (!std::isfinite(epsilon)) bad("epsilon", "epsilon must be finite");
    if (!std::isfinite(learning_rate) || learning_rate < 0.0f) {
        bad("learning_rate", fmt::format("learning_rate {} must be finite and non-negative", learning_rate));
    }
    if (max_steps < 0) bad("max_steps", fmt::format("max_steps {} must be >= 0", max_steps));
    if (batch_size < 0) bad("batch_size", fmt::format("batch_size {} must be >= 0", batch_size));
    try {
        trigger.validate();
    } catch (Error& e) {
        e.with_field("trigger." + e.field());
        throw;
    }
}

namespace {

// Seeded Gaussian rows orthonormalised with modified Gram-Schmidt in double.
Tensor random_orthonormal_rows(int rows, int cols, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::vector<std::vector<double>> basis;
    while (static_cast<int>(basis.size()) < rows) {
        std::vector<double> v(cols);
        for (auto& x : v) x = normal(rng);
        for (const auto& b : basis) {
            const double p = std::inner_product(v.begin(), v.end(), b.begin(), 0.0);
            for (int i = 0; i < cols; ++i) v[i] -= p * b[i];
        }
        const double norm = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
        if (norm < 1e-6) continue;
        for (auto& x : v) x /= norm;
        basis.push_back(std::move(v));
    }
    std::vector<float> out;
    out.reserve(static_cast<std::size_t>(rows) * cols);
    for (const auto& b : basis)
        for (double x : b) out.push_back(static_cast<float>(x));
    return Tensor::matrix(rows, cols, std::move(out));
}

}  // namespace

LearnedSteeringParams init_params(const TrainConfig& cfg, int hidden_dim, std::uint64_t seed) {
    const auto d = static_cast<std::size_t>(hidden_dim);
    if (cfg.method == "sav") return SavParams{Tensor::zeros({d})};
    if (cfg.method == "lmsteer") return LmSteerParams{Tensor::zeros({d, d}), cfg.epsilon};
    if (cfg.method == "loreft") {
        if (cfg.rank < 1 || cfg.rank > hidden_dim) {
            throw Error(ErrorKind::Validation, fmt::format("loreft rank {} outside [1, {}]", cfg.rank, hidden_dim))
                .with_field("rank");
        }
        auto r = random_orthonormal_rows(cfg.rank, hidden_dim, seed);
        return LoreftParams{r, r, Tensor::zeros({static_cast<std::size_t>(cfg.rank)})};
    }
    throw Error(ErrorKind::Validation, fmt::format("unknown learned method '{}'", cfg.method)).with_field("method");
}

std::vector<Tensor> param_tensors(const LearnedSteeringParams& params) {
    if (const auto* p = std::get_if<SavParams>(&params)) return {p->bias};
    if (const auto* p = std::get_if<LmSteerParams>(&params)) return {p->weight};
    const auto& p = std::get<LoreftParams>(params);
    return {p.projection, p.weight, p.bias};
}

LearnedSteeringParams with_tensors(const LearnedSteeringParams& like, std::span<const Tensor> t) {
    const auto expected = param_tensors(like).size();
    if (t.size() != expected) {
        fail(ErrorKind::Contract, fmt::format("expected {} parameter tensors, got {}", expected, t.size()));
    }
    if (std::holds_alternative<SavParams>(like)) return SavParams{t[0]};
    if (const auto* p = std::get_if<LmSteerParams>(&like)) return LmSteerParams{t[0], p->epsilon};
    return LoreftParams{t[0], t[1], t[2]};
}

namespace {

struct Sequence {
    std::vector<int> tokens;
    // Positions whose next-token log-probability enters the loss, with the
    // token they must predict.
    std::vector<std::pair<std::size_t, std::size_t>> picks;
};

Sequence make_sequence(const std::vector<int>& prompt, const std::vector<int>& continuation) {
    Sequence s;
    s.tokens = prompt;
    s.tokens.insert(s.tokens.end(), continuation.begin(), continuation.end());
    for (std::size_t j = 0; j < continuation.size(); ++j)
        s.picks.emplace_back(prompt.size() - 1 + j, static_cast<std::size_t>(continuation[j]));
    return s;
}

// Sequences in dataset order; preference records contribute (preferred,
// dispreferred) adjacent pairs.
std::vector<Sequence> sequences_of(const TaskDataset& data) {
    std::vector<Sequence> out;
    for (const auto& r : data.io_pairs) out.push_back(make_sequence(r.prompt, r.target));
    for (const auto& r : data.preference_pairs) {
        out.push_back(make_sequence(r.prompt, r.preferred));
        out.push_back(make_sequence(r.prompt, r.dispreferred));
    }
    return out;
}

ad::Var combine_objective(ad::GradTape& tape, const std::vector<ad::Var>& picked, Objective objective) {
    if (objective == Objective::next_token_cross_entropy) {
        auto all = picked.size() == 1 ? picked[0] : tape.concat(picked, 0);
        return tape.scale(tape.mean(all), -1.0f);
    }
    if (picked.size() % 2 != 0) fail(ErrorKind::Contract, "contrastive objective needs preference pairs");
    ad::Var total;
    for (std::size_t i = 0; i < picked.size(); i += 2) {
        auto margin = tape.sub(tape.sum(picked[i]), tape.sum(picked[i + 1]));
        auto pair_loss = tape.scale(tape.log_sigmoid(margin), -1.0f);
        total = i == 0 ? pair_loss : tape.add(total, pair_loss);
    }
    return tape.scale(total, 1.0f / static_cast<float>(picked.size() / 2));
}

void check_objective(const TaskDataset& data, Objective objective) {
    if (data.size() == 0) fail(ErrorKind::Domain, "empty batch");
    if (objective == Objective::contrastive_preference && !data.is_preference()) {
        fail(ErrorKind::Validation, "contrastive_preference needs preference records");
    }
    if (objective == Objective::next_token_cross_entropy && data.is_preference()) {
        fail(ErrorKind::Validation, "next_token_cross_entropy needs input/output records");
    }
}

struct Prepared {
    Sequence seq;
    Tensor upstream;  // [n x d] residual stream after the target layer
    Tensor mask;      // [n x d] ones on rows where the intervention fires
    bool all_rows = true;
};

std::vector<Prepared> prepare(const ModelBundle& bundle, const TaskDataset& data, int target_layer,
                              const TriggerSpec& trigger) {
    std::shared_ptr<const ModelBundle> shared(&bundle, [](const ModelBundle*) {});
    const std::size_t d = bundle.config().hidden_dim;
    std::vector<Prepared> out;
    for (auto& seq : sequences_of(data)) {
        auto records = capture_hidden_states(shared, seq.tokens, {target_layer}, PositionSelector::all());
        const std::size_t n = seq.tokens.size();
        std::vector<float> rows(n * d), mask(n * d, 0.0f);
        bool all_rows = true;
        for (std::size_t r = 0; r < n; ++r) {
            const auto v = records[r].hidden.values();
            std::copy(v.begin(), v.end(), rows.begin() + r * d);
            ForwardContext ctx;
            ctx.stage = Stage::prefill;
            ctx.absolute_position = static_cast<int>(r);
            ctx.token_id = seq.tokens[r];
            ctx.history = std::span<const int>(seq.tokens).first(r + 1);
            const auto recent = ctx.history.size() > kMaxContextSuffix ? ctx.history.last(kMaxContextSuffix) : ctx.history;
            if (evaluate_trigger(trigger, ctx, recent)) {
                std::fill(mask.begin() + r * d, mask.begin() + (r + 1) * d, 1.0f);
            } else {
                all_rows = false;
            }
        }
        out.push_back({std::move(seq), Tensor::matrix(n, d, std::move(rows)), Tensor::matrix(n, d, std::move(mask)),
                       all_rows});
    }
    return out;
}

std::vector<ad::Var> record_params(ad::GradTape& tape, const LearnedSteeringParams& params) {
    std::vector<ad::Var> vars;
    for (auto& t : param_tensors(params)) vars.push_back(tape.parameter(std::move(t)));
    return vars;
}

ad::Var intervention_delta(ad::GradTape& tape, const LearnedSteeringParams& params, const std::vector<ad::Var>& vars,
                           ad::Var h) {
    const auto n = h.value().dim(0);
    if (std::holds_alternative<SavParams>(params)) return tape.broadcast_rows(vars[0], n);
    if (const auto* lm = std::get_if<LmSteerParams>(&params)) {
        return tape.scale(tape.matmul(h, tape.transpose(vars[0])), lm->epsilon);
    }
    auto rh = tape.matmul(h, tape.transpose(vars[0]));
    auto wh = tape.matmul(h, tape.transpose(vars[1]));
    auto u = tape.sub(tape.add(wh, tape.broadcast_rows(vars[2], n)), rh);
    return tape.matmul(u, vars[0]);
}

SteeringLoss loss_on_prepared(ad::GradTape& tape, const ModelBundle& bundle, const LearnedSteeringParams& params,
                              int target_layer, std::span<const Prepared> prepared, Objective objective) {
    TapeModel model(tape, bundle);
    SteeringLoss out;
    out.params = record_params(tape, params);
    std::vector<ad::Var> picked;
    for (const auto& p : prepared) {
        auto h = tape.constant(p.upstream);
        auto delta = intervention_delta(tape, params, out.params, h);
        if (!p.all_rows) delta = tape.mul(tape.constant(p.mask), delta);
        auto x = model.layers(tape.add(h, delta), target_layer + 1, bundle.config().num_layers);
        auto logp = tape.log_softmax(model.logits(x));
        picked.push_back(tape.pick(logp, p.seq.picks));
    }
    out.loss = combine_objective(tape, picked, objective);
    return out;
}

void check_layer(const ModelBundle& bundle, int target_layer) {
    if (target_layer < 1 || target_layer > bundle.config().num_layers) {
        fail(ErrorKind::Domain, fmt::format("target layer {} outside [1, {}]", target_layer, bundle.config().num_layers));
    }
}

}  // namespace

SteeringLoss steering_loss(ad::GradTape& tape, const ModelBundle& bundle, const LearnedSteeringParams& params,
                           int target_layer, const TaskDataset& batch, Objective objective, const TriggerSpec& trigger) {
    check_objective(batch, objective);
    check_layer(bundle, target_layer);
    validate_params(params, bundle.config().hidden_dim);
    const auto prepared = prepare(bundle, batch, target_layer, trigger);
    return loss_on_prepared(tape, bundle, params, target_layer, prepared, objective);
}

double unsteered_loss(const ModelBundle& bundle, const TaskDataset& batch, Objective objective) {
    check_objective(batch, objective);
    ad::GradTape tape;
    TapeModel model(tape, bundle);
    std::vector<ad::Var> picked;
    for (const auto& seq : sequences_of(batch)) {
        auto x = model.layers(model.embed(seq.tokens), 1, bundle.config().num_layers);
        picked.push_back(tape.pick(tape.log_softmax(model.logits(x)), seq.picks));
    }
    return combine_objective(tape, picked, objective).value().item();
}

TrainResult train_steering(const ModelBundle& bundle, const TrainConfig& cfg, const TaskDataset& data,
                           const TrainProgress& progress) {
    const auto& engine = bundle.config();
    cfg.validate(engine);
    data.validate(engine.vocab_size);
    check_objective(data, cfg.objective);

    TrainResult result{init_params(cfg, engine.hidden_dim, cfg.seed), {}, 0, false};
    const auto prepared = prepare(bundle, data, cfg.target_layer, cfg.trigger);
    // Preference records own two consecutive prepared sequences.
    const std::size_t per_record = data.is_preference() ? 2 : 1;
    const std::size_t records = data.size();
    const std::size_t batch = cfg.batch_size == 0 ? records : std::min<std::size_t>(cfg.batch_size, records);

    std::vector<std::size_t> order(records);
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5DEECE66Dull);
    std::size_t cursor = records;

    auto next_batch = [&]() {
        std::vector<Prepared> out;
        if (batch == records) return std::vector<Prepared>(prepared.begin(), prepared.end());
        for (std::size_t k = 0; k < batch; ++k) {
            if (cursor == records) {
                std::shuffle(order.begin(), order.end(), shuffle_rng);
                cursor = 0;
            }
            const auto rec = order[cursor++];
            for (std::size_t j = 0; j < per_record; ++j) out.push_back(prepared[rec * per_record + j]);
        }
        return out;
    };

    for (int step = 0;; ++step) {
        const auto current = next_batch();
        ad::GradTape tape;
        std::optional<SteeringLoss> loss;
        double value = 0.0;
        try {
            loss = loss_on_prepared(tape, bundle, result.params, cfg.target_layer, current, cfg.objective);
            value = loss->loss.value().item();
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::Domain) throw;
            fail(ErrorKind::Divergence, fmt::format("loss became non-finite at step {}: {}", step, e.what()));
        }
        if (!std::isfinite(value)) fail(ErrorKind::Divergence, fmt::format("loss became non-finite at step {}", step));
        result.loss_history.push_back(value);
        if (progress) progress(step, value);
        if (step >= cfg.max_steps) break;
        const auto& h = result.loss_history;
        if (h.size() > 50 && std::fabs(h.back() - h[h.size() - 51]) < 1e-6) {
            result.early_stopped = true;
            break;
        }

        ad::Gradients grads;
        try {
            grads = tape.backward(loss->loss);
        } catch (const Error& e) {
            if (e.kind() != ErrorKind::Domain) throw;
            fail(ErrorKind::Divergence, fmt::format("gradient became non-finite at step {}: {}", step, e.what()));
        }
        auto tensors = param_tensors(result.params);
        for (std::size_t i = 0; i < tensors.size(); ++i) {
            const auto g = grads[loss->params[i]].values();
            auto v = tensors[i].to_vector();
            for (std::size_t j = 0; j < v.size(); ++j) v[j] -= cfg.learning_rate * g[j];
            for (float x : v) {
                if (!std::isfinite(x)) fail(ErrorKind::Divergence, fmt::format("parameters diverged at step {}", step));
            }
            tensors[i] = Tensor(tensors[i].shape(), std::move(v));
        }
        result.params = with_tensors(result.params, tensors);
        ++result.steps;
    }
    return result;
}

SteeringVector make_learned_vector(std::string name, const TrainConfig& cfg, LearnedSteeringParams params) {
    SteeringVector v;
    v.name = std::move(name);
    v.method_id = cfg.method;
    v.source_layer = cfg.target_layer;
    v.payload = std::move(params);
    v.metadata["objective"] = std::string(to_string(cfg.objective));
    v.metadata["learning_rate"] = fmt::format("{}", cfg.learning_rate);
    v.metadata["max_steps"] = std::to_string(cfg.max_steps);
    v.metadata["seed"] = std::to_string(cfg.seed);
    if (cfg.method == "loreft") v.metadata["rank"] = std::to_string(cfg.rank);
    return v;
}

}  // namespace steerkit
