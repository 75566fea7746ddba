#include "steerkit/bench.hpp"

#include <algorithm>
#include <random>

#include <fmt/format.h>

#include "json.hpp"
#include "steerkit/error.hpp"
#include "steerkit/persistence.hpp"

namespace steerkit {

using json = nlohmann::json;

std::string_view to_string(BenchScenario scenario) {
    switch (scenario) {
        case BenchScenario::baseline: return "baseline";
        case BenchScenario::one_layer: return "one_layer";
        case BenchScenario::all_layers: return "all_layers";
        case BenchScenario::multi_vectors: return "multi_vectors";
    }
    return "unknown";
}

BenchScenario bench_scenario_from_string(std::string_view name) {
    for (auto s : {BenchScenario::baseline, BenchScenario::one_layer, BenchScenario::all_layers,
                   BenchScenario::multi_vectors})
        if (to_string(s) == name) return s;
    fail(ErrorKind::Validation,
         fmt::format("unknown benchmark scenario '{}' (baseline, one_layer, all_layers, multi_vectors)", name));
}

void BenchConfig::validate(const EngineConfig& engine) const {
    auto bad = [](std::string field, std::string msg) {
        throw Error(ErrorKind::Validation, field + ": " + msg).with_field(field);
    };
    if (repetitions < 3) bad("repetitions", "at least 3 repetitions are required");
    if (warmup_runs < 1) bad("warmup_runs", "at least one warmup run is required");
    if (batch_size < 1) bad("batch_size", "must be positive");
    if (max_tokens < 1) bad("max_tokens", "must be positive");
    if (prompts.empty()) bad("prompts", "prompt set is empty");
    for (std::size_t i = 0; i < prompts.size(); ++i) {
        if (prompts[i].empty()) bad(fmt::format("prompts[{}]", i), "prompt is empty");
        if (prompts[i].size() + static_cast<std::size_t>(max_tokens) > static_cast<std::size_t>(engine.max_seq_len))
            bad(fmt::format("prompts[{}]", i), "prompt plus max_tokens exceeds the context length");
    }
    if (scenario == BenchScenario::multi_vectors && num_vectors < 1) bad("num_vectors", "must be positive");
    if (layer < 0 || layer > engine.num_layers) bad("layer", fmt::format("must be in [0, {}]", engine.num_layers));
}

int BenchConfig::target_layer(const EngineConfig& engine) const {
    return layer > 0 ? layer : (engine.num_layers + 1) / 2;
}

std::vector<std::vector<int>> make_bench_prompts(const EngineConfig& engine, int count, int length,
                                                 std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_int_distribution<int> tok(0, std::min(engine.vocab_size, kEosToken) - 1);
    std::vector<std::vector<int>> out(count, std::vector<int>(length));
    for (auto& p : out)
        for (auto& t : p) t = tok(rng);
    return out;
}

SteerVectorRequest zero_vector_request(const EngineConfig& engine, const BenchConfig& cfg) {
    SteerVectorRequest request;
    if (cfg.scenario == BenchScenario::baseline) return request;
    const int count = cfg.scenario == BenchScenario::multi_vectors ? cfg.num_vectors : 1;
    for (int i = 0; i < count; ++i) {
        auto vec = std::make_shared<SteeringVector>();
        vec->name = fmt::format("zero_{}", i);
        vec->method_id = "direct_add";
        vec->source_layer = cfg.target_layer(engine);
        std::vector<float> values(static_cast<std::size_t>(engine.hidden_dim), 0.0f);
        if (cfg.vector_magnitude != 0.0f) {
            std::mt19937_64 rng(static_cast<std::uint64_t>(i) + 1);
            std::normal_distribution<float> normal(0.0f, 1.0f);
            for (auto& v : values) v = cfg.vector_magnitude * normal(rng);
        }
        vec->payload = Tensor::vector(std::move(values));
        VectorConfig vc;
        vc.vector = std::move(vec);
        vc.scale = 1.0f;
        if (cfg.scenario == BenchScenario::one_layer) vc.target_layers = std::set<int>{cfg.target_layer(engine)};
        request.configs.push_back(std::move(vc));
    }
    return request;
}

std::uint64_t prompt_fingerprint(const std::vector<std::vector<int>>& prompts) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xFF;
            h *= 1099511628211ull;
        }
    };
    for (const auto& p : prompts) {
        mix(p.size());
        for (int t : p) mix(static_cast<std::uint64_t>(t));
    }
    return h;
}

namespace {

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

using TokenStreams = std::vector<std::vector<int>>;

using Batches = std::vector<std::vector<std::vector<int>>>;

Batches split_batches(const BenchConfig& cfg) {
    Batches out;
    for (std::size_t begin = 0; begin < cfg.prompts.size(); begin += cfg.batch_size) {
        const std::size_t end = std::min(cfg.prompts.size(), begin + static_cast<std::size_t>(cfg.batch_size));
        out.emplace_back(cfg.prompts.begin() + begin, cfg.prompts.begin() + end);
    }
    return out;
}

struct CallTiming {
    double ftl_ms = 0.0;
    double ttlt_s = 0.0;
    std::size_t tokens = 0;
};

CallTiming run_call(const WrappedModel& model, const std::vector<std::vector<int>>& batch, int max_tokens,
                    TokenStreams& tokens_out) {
    using seconds = std::chrono::duration<double>;
    GenerateOptions opts;
    opts.max_new_tokens = max_tokens;
    const GenerationResult result = model.generate(batch, opts);
    Clock::time_point first = Clock::time_point::max(), last = result.start;
    CallTiming t;
    for (const auto& seq : result.sequences) {
        if (!seq.timestamps.empty()) {
            first = std::min(first, seq.timestamps.front());
            last = std::max(last, seq.timestamps.back());
        }
        t.tokens += seq.token_ids.size();
        tokens_out.push_back(seq.token_ids);
    }
    if (first == Clock::time_point::max()) first = last;
    t.ftl_ms = seconds(first - result.start).count() * 1e3;
    t.ttlt_s = seconds(last - result.start).count();
    return t;
}

struct ScenarioState {
    BenchConfig cfg;
    std::unique_ptr<WrappedModel> model;
    BenchReport report;
};

void verify(const ScenarioState& s, const TokenStreams& reference, const TokenStreams& got) {
    for (std::size_t i = 0; i < reference.size(); ++i) {
        if (got[i] != reference[i])
            fail(ErrorKind::Methodology,
                 fmt::format("scenario {}: zero-vector steering changed the tokens of prompt {}; timings are invalid",
                             to_string(s.cfg.scenario), i));
    }
}

void finalise(BenchReport& r) {
    std::vector<double> ftl, ttlt, tps;
    double total_time = 0.0;
    std::size_t total_tokens = 0;
    for (const auto& run : r.runs) {
        ftl.push_back(run.ftl_ms);
        ttlt.push_back(run.ttlt_s);
        tps.push_back(run.tps());
        total_time += run.ttlt_s;
        total_tokens += run.tokens;
    }
    r.ftl_ms = median(ftl);
    r.ttlt_s = median(ttlt);
    r.median_tps = median(tps);
    r.tps = total_time > 0 ? static_cast<double>(total_tokens) / total_time : 0.0;
}

}  // namespace

std::vector<BenchReport> run_benchmark_suite(std::shared_ptr<const ModelBundle> bundle, const BenchConfig& base,
                                             const std::vector<BenchScenario>& scenarios) {
    if (!bundle) fail(ErrorKind::Contract, "benchmark needs a model bundle");
    if (scenarios.empty()) fail(ErrorKind::Validation, "no benchmark scenarios given");
    const EngineConfig& engine = bundle->config();

    std::vector<ScenarioState> states;
    for (auto scenario : scenarios) {
        ScenarioState s;
        s.cfg = base;
        s.cfg.scenario = scenario;
        s.cfg.validate(engine);
        SteerVectorRequest request = zero_vector_request(engine, s.cfg);
        const int configs = static_cast<int>(request.configs.size());
        s.model = std::make_unique<WrappedModel>(
            bundle, configs == 0 ? InterceptionHook{} : build_steering_hook(engine, std::move(request)));
        auto& r = s.report;
        r.scenario = scenario;
        r.prompt_set = base.prompt_set;
        r.prompt_fingerprint = prompt_fingerprint(base.prompts);
        r.num_prompts = static_cast<int>(base.prompts.size());
        r.batch_size = base.batch_size;
        r.max_tokens = base.max_tokens;
        r.num_configs = configs;
        r.repetitions = base.repetitions;
        r.warmup_runs = base.warmup_runs;
        states.push_back(std::move(s));
    }

    const Batches batches = split_batches(base);
    const std::size_t n = states.size();

    // Reference token streams come from an untimed unsteered pass.
    TokenStreams reference;
    {
        WrappedModel plain(bundle);
        for (const auto& batch : batches) run_call(plain, batch, base.max_tokens, reference);
    }

    // A round is one pass per scenario. Scenarios take turns batch by batch,
    // and the turn order rotates with the round and batch index, so slow
    // drift in machine speed is spread evenly over the scenarios.
    auto round = [&](int r, bool measured) {
        std::vector<BenchRun> runs(n);
        std::vector<TokenStreams> got(n);
        for (std::size_t c = 0; c < batches.size(); ++c) {
            for (std::size_t k = 0; k < n; ++k) {
                const std::size_t i = (k + c + static_cast<std::size_t>(r)) % n;
                const CallTiming t = run_call(*states[i].model, batches[c], base.max_tokens, got[i]);
                runs[i].ftl_ms += t.ftl_ms / static_cast<double>(batches.size());
                runs[i].ttlt_s += t.ttlt_s;
                runs[i].tokens += t.tokens;
            }
        }
        for (std::size_t i = 0; i < n; ++i) {
            ++states[i].report.passes;
            verify(states[i], reference, got[i]);
            if (measured) states[i].report.runs.push_back(runs[i]);
        }
    };
    for (int w = 0; w < base.warmup_runs; ++w) round(w, false);
    for (int rep = 0; rep < base.repetitions; ++rep) round(rep, true);

    std::vector<BenchReport> reports;
    for (auto& s : states) {
        s.report.tokens_verified = true;
        finalise(s.report);
        reports.push_back(std::move(s.report));
    }
    return reports;
}

BenchReport run_benchmark(std::shared_ptr<const ModelBundle> bundle, const BenchConfig& cfg) {
    return run_benchmark_suite(std::move(bundle), cfg, {cfg.scenario}).front();
}

const ComparisonRow& BenchComparison::row(BenchScenario scenario) const {
    for (const auto& r : rows)
        if (r.scenario == scenario) return r;
    fail(ErrorKind::Lookup, fmt::format("comparison has no row for scenario {}", to_string(scenario)));
}

BenchComparison compare_reports(const std::vector<BenchReport>& reports) {
    if (reports.empty()) fail(ErrorKind::Comparability, "no reports to compare");
    const BenchReport* baseline = nullptr;
    for (const auto& r : reports)
        if (r.scenario == BenchScenario::baseline) {
            baseline = &r;
            break;
        }
    if (!baseline) fail(ErrorKind::Comparability, "report set has no baseline scenario");

    BenchComparison out;
    out.prompt_set = baseline->prompt_set;
    out.max_tokens = baseline->max_tokens;
    out.batch_size = baseline->batch_size;
    for (const auto& r : reports) {
        if (r.prompt_fingerprint != baseline->prompt_fingerprint || r.prompt_set != baseline->prompt_set)
            fail(ErrorKind::Comparability,
                 fmt::format("scenario {} used a different prompt set than the baseline", to_string(r.scenario)));
        if (r.max_tokens != baseline->max_tokens)
            fail(ErrorKind::Comparability, fmt::format("scenario {} used max_tokens {} but the baseline used {}",
                                                       to_string(r.scenario), r.max_tokens, baseline->max_tokens));
        if (r.batch_size != baseline->batch_size)
            fail(ErrorKind::Comparability, fmt::format("scenario {} used batch size {} but the baseline used {}",
                                                       to_string(r.scenario), r.batch_size, baseline->batch_size));
        ComparisonRow row;
        row.scenario = r.scenario;
        row.ftl_ms = r.ftl_ms;
        row.tps = r.tps;
        row.ttlt_s = r.ttlt_s;
        row.median_tps = r.median_tps;
        row.ratio_tps = r.tps / baseline->tps;
        row.ratio_ftl = r.ftl_ms / baseline->ftl_ms;
        row.ratio_ttlt = r.ttlt_s / baseline->ttlt_s;
        out.rows.push_back(row);
    }
    return out;
}

std::string BenchComparison::to_tsv() const {
    std::string out = "scenario\tftl_ms\ttps\tttlt_s\tratio_tps\n";
    for (const auto& r : rows)
        out += fmt::format("{}\t{:.6f}\t{:.6f}\t{:.6f}\t{:.6f}\n", to_string(r.scenario), r.ftl_ms, r.tps, r.ttlt_s,
                           r.ratio_tps);
    return out;
}

namespace {

json comparison_json(const BenchComparison& c) {
    json rows = json::array();
    for (const auto& r : c.rows)
        rows.push_back({{"scenario", to_string(r.scenario)},
                        {"ftl_ms", r.ftl_ms},
                        {"tps", r.tps},
                        {"ttlt_s", r.ttlt_s},
                        {"median_tps", r.median_tps},
                        {"ratio_tps", r.ratio_tps},
                        {"ratio_ftl", r.ratio_ftl},
                        {"ratio_ttlt", r.ratio_ttlt}});
    return {{"prompt_set", c.prompt_set}, {"max_tokens", c.max_tokens}, {"batch_size", c.batch_size}, {"rows", rows}};
}

json report_json(const BenchReport& r) {
    json runs = json::array();
    for (const auto& run : r.runs)
        runs.push_back({{"ftl_ms", run.ftl_ms}, {"ttlt_s", run.ttlt_s}, {"tokens", run.tokens}, {"tps", run.tps()}});
    return {{"scenario", to_string(r.scenario)},
            {"prompt_set", r.prompt_set},
            {"prompt_fingerprint", fmt::format("{:016x}", r.prompt_fingerprint)},
            {"num_prompts", r.num_prompts},
            {"batch_size", r.batch_size},
            {"max_tokens", r.max_tokens},
            {"num_configs", r.num_configs},
            {"repetitions", r.repetitions},
            {"warmup_runs", r.warmup_runs},
            {"passes", r.passes},
            {"ftl_ms", r.ftl_ms},
            {"ttlt_s", r.ttlt_s},
            {"tps", r.tps},
            {"median_tps", r.median_tps},
            {"tokens_verified", r.tokens_verified},
            {"tps_counts", "generated tokens only"},
            {"runs", runs}};
}

}  // namespace

std::string BenchComparison::to_json() const { return comparison_json(*this).dump(2); }

std::string reports_to_json(const std::vector<BenchReport>& reports) {
    json arr = json::array();
    for (const auto& r : reports) arr.push_back(report_json(r));
    return arr.dump(2);
}

void write_bench_outputs(const std::filesystem::path& path, const BenchComparison& comparison,
                         const std::vector<BenchReport>& reports) {
    json doc = comparison_json(comparison);
    doc["reports"] = json::array();
    for (const auto& r : reports) doc["reports"].push_back(report_json(r));
    write_text_file_atomic(path, comparison.to_tsv());
    std::filesystem::path json_path = path;
    json_path += ".json";
    write_text_file_atomic(json_path, doc.dump(2) + "\n");
}

}  // namespace steerkit
