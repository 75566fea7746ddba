#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"

namespace steerkit {

enum class BenchScenario { baseline, one_layer, all_layers, multi_vectors };

std::string_view to_string(BenchScenario scenario);
BenchScenario bench_scenario_from_string(std::string_view name);

struct BenchConfig {
    BenchScenario scenario = BenchScenario::baseline;
    int num_vectors = 3;  // multi_vectors only
    int layer = 0;        // one_layer target; 0 picks the middle layer
    int batch_size = 16;
    int max_tokens = 128;
    std::string prompt_set = "random";
    std::vector<std::vector<int>> prompts;
    int repetitions = 3;
    int warmup_runs = 1;
    // Steering vectors are seeded normal draws times this magnitude. Timings
    // are only trusted at 0, where the token streams must match the
    // unsteered run.
    float vector_magnitude = 0.0f;

    void validate(const EngineConfig& engine) const;
    int target_layer(const EngineConfig& engine) const;
};

// Random prompts that avoid the end-of-sequence id.
std::vector<std::vector<int>> make_bench_prompts(const EngineConfig& engine, int count, int length,
                                                 std::uint64_t seed);

// The steering request used for a scenario (zero vectors unless
// vector_magnitude is set); empty for baseline.
SteerVectorRequest zero_vector_request(const EngineConfig& engine, const BenchConfig& cfg);

// One pass over the whole prompt set, split into generate() calls of
// batch_size prompts. Times are measured from the entry of each call.
struct BenchRun {
    double ftl_ms = 0.0;   // mean over calls of first-token latency
    double ttlt_s = 0.0;   // sum over calls of time to last token
    std::size_t tokens = 0;
    double tps() const { return ttlt_s > 0 ? static_cast<double>(tokens) / ttlt_s : 0.0; }
};

struct BenchReport {
    BenchScenario scenario = BenchScenario::baseline;
    std::string prompt_set;
    std::uint64_t prompt_fingerprint = 0;
    int num_prompts = 0;
    int batch_size = 0;
    int max_tokens = 0;
    int num_configs = 0;
    int repetitions = 0;
    int warmup_runs = 0;
    int passes = 0;  // generation passes run for this scenario, warmup included

    double ftl_ms = 0.0;      // median
    double ttlt_s = 0.0;      // median
    double tps = 0.0;         // total generated tokens / total generation time
    double median_tps = 0.0;  // median of per-pass throughput
    std::vector<BenchRun> runs;
    bool tokens_verified = false;

    std::size_t tokens_per_pass() const { return runs.empty() ? 0 : runs.front().tokens; }
};

std::uint64_t prompt_fingerprint(const std::vector<std::vector<int>>& prompts);

// Runs one scenario. Steered scenarios are checked against an untimed
// unsteered pass; any token difference is a Methodology error.
BenchReport run_benchmark(std::shared_ptr<const ModelBundle> bundle, const BenchConfig& cfg);

// Runs several scenarios over the same prompts, interleaved call by call.
// `base` supplies everything except the scenario.
std::vector<BenchReport> run_benchmark_suite(std::shared_ptr<const ModelBundle> bundle, const BenchConfig& base,
                                             const std::vector<BenchScenario>& scenarios);

struct ComparisonRow {
    BenchScenario scenario = BenchScenario::baseline;
    double ftl_ms = 0.0;
    double tps = 0.0;
    double ttlt_s = 0.0;
    double median_tps = 0.0;
    double ratio_tps = 1.0;
    double ratio_ftl = 1.0;
    double ratio_ttlt = 1.0;
};

struct BenchComparison {
    std::string prompt_set;
    int max_tokens = 0;
    int batch_size = 0;
    std::vector<ComparisonRow> rows;

    const ComparisonRow& row(BenchScenario scenario) const;
    std::string to_tsv() const;
    std::string to_json() const;
};

// Ratios are taken against the baseline report, which must be present.
BenchComparison compare_reports(const std::vector<BenchReport>& reports);

// Writes the TSV table to `path` and the JSON document to `path` + ".json".
void write_bench_outputs(const std::filesystem::path& path, const BenchComparison& comparison,
                         const std::vector<BenchReport>& reports);

std::string reports_to_json(const std::vector<BenchReport>& reports);

}  // namespace steerkit
