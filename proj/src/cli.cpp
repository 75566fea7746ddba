#include "steerkit/cli.hpp"

#include <fmt/format.h>
#include <signal.h>

#include <CLI11.hpp>
#include <charconv>
#include <optional>

#include "json.hpp"
#include "steerkit/bench.hpp"
#include "steerkit/error.hpp"
#include "steerkit/learning.hpp"
#include "steerkit/persistence.hpp"
#include "steerkit/pipeline.hpp"
#include "steerkit/service.hpp"
#include "steerkit/wire.hpp"

namespace steerkit {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kOk = 0;
constexpr int kUsage = 1;
constexpr int kRuntime = 2;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Validation:
        case ErrorKind::Config:
        case ErrorKind::Domain:
        case ErrorKind::Index:
        case ErrorKind::Dimension:
        case ErrorKind::Resolution:
        case ErrorKind::Lookup:
        case ErrorKind::NotFound:
        case ErrorKind::Registration:
            return kUsage;
        default:
            return kRuntime;
    }
}

[[noreturn]] void bad_flag(const std::string& flag, const std::string& message) {
    throw Error(ErrorKind::Validation, fmt::format("{}: {}", flag, message)).with_field(flag);
}

std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
    std::vector<int> out;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        const std::size_t comma = std::min(text.find(',', pos), text.size());
        const std::string_view item(text.data() + pos, comma - pos);
        int value = 0;
        const auto [end, ec] = std::from_chars(item.data(), item.data() + item.size(), value);
        if (item.empty() || ec != std::errc() || end != item.data() + item.size())
            bad_flag(flag, fmt::format("expected a comma-separated list of integers, got '{}'", text));
        out.push_back(value);
        pos = comma + 1;
    }
    return out;
}

PositionSelector parse_positions(const std::string& text) {
    if (text == "final") return PositionSelector::final_token();
    if (text == "all") return PositionSelector::all();
    return PositionSelector::at(parse_int_list(text, "--positions"));
}

std::shared_ptr<const ModelBundle> open_model(const std::string& path) {
    return std::make_shared<const ModelBundle>(load_model(path));
}

struct ModelFlag {
    std::string path;

    void add(CLI::App* cmd) {
        cmd->add_option("--model,-m", path, "Model container (default: $STEERKIT_MODEL)")
            ->envname("STEERKIT_MODEL")
            ->required();
    }
};

// ---------------------------------------------------------------------------

struct ExtractArgs {
    ModelFlag model;
    ExtractSpec spec;
    std::string dataset;
    std::string positions = "final";
    std::string sae;
    std::string vectors_dir = "vectors";
};

int run_extract(const ExtractArgs& a, std::ostream& out) {
    ExtractSpec spec = a.spec;
    spec.positions = parse_positions(a.positions);
    if (!VectorStore::valid_name(spec.name)) bad_flag("--name", fmt::format("invalid vector name '{}'", spec.name));
    auto bundle = open_model(a.model.path);
    spec.validate(bundle->config());

    std::optional<ContrastivePairSet> data;
    if (spec.needs_dataset()) {
        if (a.dataset.empty()) bad_flag("--dataset", "required for this method");
        data = load_contrastive_dataset(a.dataset);
        spec.dataset = fs::path(a.dataset).stem().string();
    }
    std::optional<SaeWeights> sae;
    if (!a.sae.empty()) sae = load_sae(a.sae);

    VectorStore store(a.vectors_dir);
    const VectorInfo info =
        store.put(run_extraction(bundle, spec, data ? &*data : nullptr, sae ? &*sae : nullptr));
    out << fmt::format("{}\t{}\tlayer {}\t{} dims\t{}\n", info.name, info.method_id, info.layer, info.dims,
                       (store.directory() / (info.name + ".stwt")).string());
    return kOk;
}

// ---------------------------------------------------------------------------

struct TrainArgs {
    ModelFlag model;
    TrainConfig cfg;
    std::string objective = "next_token_cross_entropy";
    std::string name;
    std::string dataset;
    std::string vectors_dir = "vectors";
    bool quiet = false;
};

int run_train(const TrainArgs& a, std::ostream& out, std::ostream& err) {
    TrainConfig cfg = a.cfg;
    cfg.objective = wire::objective_from_string(a.objective);
    if (!VectorStore::valid_name(a.name)) bad_flag("--name", fmt::format("invalid vector name '{}'", a.name));
    auto bundle = open_model(a.model.path);
    cfg.validate(bundle->config());
    const DatasetKind kind =
        cfg.objective == Objective::contrastive_preference ? DatasetKind::preference : DatasetKind::io;
    const TaskDataset data = load_task_dataset(a.dataset, kind);
    data.validate(bundle->config().vocab_size);

    const int every = std::max(1, cfg.max_steps / 10);
    TrainResult r = train_steering(*bundle, cfg, data, [&](int step, double loss) {
        if (!a.quiet && (step % every == 0 || step == cfg.max_steps)) err << fmt::format("step {} loss {:.6f}\n", step, loss);
    });
    SteeringVector v = make_learned_vector(a.name, cfg, std::move(r.params));
    v.metadata["dataset"] = fs::path(a.dataset).stem().string();
    VectorStore store(a.vectors_dir);
    const VectorInfo info = store.put(std::move(v));
    const double first = r.loss_history.empty() ? 0.0 : r.loss_history.front();
    const double last = r.loss_history.empty() ? 0.0 : r.loss_history.back();
    out << fmt::format("{}\t{}\tlayer {}\tsteps {}\tloss {:.6f} -> {:.6f}{}\n", info.name, info.method_id, info.layer,
                       r.steps, first, last, r.early_stopped ? "\tearly stop" : "");
    return kOk;
}

// ---------------------------------------------------------------------------

struct GenerateArgs {
    ModelFlag model;
    std::string prompt;
    int max_tokens = 32;
    std::vector<std::string> steer;
    std::vector<float> alpha;
    std::string layers = "all";
    std::vector<int> trigger_tokens;
    std::vector<int> priority;
    std::string policy = "additive_superposition";
    bool compare = false;
    int top_k = 0;
    std::uint64_t seed = 0;
    std::string vectors_dir = "vectors";
    bool as_json = false;
};

SteerVectorRequest build_request(const GenerateArgs& a, const VectorStore& store) {
    if (!a.alpha.empty() && a.alpha.size() != 1 && a.alpha.size() != a.steer.size())
        bad_flag("--alpha", "give one value, or one per --steer");
    if (!a.priority.empty() && a.priority.size() != a.steer.size())
        bad_flag("--priority", "give one value per --steer");
    SteerVectorRequest req;
    req.policy = wire::policy_from_string(a.policy);
    std::optional<std::set<int>> layers;
    if (a.layers != "all") {
        const auto list = parse_int_list(a.layers, "--layers");
        layers = std::set<int>(list.begin(), list.end());
    }
    for (std::size_t i = 0; i < a.steer.size(); ++i) {
        VectorConfig c;
        c.vector = store.find(a.steer[i]);
        if (!c.vector)
            throw Error(ErrorKind::NotFound,
                        fmt::format("unknown vector '{}' in {}", a.steer[i], store.directory().string()))
                .with_field("--steer");
        c.scale = a.alpha.empty() ? 1.0f : a.alpha[a.alpha.size() == 1 ? 0 : i];
        c.target_layers = layers;
        if (!a.priority.empty()) c.priority = a.priority[i];
        if (!a.trigger_tokens.empty()) c.trigger.token_ids = std::set<int>(a.trigger_tokens.begin(), a.trigger_tokens.end());
        req.configs.push_back(std::move(c));
    }
    return req;
}

int run_generate(const GenerateArgs& a, std::ostream& out) {
    if (a.prompt.empty()) bad_flag("--prompt", "must not be empty");
    if (a.prompt.find('\xFF') != std::string::npos) bad_flag("--prompt", "byte 0xFF is reserved");
    if (a.max_tokens < 1) bad_flag("--max-tokens", "must be at least 1");
    if (a.steer.empty() && (a.compare || !a.alpha.empty() || !a.trigger_tokens.empty()))
        bad_flag("--steer", "steering flags need at least one --steer vector");

    auto bundle = open_model(a.model.path);
    const EngineConfig& cfg = bundle->config();
    const std::vector<int> prompt = byte_tokenize(a.prompt);
    if (static_cast<long>(prompt.size()) + a.max_tokens > cfg.max_seq_len)
        bad_flag("--max-tokens", fmt::format("prompt plus new tokens exceeds {}", cfg.max_seq_len));

    GenerateOptions opts;
    opts.max_new_tokens = a.max_tokens;
    if (a.top_k > 0) opts.sampling = Sampling::seeded_top_k(a.top_k, a.seed);

    std::vector<std::pair<std::string, WrappedModel>> channels;
    if (!a.steer.empty()) {
        VectorStore store(a.vectors_dir);
        store.rescan();
        SteerVectorRequest req = build_request(a, store);
        validate_request(req, cfg);
        channels.emplace_back("steered", WrappedModel(bundle, build_steering_hook(cfg, std::move(req))));
    }
    if (a.steer.empty() || a.compare) channels.emplace_back("baseline", WrappedModel(bundle));

    json doc = json::object();
    for (const auto& [name, model] : channels) {
        const auto seq = model.generate({prompt}, opts).sequences.front();
        const std::string text = byte_detokenize(seq.token_ids);
        if (a.as_json) {
            doc[name] = {{"token_ids", seq.token_ids},
                         {"text", text},
                         {"finish_reason", std::string(to_string(seq.finish_reason))}};
        } else if (channels.size() > 1) {
            out << name << ": " << text << '\n';
        } else {
            out << text << '\n';
        }
    }
    if (a.as_json) out << wire::dump_lossy(doc) << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------

struct ServeArgs {
    ModelFlag model;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::string vectors_dir = "vectors";
    std::string datasets_dir = "data";
    std::string sae;
    std::size_t queue_limit = 8;
};

int run_serve(const ServeArgs& a, std::ostream& out) {
    ServiceOptions opts;
    opts.vectors_dir = a.vectors_dir;
    opts.datasets_dir = a.datasets_dir;
    opts.queue_limit = a.queue_limit;
    if (!a.sae.empty()) opts.sae_path = a.sae;
    if (a.queue_limit < 1) bad_flag("--queue-limit", "must be at least 1");

    // Block the stop signals before any thread starts so only sigwait sees them.
    sigset_t stop_signals;
    sigemptyset(&stop_signals);
    sigaddset(&stop_signals, SIGINT);
    sigaddset(&stop_signals, SIGTERM);
    pthread_sigmask(SIG_BLOCK, &stop_signals, nullptr);

    Service service(open_model(a.model.path), opts);
    const int port = service.start(a.host, a.port);
    out << fmt::format("serving on http://{}:{} ({} vectors)\n", a.host, port, service.vectors().list().size())
        << std::flush;
    int sig = 0;
    sigwait(&stop_signals, &sig);
    service.stop();
    return kOk;
}

// ---------------------------------------------------------------------------

struct BenchArgs {
    ModelFlag model;
    std::vector<std::string> scenarios;
    std::string bench_out;
    int prompts = 32;
    int prompt_length = 16;
    std::uint64_t seed = 1;
    BenchConfig cfg;
};

int run_bench(const BenchArgs& a, std::ostream& out, std::ostream& err) {
    std::vector<BenchScenario> scenarios;
    auto add = [&](BenchScenario s) {
        if (std::find(scenarios.begin(), scenarios.end(), s) == scenarios.end()) scenarios.push_back(s);
    };
    // Ratios are relative to the baseline, so it always runs.
    add(BenchScenario::baseline);
    for (const auto& name : a.scenarios) {
        if (name == "all") {
            for (auto s : {BenchScenario::one_layer, BenchScenario::all_layers, BenchScenario::multi_vectors}) add(s);
            continue;
        }
        try {
            add(bench_scenario_from_string(name));
        } catch (Error& e) {
            e.with_field("--scenario");
            throw;
        }
    }
    if (a.scenarios.empty())
        for (auto s : {BenchScenario::one_layer, BenchScenario::all_layers, BenchScenario::multi_vectors}) add(s);
    if (a.prompts < 1) bad_flag("--prompts", "must be at least 1");
    if (a.prompt_length < 1) bad_flag("--prompt-length", "must be at least 1");

    auto bundle = open_model(a.model.path);
    BenchConfig cfg = a.cfg;
    cfg.prompts = make_bench_prompts(bundle->config(), a.prompts, a.prompt_length, a.seed);
    cfg.prompt_set = fmt::format("random-{}x{}-seed{}", a.prompts, a.prompt_length, a.seed);
    cfg.validate(bundle->config());

    err << fmt::format("benchmarking {} scenarios: {} prompts x {} tokens, batch {}, {} repetitions + {} warmup\n",
                       scenarios.size(), a.prompts, cfg.max_tokens, cfg.batch_size, cfg.repetitions, cfg.warmup_runs);
    const auto reports = run_benchmark_suite(bundle, cfg, scenarios);
    const BenchComparison cmp = compare_reports(reports);
    out << cmp.to_tsv();
    if (!a.bench_out.empty()) {
        write_bench_outputs(a.bench_out, cmp, reports);
        err << fmt::format("wrote {} and {}.json\n", a.bench_out, a.bench_out);
    }
    return kOk;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"steerkit: activation steering for a compact transformer", "steerkit"};
    app.require_subcommand(1, 1);

    ExtractArgs ex;
    auto* extract = app.add_subcommand("extract", "Extract a steering vector from contrastive pairs or an SAE");
    ex.model.add(extract);
    extract->add_option("--name", ex.spec.name, "Name of the stored vector")->required();
    extract->add_option("--method", ex.spec.method, "caa | pca_center | pca_diff | linear_probe | sae")
        ->capture_default_str();
    extract->add_option("--layer", ex.spec.layer, "Decoder layer (1-based)")->capture_default_str();
    extract->add_option("--dataset", ex.dataset, "Contrastive TSV file (positive<TAB>negative)");
    extract->add_option("--positions", ex.positions, "final | all | comma-separated positions")->capture_default_str();
    extract->add_option("--sae", ex.sae, "SAE container (method sae)");
    extract->add_option("--feature", ex.spec.feature, "SAE feature index");
    extract->add_option("--query", ex.spec.query, "SAE feature label search");
    extract->add_option("--vectors-dir", ex.vectors_dir, "Vector store directory")->capture_default_str();

    TrainArgs tr;
    auto* train = app.add_subcommand("train", "Train a learned steering intervention");
    tr.model.add(train);
    train->add_option("--name", tr.name, "Name of the stored vector")->required();
    train->add_option("--dataset", tr.dataset, "TSV file: prompt<TAB>target, or prompt<TAB>preferred<TAB>dispreferred")
        ->required();
    train->add_option("--method", tr.cfg.method, "sav | lmsteer | loreft")->capture_default_str();
    train->add_option("--layer", tr.cfg.target_layer, "Target layer (1-based)")->capture_default_str();
    train->add_option("--rank", tr.cfg.rank, "LoReFT rank")->capture_default_str();
    train->add_option("--epsilon", tr.cfg.epsilon, "LM-Steer epsilon")->capture_default_str();
    train->add_option("--lr", tr.cfg.learning_rate, "Learning rate")->capture_default_str();
    train->add_option("--steps", tr.cfg.max_steps, "Maximum optimisation steps")->capture_default_str();
    train->add_option("--batch-size", tr.cfg.batch_size, "Minibatch size, 0 for full batch")->capture_default_str();
    train->add_option("--seed", tr.cfg.seed, "Seed for initialisation and batching")->capture_default_str();
    train->add_option("--objective", tr.objective, "next_token_cross_entropy | contrastive_preference")
        ->capture_default_str();
    train->add_option("--vectors-dir", tr.vectors_dir, "Vector store directory")->capture_default_str();
    train->add_flag("--quiet,-q", tr.quiet, "Do not print progress");

    GenerateArgs gen;
    auto* generate = app.add_subcommand("generate", "Generate text, optionally steered");
    gen.model.add(generate);
    generate->add_option("--prompt,-p", gen.prompt, "Prompt text")->required();
    generate->add_option("--max-tokens,-n", gen.max_tokens, "New tokens to generate")->capture_default_str();
    generate->add_option("--steer", gen.steer, "Stored vector name (repeatable)");
    generate->add_option("--alpha", gen.alpha, "Steering scale, one overall or one per --steer")
        ->allow_extra_args(false);
    generate->add_option("--layers", gen.layers, "all | comma-separated layers")->capture_default_str();
    generate->add_option("--trigger-token", gen.trigger_tokens, "Only steer at these token ids (repeatable)")
        ->allow_extra_args(false);
    generate->add_option("--priority", gen.priority, "Priority per --steer")->allow_extra_args(false);
    generate->add_option("--policy", gen.policy, "additive_superposition | priority_select")->capture_default_str();
    generate->add_flag("--compare", gen.compare, "Also print the unsteered generation");
    generate->add_option("--top-k", gen.top_k, "Sample from the top k tokens (0 is greedy)")->capture_default_str();
    generate->add_option("--seed", gen.seed, "Sampling seed")->capture_default_str();
    generate->add_option("--vectors-dir", gen.vectors_dir, "Vector store directory")->capture_default_str();
    generate->add_flag("--json", gen.as_json, "Print token ids and text as JSON");
    generate->get_option("--steer")->allow_extra_args(false);

    ServeArgs sv;
    auto* serve = app.add_subcommand("serve", "Run the HTTP service");
    sv.model.add(serve);
    serve->add_option("--host", sv.host, "Bind address")->capture_default_str();
    serve->add_option("--port", sv.port, "Port, 0 for any free port")->capture_default_str();
    serve->add_option("--vectors-dir", sv.vectors_dir, "Vector store directory")->capture_default_str();
    serve->add_option("--datasets-dir", sv.datasets_dir, "Directory of <name>.tsv datasets")->capture_default_str();
    serve->add_option("--sae", sv.sae, "SAE container for feature extraction");
    serve->add_option("--queue-limit", sv.queue_limit, "Waiting generation requests before 429")->capture_default_str();

    BenchArgs bn;
    auto* bench = app.add_subcommand("bench", "Measure steering overhead with zero-valued vectors");
    bn.model.add(bench);
    bench->add_option("--scenario", bn.scenarios, "baseline | one_layer | all_layers | multi_vectors | all (repeatable)")
        ->allow_extra_args(false);
    bench->add_option("--bench-out", bn.bench_out, "Write the TSV table here and JSON to <path>.json");
    bench->add_option("--prompts", bn.prompts, "Number of random prompts")->capture_default_str();
    bench->add_option("--prompt-length", bn.prompt_length, "Tokens per prompt")->capture_default_str();
    bench->add_option("--seed", bn.seed, "Prompt seed")->capture_default_str();
    bench->add_option("--batch-size", bn.cfg.batch_size, "Prompts per generate call")->capture_default_str();
    bench->add_option("--max-tokens", bn.cfg.max_tokens, "New tokens per prompt")->capture_default_str();
    bench->add_option("--repetitions", bn.cfg.repetitions, "Timed passes")->capture_default_str();
    bench->add_option("--warmup", bn.cfg.warmup_runs, "Untimed warmup passes")->capture_default_str();
    bench->add_option("--num-vectors", bn.cfg.num_vectors, "Vectors in multi_vectors")->capture_default_str();
    bench->add_option("--layer", bn.cfg.layer, "one_layer target, 0 for the middle layer")->capture_default_str();

    try {
        app.parse(argc, const_cast<char**>(argv));
    } catch (const CLI::ParseError& e) {
        if (e.get_exit_code() == static_cast<int>(CLI::ExitCodes::Success)) {
            app.exit(e, out, err);
            return kOk;
        }
        err << "error: " << e.what() << "\n\n";
        const CLI::App* where = &app;
        for (auto* sub : app.get_subcommands()) where = sub;
        err << where->help();
        return kUsage;
    }

    try {
        if (*extract) return run_extract(ex, out);
        if (*train) return run_train(tr, out, err);
        if (*generate) return run_generate(gen, out);
        if (*serve) return run_serve(sv, out);
        return run_bench(bn, out, err);
    } catch (const Error& e) {
        err << "error: " << e.what() << '\n';
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kRuntime;
    }
}

}  // namespace steerkit
