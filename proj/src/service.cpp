#include "steerkit/service.hpp"

#include <fmt/format.h>
#include <httplib.h>

#include <future>

#include "steerkit/error.hpp"
#include "steerkit/learning.hpp"
#include "steerkit/pipeline.hpp"
#include "steerkit/wire.hpp"

namespace steerkit {

namespace fs = std::filesystem;
using json = nlohmann::json;

// ---------------------------------------------------------------------------
// VectorStore

VectorStore::VectorStore(fs::path directory) : directory_(std::move(directory)) {}

bool VectorStore::valid_name(std::string_view name) {
    if (name.empty() || name.size() > 128) return false;
    for (char c : name) {
        const bool ok = (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') || (c >= '0' && c <= '9') || c == '_' ||
                        c == '-' || c == '.';
        if (!ok) return false;
    }
    return name.front() != '.';
}

void VectorStore::rescan() {
    std::map<std::string, std::shared_ptr<const SteeringVector>> found;
    std::vector<std::string> skipped;
    std::error_code ec;
    if (fs::is_directory(directory_, ec)) {
        for (const auto& entry : fs::directory_iterator(directory_, ec)) {
            if (!entry.is_regular_file() || entry.path().extension() != ".stwt") continue;
            const std::string name = entry.path().stem().string();
            if (!valid_name(name)) {
                skipped.push_back(entry.path().filename().string());
                continue;
            }
            try {
                SteeringVector v = load_vector(entry.path());
                v.name = name;
                found[name] = std::make_shared<const SteeringVector>(std::move(v));
            } catch (const std::exception&) {
                skipped.push_back(entry.path().filename().string());
            }
        }
    }
    std::unique_lock lock(mutex_);
    vectors_ = std::move(found);
    skipped_ = std::move(skipped);
}

std::vector<VectorInfo> VectorStore::list() const {
    std::shared_lock lock(mutex_);
    std::vector<VectorInfo> out;
    out.reserve(vectors_.size());
    for (const auto& [name, v] : vectors_) out.push_back(describe(*v));
    return out;
}

std::shared_ptr<const SteeringVector> VectorStore::find(const std::string& name) const {
    std::shared_lock lock(mutex_);
    auto it = vectors_.find(name);
    return it == vectors_.end() ? nullptr : it->second;
}

VectorInfo VectorStore::put(SteeringVector vector) {
    if (!valid_name(vector.name))
        throw Error(ErrorKind::Validation, fmt::format("invalid vector name '{}'", vector.name)).with_field("name");
    std::unique_lock lock(mutex_);
    fs::create_directories(directory_);
    save_vector(directory_ / (vector.name + ".stwt"), vector);
    auto stored = std::make_shared<const SteeringVector>(std::move(vector));
    vectors_[stored->name] = stored;
    return describe(*stored);
}

std::vector<std::string> VectorStore::skipped() const {
    std::shared_lock lock(mutex_);
    return skipped_;
}

VectorInfo describe(const SteeringVector& vector) {
    return {vector.name, vector.method_id, vector.source_layer, vector.dim(), vector.is_learned(), vector.metadata};
}

// ---------------------------------------------------------------------------
// WorkQueue

WorkQueue::WorkQueue(std::size_t limit) : limit_(limit), worker_([this] { run(); }) {}

WorkQueue::~WorkQueue() {
    {
        std::lock_guard lock(mutex_);
        stopping_ = true;
    }
    cv_.notify_all();
    worker_.join();
}

bool WorkQueue::submit(std::function<void()> task) {
    {
        std::lock_guard lock(mutex_);
        if (stopping_ || tasks_.size() >= limit_) return false;
        tasks_.push_back(std::move(task));
    }
    cv_.notify_one();
    return true;
}

std::size_t WorkQueue::waiting() const {
    std::lock_guard lock(mutex_);
    return tasks_.size();
}

void WorkQueue::run() {
    for (;;) {
        std::function<void()> task;
        {
            std::unique_lock lock(mutex_);
            cv_.wait(lock, [this] { return stopping_ || !tasks_.empty(); });
            // Drain what was accepted before shutting down.
            if (tasks_.empty()) return;
            task = std::move(tasks_.front());
            tasks_.pop_front();
        }
        try {
            task();
        } catch (...) {
        }
    }
}

std::string_view to_string(JobStatus status) {
    switch (status) {
        case JobStatus::running: return "running";
        case JobStatus::done: return "done";
        case JobStatus::error: return "error";
    }
    return "unknown";
}

// ---------------------------------------------------------------------------
// HTTP helpers

namespace {

json info_json(const VectorInfo& info) {
    return {{"name", info.name},     {"method_id", info.method_id}, {"layer", info.layer},
            {"dims", info.dims},     {"learned", info.learned},     {"metadata", info.metadata}};
}

int status_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::NotFound:
        case ErrorKind::Lookup: return 404;
        case ErrorKind::Busy: return 429;
        case ErrorKind::Io:
        case ErrorKind::Contract:
        case ErrorKind::Divergence:
        case ErrorKind::Optimization: return 500;
        default: return 400;
    }
}

void send_json(httplib::Response& res, int status, const json& body) {
    res.status = status;
    res.set_content(wire::dump_lossy(body), "application/json");
}

void send_error(httplib::Response& res, const Error& e) {
    json err = {{"kind", std::string(to_string(e.kind()))}, {"message", e.what()}};
    err["field"] = e.field().empty() ? json(nullptr) : json(e.field());
    send_json(res, status_for(e.kind()), {{"error", err}});
}

json parse_body(const httplib::Request& req) {
    json body = json::parse(req.body, nullptr, false);
    if (body.is_discarded())
        throw Error(ErrorKind::Validation, "request body is not valid JSON").with_field("body");
    if (!body.is_object()) throw Error(ErrorKind::Validation, "expected a JSON object").with_field("body");
    return body;
}

// Wraps a handler so library errors become structured JSON responses.
template <class F>
httplib::Server::Handler guarded(F f) {
    return [f = std::move(f)](const httplib::Request& req, httplib::Response& res) {
        try {
            f(req, res);
        } catch (const Error& e) {
            send_error(res, e);
        } catch (const std::exception& e) {
            send_error(res, Error(ErrorKind::Io, e.what()));
        }
    };
}

std::string sse(std::string_view event, const json& data) {
    return fmt::format("event: {}\ndata: {}\n\n", event, wire::dump_lossy(data));
}

// Single-producer queue of pre-formatted SSE frames.
class EventStream {
public:
    void push(std::string frame) {
        {
            std::lock_guard lock(mutex_);
            frames_.push_back(std::move(frame));
        }
        cv_.notify_all();
    }
    void close() {
        {
            std::lock_guard lock(mutex_);
            closed_ = true;
        }
        cv_.notify_all();
    }
    // Returns false once closed and drained.
    bool pop(std::string& out) {
        std::unique_lock lock(mutex_);
        cv_.wait(lock, [this] { return closed_ || !frames_.empty(); });
        if (frames_.empty()) return false;
        out = std::move(frames_.front());
        frames_.pop_front();
        return true;
    }

private:
    std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::string> frames_;
    bool closed_ = false;
};

double ms_between(Clock::time_point a, Clock::time_point b) {
    return std::chrono::duration<double, std::milli>(b - a).count();
}

}  // namespace

// ---------------------------------------------------------------------------
// Service

Service::Service(std::shared_ptr<const ModelBundle> bundle, ServiceOptions options)
    : bundle_(std::move(bundle)),
      options_(std::move(options)),
      vectors_(options_.vectors_dir),
      engine_(options_.queue_limit),
      jobs_(options_.queue_limit),
      server_(std::make_unique<httplib::Server>()) {
    vectors_.rescan();
    if (options_.sae_path) sae_ = load_sae(*options_.sae_path);
    install_routes();
}

Service::~Service() { stop(); }

int Service::start(const std::string& host, int port) {
    const int bound = port == 0 ? server_->bind_to_any_port(host) : (server_->bind_to_port(host, port) ? port : -1);
    if (bound < 0) fail(ErrorKind::Io, fmt::format("cannot bind {}:{}", host, port));
    server_thread_ = std::thread([this] { server_->listen_after_bind(); });
    server_->wait_until_ready();
    return bound;
}

void Service::listen(const std::string& host, int port) {
    if (!server_->listen(host, port)) fail(ErrorKind::Io, fmt::format("cannot listen on {}:{}", host, port));
}

void Service::stop() {
    if (server_) server_->stop();
    if (server_thread_.joinable()) server_thread_.join();
}

std::optional<TrainJob> Service::job(const std::string& id) const {
    std::lock_guard lock(jobs_mutex_);
    auto it = train_jobs_.find(id);
    if (it == train_jobs_.end()) return std::nullopt;
    return it->second;
}

fs::path Service::dataset_path(const std::string& name) const {
    if (!VectorStore::valid_name(name))
        throw Error(ErrorKind::Validation, fmt::format("invalid dataset name '{}'", name)).with_field("dataset");
    fs::path p = options_.datasets_dir / (name + ".tsv");
    if (!fs::is_regular_file(p))
        throw Error(ErrorKind::NotFound, fmt::format("unknown dataset '{}'", name)).with_field("dataset");
    return p;
}

void Service::install_routes() {
    auto& srv = *server_;
    srv.set_default_headers({{"Access-Control-Allow-Origin", "*"}});
    srv.Options(".*", [](const httplib::Request&, httplib::Response& res) {
        res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
        res.set_header("Access-Control-Allow-Headers", "Content-Type");
        res.status = 204;
    });

    srv.Get("/v1/health", guarded([this](const httplib::Request&, httplib::Response& res) {
                const auto& c = bundle_->config();
                send_json(res, 200,
                          {{"status", "ok"},
                           {"model",
                            {{"num_layers", c.num_layers},
                             {"hidden_dim", c.hidden_dim},
                             {"num_heads", c.num_heads},
                             {"vocab_size", c.vocab_size},
                             {"max_seq_len", c.max_seq_len},
                             {"fingerprint", fmt::format("{:016x}", weights_fingerprint(*bundle_))}}},
                           {"queue", {{"waiting", engine_.waiting()}, {"limit", engine_.limit()}}},
                           {"sae", sae_.has_value()}});
            }));

    srv.Get("/v1/vectors", guarded([this](const httplib::Request&, httplib::Response& res) {
                json list = json::array();
                for (const auto& info : vectors_.list()) list.push_back(info_json(info));
                send_json(res, 200, {{"vectors", list}, {"skipped", vectors_.skipped()}});
            }));

    srv.Get("/v1/datasets", guarded([this](const httplib::Request&, httplib::Response& res) {
                json list = json::array();
                std::error_code ec;
                std::vector<std::string> names;
                if (fs::is_directory(options_.datasets_dir, ec))
                    for (const auto& e : fs::directory_iterator(options_.datasets_dir, ec))
                        if (e.is_regular_file() && e.path().extension() == ".tsv") names.push_back(e.path().stem().string());
                std::sort(names.begin(), names.end());
                for (const auto& n : names) list.push_back(n);
                send_json(res, 200, {{"datasets", list}});
            }));

    srv.Post("/v1/generate", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const json body = parse_body(req);
                 wire::GenerateRequest gr =
                     wire::generate_request_from_json(body, [this](const std::string& n) { return vectors_.find(n); });
                 const EngineConfig& cfg = bundle_->config();
                 std::vector<int> prompt = byte_tokenize(gr.prompt);
                 if (gr.max_new_tokens < 1)
                     throw Error(ErrorKind::Validation, "max_new_tokens must be at least 1").with_field("max_new_tokens");
                 if (static_cast<long>(prompt.size()) + gr.max_new_tokens > cfg.max_seq_len)
                     throw Error(ErrorKind::Validation,
                                 fmt::format("prompt ({} tokens) plus max_new_tokens exceeds {}", prompt.size(),
                                             cfg.max_seq_len))
                         .with_field("max_new_tokens");

                 struct Channel {
                     std::string name;
                     WrappedModel model;
                 };
                 std::vector<Channel> channels;
                 if (gr.steering) {
                     try {
                         validate_request(*gr.steering, cfg);
                     } catch (const Error& e) {
                         Error copy = e;
                         copy.with_field(e.field().empty() ? "steering" : "steering." + e.field());
                         throw copy;
                     }
                     channels.push_back({"steered", WrappedModel(bundle_, build_steering_hook(cfg, *gr.steering))});
                     if (gr.compare_baseline) channels.push_back({"baseline", WrappedModel(bundle_)});
                 } else {
                     channels.push_back({"baseline", WrappedModel(bundle_)});
                 }

                 auto stream = std::make_shared<EventStream>();
                 auto task = [stream, channels = std::move(channels), prompt, gr]() {
                     json summary = json::object();
                     try {
                         for (const auto& ch : channels) {
                             GenerateOptions opts;
                             opts.max_new_tokens = gr.max_new_tokens;
                             opts.sampling = gr.sampling;
                             opts.on_token = [&](std::size_t, int token, int index) {
                                 const int one[] = {token};
                                 stream->push(sse("token", {{"channel", ch.name},
                                                            {"index", index},
                                                            {"token_id", token},
                                                            {"text", byte_detokenize(one)}}));
                             };
                             const GenerationResult r = ch.model.generate({prompt}, opts);
                             const auto& seq = r.sequences.front();
                             json info = {{"finish_reason", std::string(to_string(seq.finish_reason))},
                                          {"tokens", seq.token_ids.size()},
                                          {"text", byte_detokenize(seq.token_ids)}};
                             info["ftl_ms"] = seq.timestamps.empty() ? 0.0 : ms_between(r.start, seq.timestamps.front());
                             info["ttlt_s"] =
                                 seq.timestamps.empty() ? 0.0 : ms_between(r.start, seq.timestamps.back()) / 1000.0;
                             summary[ch.name] = info;
                         }
                         stream->push(sse("done", {{"channels", summary}}));
                     } catch (const Error& e) {
                         stream->push(sse("error", {{"kind", std::string(to_string(e.kind()))}, {"message", e.what()}}));
                     } catch (const std::exception& e) {
                         stream->push(sse("error", {{"kind", "io"}, {"message", e.what()}}));
                     }
                     stream->close();
                 };
                 if (!engine_.submit(std::move(task)))
                     throw Error(ErrorKind::Busy,
                                 fmt::format("generation queue is full ({} waiting)", engine_.limit()));

                 res.set_header("Cache-Control", "no-cache");
                 res.set_chunked_content_provider("text/event-stream", [stream](std::size_t, httplib::DataSink& sink) {
                     std::string frame;
                     if (!stream->pop(frame)) {
                         sink.done();
                         return true;
                     }
                     return sink.write(frame.data(), frame.size());
                 });
             }));

    srv.Post("/v1/extract", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const json body = parse_body(req);
                 ExtractSpec spec = wire::extract_spec_from_json(body);
                 spec.validate(bundle_->config());
                 if (!VectorStore::valid_name(spec.name))
                     throw Error(ErrorKind::Validation, fmt::format("invalid vector name '{}'", spec.name))
                         .with_field("name");
                 std::optional<ContrastivePairSet> data;
                 if (spec.needs_dataset()) {
                     const json* ds = body.contains("dataset") ? &body["dataset"] : nullptr;
                     if (!ds || !ds->is_string())
                         throw Error(ErrorKind::Validation, "dataset: required").with_field("dataset");
                     spec.dataset = ds->get<std::string>();
                     try {
                         data = load_contrastive_dataset(dataset_path(spec.dataset));
                     } catch (Error& e) {
                         if (e.field().empty()) e.with_field("dataset");
                         throw;
                     }
                 } else if (!sae_) {
                     throw Error(ErrorKind::NotFound, "no sparse autoencoder is loaded").with_field("method");
                 }

                 auto done = std::make_shared<std::promise<VectorInfo>>();
                 auto fut = done->get_future();
                 const bool queued = jobs_.submit([this, spec, data = std::move(data), done]() {
                     try {
                         SteeringVector v = run_extraction(bundle_, spec, data ? &*data : nullptr, sae_ ? &*sae_ : nullptr);
                         done->set_value(vectors_.put(std::move(v)));
                     } catch (...) {
                         done->set_exception(std::current_exception());
                     }
                 });
                 if (!queued) throw Error(ErrorKind::Busy, "job queue is full");
                 send_json(res, 201, {{"vector", info_json(fut.get())}});
             }));

    srv.Post("/v1/train", guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const json body = parse_body(req);
                 const TrainConfig cfg = wire::train_config_from_json(body);
                 cfg.validate(bundle_->config());
                 const json* nm = body.contains("name") ? &body["name"] : nullptr;
                 if (!nm || !nm->is_string() || !VectorStore::valid_name(nm->get<std::string>()))
                     throw Error(ErrorKind::Validation, "name: expected a vector name").with_field("name");
                 const std::string name = nm->get<std::string>();
                 const json* ds = body.contains("dataset") ? &body["dataset"] : nullptr;
                 if (!ds || !ds->is_string()) throw Error(ErrorKind::Validation, "dataset: required").with_field("dataset");
                 const DatasetKind kind = cfg.objective == Objective::contrastive_preference ? DatasetKind::preference
                                                                                             : DatasetKind::io;
                 TaskDataset data;
                 try {
                     data = load_task_dataset(dataset_path(ds->get<std::string>()), kind);
                     data.validate(bundle_->config().vocab_size);
                 } catch (Error& e) {
                     if (e.field().empty()) e.with_field("dataset");
                     throw;
                 }

                 std::string id;
                 {
                     std::lock_guard lock(jobs_mutex_);
                     id = fmt::format("job-{}", next_job_++);
                     TrainJob job;
                     job.id = id;
                     job.vector_name = name;
                     train_jobs_[id] = job;
                 }
                 const bool queued = jobs_.submit([this, id, name, cfg, data = std::move(data)]() {
                     auto update = [&](auto f) {
                         std::lock_guard lock(jobs_mutex_);
                         f(train_jobs_[id]);
                     };
                     try {
                         TrainResult r = train_steering(*bundle_, cfg, data, [&](int step, double loss) {
                             update([&](TrainJob& j) {
                                 j.step = step;
                                 j.loss = loss;
                                 j.history.push_back(loss);
                             });
                         });
                         SteeringVector v = make_learned_vector(name, cfg, std::move(r.params));
                         vectors_.put(std::move(v));
                         update([&](TrainJob& j) {
                             j.step = r.steps;
                             j.history = r.loss_history;
                             if (!r.loss_history.empty()) j.loss = r.loss_history.back();
                             j.status = JobStatus::done;
                         });
                     } catch (const std::exception& e) {
                         update([&](TrainJob& j) {
                             j.status = JobStatus::error;
                             j.error = e.what();
                         });
                     }
                 });
                 if (!queued) {
                     std::lock_guard lock(jobs_mutex_);
                     train_jobs_.erase(id);
                     throw Error(ErrorKind::Busy, "job queue is full");
                 }
                 send_json(res, 202, {{"job_id", id}, {"status", "running"}});
             }));

    srv.Get(R"(/v1/train/([A-Za-z0-9_-]+))", guarded([this](const httplib::Request& req, httplib::Response& res) {
                const std::string id = req.matches[1];
                const auto j = job(id);
                if (!j) throw Error(ErrorKind::NotFound, fmt::format("unknown job '{}'", id)).with_field("id");
                json out = {{"job_id", j->id},   {"status", std::string(to_string(j->status))},
                            {"step", j->step},   {"loss", j->loss},
                            {"history", j->history}, {"vector", j->vector_name}};
                out["error"] = j->error.empty() ? json(nullptr) : json(j->error);
                send_json(res, 200, out);
            }));
}

}  // namespace steerkit
