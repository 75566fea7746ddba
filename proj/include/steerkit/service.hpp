#pragma once

#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <vector>

#include "steerkit/extraction.hpp"
#include "steerkit/model.hpp"
#include "steerkit/persistence.hpp"
#include "steerkit/steering.hpp"

namespace httplib {
class Server;
}

namespace steerkit {

struct VectorInfo {
    std::string name;
    std::string method_id;
    int layer = 0;
    int dims = 0;
    bool learned = false;
    std::map<std::string, std::string> metadata;
};

// A directory of steering-vector container files. A vector's name is its
// file stem; files that fail to load are skipped on scan.
class VectorStore {
public:
    explicit VectorStore(std::filesystem::path directory);

    const std::filesystem::path& directory() const { return directory_; }
    void rescan();
    std::vector<VectorInfo> list() const;
    std::shared_ptr<const SteeringVector> find(const std::string& name) const;
    // Writes <name>.stwt, replacing any vector of the same name.
    VectorInfo put(SteeringVector vector);
    std::vector<std::string> skipped() const;

    static bool valid_name(std::string_view name);

private:
    std::filesystem::path directory_;
    mutable std::shared_mutex mutex_;
    std::map<std::string, std::shared_ptr<const SteeringVector>> vectors_;
    std::vector<std::string> skipped_;
};

VectorInfo describe(const SteeringVector& vector);

// FIFO executor on one worker thread. submit() refuses work once `limit`
// tasks are waiting (the running task does not count).
class WorkQueue {
public:
    explicit WorkQueue(std::size_t limit);
    ~WorkQueue();
    WorkQueue(const WorkQueue&) = delete;
    WorkQueue& operator=(const WorkQueue&) = delete;

    bool submit(std::function<void()> task);
    std::size_t waiting() const;
    std::size_t limit() const { return limit_; }

private:
    void run();

    std::size_t limit_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<std::function<void()>> tasks_;
    bool stopping_ = false;
    std::thread worker_;
};

enum class JobStatus { running, done, error };

std::string_view to_string(JobStatus status);

struct TrainJob {
    std::string id;
    std::string vector_name;
    JobStatus status = JobStatus::running;
    int step = 0;
    double loss = 0.0;
    std::vector<double> history;
    std::string error;
};

struct ServiceOptions {
    std::filesystem::path vectors_dir = "vectors";
    std::filesystem::path datasets_dir = "data";
    std::optional<std::filesystem::path> sae_path;
    std::size_t queue_limit = 8;
};

// HTTP front end over one model. Generation runs on a single engine worker
// behind a bounded queue; extraction and training share a second worker.
class Service {
public:
    Service(std::shared_ptr<const ModelBundle> bundle, ServiceOptions options);
    ~Service();

    // Binds and serves on a background thread; port 0 picks a free port.
    // Returns the bound port.
    int start(const std::string& host = "127.0.0.1", int port = 0);
    // Blocks serving on the calling thread.
    void listen(const std::string& host, int port);
    void stop();

    VectorStore& vectors() { return vectors_; }
    WorkQueue& engine_queue() { return engine_; }
    std::optional<TrainJob> job(const std::string& id) const;
    std::filesystem::path dataset_path(const std::string& name) const;

private:
    void install_routes();

    std::shared_ptr<const ModelBundle> bundle_;
    ServiceOptions options_;
    VectorStore vectors_;
    std::optional<SaeWeights> sae_;

    mutable std::mutex jobs_mutex_;
    std::map<std::string, TrainJob> train_jobs_;
    int next_job_ = 1;

    // Declared after everything their tasks touch, so they are joined first.
    WorkQueue engine_;
    WorkQueue jobs_;
    std::unique_ptr<httplib::Server> server_;
    std::thread server_thread_;
};

}  // namespace steerkit
