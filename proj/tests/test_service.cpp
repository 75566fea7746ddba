#include <gtest/gtest.h>
#include <httplib.h>

#include <chrono>
#include <fstream>
#include <future>
#include <thread>

#include "json.hpp"
#include "steerkit/error.hpp"
#include "steerkit/persistence.hpp"
#include "steerkit/service.hpp"
#include "test_util.hpp"

using namespace steerkit;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct SseEvent {
    std::string event;
    json data;
};

std::vector<SseEvent> parse_sse(const std::string& body) {
    std::vector<SseEvent> out;
    std::size_t pos = 0;
    while (pos < body.size()) {
        const std::size_t end = body.find("\n\n", pos);
        const std::string frame = body.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
        pos = end == std::string::npos ? body.size() : end + 2;
        SseEvent ev;
        std::istringstream lines(frame);
        for (std::string line; std::getline(lines, line);) {
            if (line.rfind("event: ", 0) == 0) ev.event = line.substr(7);
            if (line.rfind("data: ", 0) == 0) ev.data = json::parse(line.substr(6));
        }
        if (!ev.event.empty()) out.push_back(std::move(ev));
    }
    return out;
}

std::vector<int> channel_tokens(const std::vector<SseEvent>& events, const std::string& channel) {
    std::vector<int> ids;
    for (const auto& e : events)
        if (e.event == "token" && e.data["channel"] == channel) ids.push_back(e.data["token_id"].get<int>());
    return ids;
}

// Token frames of one channel with the channel name removed, for byte comparison.
std::vector<std::string> channel_frames(const std::vector<SseEvent>& events, const std::string& channel) {
    std::vector<std::string> frames;
    for (const auto& e : events) {
        if (e.event != "token" || e.data["channel"] != channel) continue;
        json d = e.data;
        d.erase("channel");
        frames.push_back(d.dump());
    }
    return frames;
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out << text;
}

class ServiceTest : public ::testing::Test {
protected:
    void SetUp() override { boot(); }

    void boot(std::size_t queue_limit = 8) {
        fs::create_directories(dir / "vectors");
        fs::create_directories(dir / "data");
        spit(dir / "data" / "moods.tsv", "I am glad\tI am sad\nwhat joy\twhat grief\nlovely day\tawful day\n");
        spit(dir / "data" / "echo.tsv", "say a\taaaa\nsay b\tbbbb\n");
        spit(dir / "data" / "prefs.tsv", "reply\tyes\tno\nanswer\tyes\tno\n");
        ServiceOptions opts;
        opts.vectors_dir = dir / "vectors";
        opts.datasets_dir = dir / "data";
        opts.queue_limit = queue_limit;
        service = std::make_unique<Service>(bundle, opts);
        port = service->start();
        client = std::make_unique<httplib::Client>("127.0.0.1", port);
        client->set_read_timeout(60, 0);
    }

    void TearDown() override {
        client.reset();
        service.reset();
    }

    httplib::Result post(const std::string& path, const json& body) {
        return client->Post(path, body.dump(), "application/json");
    }

    json ok_json(const httplib::Result& r, int status) {
        EXPECT_TRUE(r) << "no response";
        if (!r) return {};
        EXPECT_EQ(r->status, status) << r->body;
        return json::parse(r->body);
    }

    void put_direction(const std::string& name, std::vector<float> values, int layer = 1) {
        SteeringVector v;
        v.name = name;
        v.method_id = "caa";
        v.source_layer = layer;
        v.payload = Tensor::vector(std::move(values));
        service->vectors().put(std::move(v));
    }

    json await_job(const std::string& id) {
        for (int i = 0; i < 600; ++i) {
            const json j = ok_json(client->Get("/v1/train/" + id), 200);
            if (j["status"] != "running") return j;
            std::this_thread::sleep_for(std::chrono::milliseconds(20));
        }
        ADD_FAILURE() << "job did not finish";
        return {};
    }

    EngineConfig cfg = [] {
        EngineConfig c = testutil::small_config(2, 16, 2, 256);
        return c;
    }();
    std::shared_ptr<const ModelBundle> bundle = testutil::random_bundle(cfg, 5);
    testutil::TempDir dir;
    std::unique_ptr<Service> service;
    std::unique_ptr<httplib::Client> client;
    int port = 0;
};

}  // namespace

TEST_F(ServiceTest, HealthReportsModelAndQueue) {
    const json h = ok_json(client->Get("/v1/health"), 200);
    EXPECT_EQ(h["status"], "ok");
    EXPECT_EQ(h["model"]["num_layers"], 2);
    EXPECT_EQ(h["model"]["hidden_dim"], 16);
    EXPECT_EQ(h["model"]["vocab_size"], 256);
    EXPECT_EQ(h["queue"]["limit"], 8);
    EXPECT_EQ(h["queue"]["waiting"], 0);
    EXPECT_EQ(h["model"]["fingerprint"].get<std::string>().size(), 16u);
}

TEST_F(ServiceTest, CorsHeaderOnEveryResponse) {
    auto r = client->Get("/v1/vectors");
    ASSERT_TRUE(r);
    EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
    auto pre = client->Options("/v1/generate");
    ASSERT_TRUE(pre);
    EXPECT_EQ(pre->status, 204);
    EXPECT_NE(pre->get_header_value("Access-Control-Allow-Headers").find("Content-Type"), std::string::npos);
}

TEST_F(ServiceTest, DatasetsAreListed) {
    const json d = ok_json(client->Get("/v1/datasets"), 200);
    EXPECT_EQ(d["datasets"], json::parse(R"(["echo", "moods", "prefs"])"));
}

TEST_F(ServiceTest, BaselineGenerationMatchesTheEngine) {
    auto r = post("/v1/generate", {{"prompt", "hello"}, {"max_new_tokens", 6}});
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_NE(r->get_header_value("Content-Type").find("text/event-stream"), std::string::npos);
    const auto events = parse_sse(r->body);
    ASSERT_FALSE(events.empty());
    EXPECT_EQ(events.back().event, "done");

    GenerateOptions opts;
    opts.max_new_tokens = 6;
    const auto direct = WrappedModel(bundle).generate({byte_tokenize("hello")}, opts).sequences[0];
    EXPECT_EQ(channel_tokens(events, "baseline"), direct.token_ids);
    EXPECT_TRUE(channel_tokens(events, "steered").empty());

    int index = 0;
    for (const auto& e : events) {
        if (e.event != "token") continue;
        EXPECT_EQ(e.data["index"], index++);
        const int one[] = {e.data["token_id"].get<int>()};
        EXPECT_EQ(e.data["text"].get<std::string>().empty(), byte_detokenize(one).empty());
    }
    const json& done = events.back().data["channels"]["baseline"];
    EXPECT_EQ(done["finish_reason"], std::string(to_string(direct.finish_reason)));
    EXPECT_EQ(done["tokens"], direct.token_ids.size());
    EXPECT_GE(done["ftl_ms"].get<double>(), 0.0);
    EXPECT_GE(done["ttlt_s"].get<double>() * 1000.0, done["ftl_ms"].get<double>());
}

TEST_F(ServiceTest, SeededSamplingIsDeterministic) {
    const json req = {{"prompt", "abc"},
                      {"max_new_tokens", 8},
                      {"sampling", {{"mode", "top_k"}, {"top_k", 20}, {"seed", 3}}}};
    const auto a = parse_sse(post("/v1/generate", req)->body);
    const auto b = parse_sse(post("/v1/generate", req)->body);
    EXPECT_EQ(channel_tokens(a, "baseline"), channel_tokens(b, "baseline"));
    EXPECT_FALSE(channel_tokens(a, "baseline").empty());
}

TEST_F(ServiceTest, ZeroVectorComparisonIsByteIdentical) {
    put_direction("zero", std::vector<float>(16, 0.0f));
    const json req = {{"prompt", "steer me"},
                      {"max_new_tokens", 10},
                      {"compare_baseline", true},
                      {"sampling", {{"mode", "top_k"}, {"top_k", 50}, {"seed", 17}}},
                      {"steering", {{"configs", {{{"vector", "zero"}, {"scale", 4.0}}}}}}};
    const auto events = parse_sse(post("/v1/generate", req)->body);
    const auto steered = channel_frames(events, "steered");
    EXPECT_EQ(steered.size(), 10u);
    EXPECT_EQ(steered, channel_frames(events, "baseline"));
    const json& done = events.back().data["channels"];
    EXPECT_TRUE(done.contains("steered"));
    EXPECT_TRUE(done.contains("baseline"));
}

TEST_F(ServiceTest, LargeVectorChangesTheSteeredChannelOnly) {
    std::mt19937_64 rng(1);
    auto values = testutil::random_values(rng, 16, 1.0f);
    put_direction("loud", values);
    const json req = {{"prompt", "steer me"},
                      {"max_new_tokens", 12},
                      {"compare_baseline", true},
                      {"steering", {{"configs", {{{"vector", "loud"}, {"scale", 60.0}, {"target_layers", "all"}}}}}}};
    const auto events = parse_sse(post("/v1/generate", req)->body);
    GenerateOptions opts;
    opts.max_new_tokens = 12;
    const auto base = WrappedModel(bundle).generate({byte_tokenize("steer me")}, opts).sequences[0].token_ids;
    EXPECT_EQ(channel_tokens(events, "baseline"), base);
    EXPECT_NE(channel_tokens(events, "steered"), base);
}

TEST_F(ServiceTest, UnknownVectorIs404NamingIt) {
    const json body = ok_json(post("/v1/generate", {{"prompt", "x"}, {"steering", {{"configs", {{{"vector", "ghost"}}}}}}}),
                              404);
    EXPECT_EQ(body["error"]["kind"], "not_found");
    EXPECT_EQ(body["error"]["field"], "steering.configs[0].vector");
    EXPECT_NE(body["error"]["message"].get<std::string>().find("ghost"), std::string::npos);
}

TEST_F(ServiceTest, ValidationErrorsCarryFieldPaths) {
    put_direction("v", std::vector<float>(16, 0.5f));
    auto field = [&](const json& req) { return ok_json(post("/v1/generate", req), 400)["error"]["field"]; };
    EXPECT_EQ(field({{"prompt", "x"}, {"max_new_tokens", "many"}}), "max_new_tokens");
    EXPECT_EQ(field({{"prompt", "x"}, {"max_new_tokens", 0}}), "max_new_tokens");
    EXPECT_EQ(field({{"prompt", std::string(60, 'a')}, {"max_new_tokens", 10}}), "max_new_tokens");
    EXPECT_EQ(field({{"prompt", "x"}, {"steering", {{"configs", {{{"vector", "v"}, {"target_layers", {9}}}}}}}}),
              "steering.configs[0].target_layers");
    EXPECT_EQ(field({{"prompt", "x"}, {"sampling", {{"mode", "top_k"}, {"top_k", "k"}}}}), "sampling.top_k");

    auto raw = client->Post("/v1/generate", "{not json", "application/json");
    ASSERT_TRUE(raw);
    EXPECT_EQ(raw->status, 400);
    EXPECT_EQ(json::parse(raw->body)["error"]["field"], "body");
}

TEST_F(ServiceTest, FullQueueAnswers429) {
    service.reset();
    boot(2);
    std::promise<void> release;
    std::shared_future<void> gate = release.get_future().share();
    std::promise<void> started;
    ASSERT_TRUE(service->engine_queue().submit([gate, &started] {
        started.set_value();
        gate.wait();
    }));
    started.get_future().wait();
    ASSERT_TRUE(service->engine_queue().submit([gate] { gate.wait(); }));
    ASSERT_TRUE(service->engine_queue().submit([gate] { gate.wait(); }));
    EXPECT_EQ(service->engine_queue().waiting(), 2u);
    EXPECT_EQ(ok_json(client->Get("/v1/health"), 200)["queue"]["waiting"], 2);

    const json body = ok_json(post("/v1/generate", {{"prompt", "hi"}, {"max_new_tokens", 2}}), 429);
    EXPECT_EQ(body["error"]["kind"], "busy");
    release.set_value();

    // Once drained the same request is served.
    for (int i = 0; i < 200 && service->engine_queue().waiting() > 0; ++i)
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
    auto r = post("/v1/generate", {{"prompt", "hi"}, {"max_new_tokens", 2}});
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
}

TEST_F(ServiceTest, ExtractStoresAndListsTheVector) {
    EXPECT_TRUE(ok_json(client->Get("/v1/vectors"), 200)["vectors"].empty());
    const json made =
        ok_json(post("/v1/extract", {{"name", "mood"}, {"method", "caa"}, {"layer", 2}, {"dataset", "moods"}}), 201);
    EXPECT_EQ(made["vector"]["name"], "mood");
    EXPECT_EQ(made["vector"]["method_id"], "caa");
    EXPECT_EQ(made["vector"]["layer"], 2);
    EXPECT_EQ(made["vector"]["dims"], 16);
    EXPECT_EQ(made["vector"]["metadata"]["dataset"], "moods");
    EXPECT_EQ(made["vector"]["metadata"]["pairs"], "3");
    EXPECT_TRUE(fs::exists(dir / "vectors" / "mood.stwt"));

    const json list = ok_json(client->Get("/v1/vectors"), 200)["vectors"];
    ASSERT_EQ(list.size(), 1u);
    EXPECT_EQ(list[0]["name"], "mood");

    // The stored file reproduces what was served.
    const SteeringVector disk = load_vector(dir / "vectors" / "mood.stwt");
    EXPECT_TRUE(bit_equal(disk.direction(), service->vectors().find("mood")->direction()));

    // Usable right away for steering.
    auto r = post("/v1/generate",
                  {{"prompt", "hi"}, {"max_new_tokens", 3}, {"steering", {{"configs", {{{"vector", "mood"}}}}}}});
    ASSERT_TRUE(r);
    EXPECT_EQ(r->status, 200);
    EXPECT_EQ(channel_tokens(parse_sse(r->body), "steered").size(), 3u);
}

TEST_F(ServiceTest, ExtractErrors) {
    EXPECT_EQ(ok_json(post("/v1/extract", {{"name", "m"}, {"dataset", "missing"}}), 404)["error"]["field"], "dataset");
    EXPECT_EQ(ok_json(post("/v1/extract", {{"name", "m"}, {"layer", 7}, {"dataset", "moods"}}), 400)["error"]["field"],
              "layer");
    EXPECT_EQ(ok_json(post("/v1/extract", {{"name", "m"}, {"method", "magic"}, {"dataset", "moods"}}), 400)["error"]
                     ["field"],
              "method");
    EXPECT_EQ(ok_json(post("/v1/extract", {{"name", "../x"}, {"dataset", "moods"}}), 400)["error"]["field"], "name");
    EXPECT_EQ(ok_json(post("/v1/extract", {{"name", "m"}}), 400)["error"]["field"], "dataset");
    EXPECT_EQ(ok_json(post("/v1/extract", {{"name", "m"}, {"method", "sae"}, {"feature", 0}}), 404)["error"]["kind"],
              "not_found");
}

TEST_F(ServiceTest, TrainingJobRunsToCompletion) {
    const json accepted = ok_json(post("/v1/train", {{"name", "echo_sav"},
                                                     {"dataset", "echo"},
                                                     {"method", "sav"},
                                                     {"target_layer", 1},
                                                     {"max_steps", 5},
                                                     {"learning_rate", 0.05}}),
                                  202);
    const std::string id = accepted["job_id"];
    const json done = await_job(id);
    EXPECT_EQ(done["status"], "done") << done.dump();
    EXPECT_EQ(done["step"], 5);
    EXPECT_EQ(done["history"].size(), 6u);
    EXPECT_EQ(done["vector"], "echo_sav");
    EXPECT_TRUE(done["error"].is_null());
    EXPECT_LE(done["history"].back().get<double>(), done["history"].front().get<double>());

    const auto v = service->vectors().find("echo_sav");
    ASSERT_TRUE(v);
    EXPECT_TRUE(v->is_learned());
    EXPECT_EQ(v->method_id, "sav");
    EXPECT_TRUE(fs::exists(dir / "vectors" / "echo_sav.stwt"));
}

TEST_F(ServiceTest, ZeroStepTrainingGivesIdentitySteering) {
    const json accepted = ok_json(post("/v1/train", {{"name", "noop"}, {"dataset", "echo"}, {"max_steps", 0}}), 202);
    const json done = await_job(accepted["job_id"]);
    EXPECT_EQ(done["status"], "done");
    EXPECT_EQ(done["step"], 0);

    const json req = {{"prompt", "say a"},
                      {"max_new_tokens", 6},
                      {"compare_baseline", true},
                      {"steering", {{"configs", {{{"vector", "noop"}}}}}}};
    const auto events = parse_sse(post("/v1/generate", req)->body);
    EXPECT_EQ(channel_frames(events, "steered"), channel_frames(events, "baseline"));
}

TEST_F(ServiceTest, PreferenceObjectiveReadsPreferenceData) {
    const json accepted = ok_json(post("/v1/train", {{"name", "pref"},
                                                     {"dataset", "prefs"},
                                                     {"objective", "contrastive_preference"},
                                                     {"max_steps", 2}}),
                                  202);
    EXPECT_EQ(await_job(accepted["job_id"])["status"], "done");

    // The same file is not a valid io dataset.
    EXPECT_EQ(ok_json(post("/v1/train", {{"name", "x"}, {"dataset", "prefs"}}), 400)["error"]["field"], "dataset");
}

TEST_F(ServiceTest, TrainErrors) {
    EXPECT_EQ(ok_json(client->Get("/v1/train/job-999"), 404)["error"]["kind"], "not_found");
    EXPECT_EQ(ok_json(post("/v1/train", {{"name", "t"}, {"dataset", "echo"}, {"method", "magic"}}), 400)["error"]["field"],
              "method");
    EXPECT_EQ(ok_json(post("/v1/train", {{"name", "t"}, {"dataset", "echo"}, {"target_layer", 3}}), 400)["error"]["field"],
              "target_layer");
    EXPECT_EQ(ok_json(post("/v1/train", {{"dataset", "echo"}}), 400)["error"]["field"], "name");
    EXPECT_EQ(ok_json(post("/v1/train", {{"name", "t"}, {"dataset", "nope"}}), 404)["error"]["field"], "dataset");
    EXPECT_EQ(ok_json(post("/v1/train", {{"name", "t"}, {"dataset", "echo"}, {"trigger", {{"stage", "x"}}}}), 400)
                  ["error"]["field"],
              "trigger.stage");
}

TEST_F(ServiceTest, RescanPicksUpFilesAndSkipsBadOnes) {
    SteeringVector v;
    v.name = "ignored";
    v.method_id = "caa";
    v.source_layer = 1;
    v.payload = Tensor::vector(std::vector<float>(16, 0.25f));
    save_vector(dir / "vectors" / "dropped.stwt", v);
    spit(dir / "vectors" / "broken.stwt", "not a container");
    spit(dir / "vectors" / "notes.txt", "ignored");

    service->vectors().rescan();
    const json listed = ok_json(client->Get("/v1/vectors"), 200);
    ASSERT_EQ(listed["vectors"].size(), 1u);
    EXPECT_EQ(listed["vectors"][0]["name"], "dropped");
    EXPECT_EQ(listed["skipped"], json::parse(R"(["broken.stwt"])"));

    // A second service over the same directory sees the same vectors.
    ServiceOptions opts;
    opts.vectors_dir = dir / "vectors";
    opts.datasets_dir = dir / "data";
    Service other(bundle, opts);
    ASSERT_EQ(other.vectors().list().size(), 1u);
    EXPECT_TRUE(bit_equal(other.vectors().find("dropped")->direction(), service->vectors().find("dropped")->direction()));
}

TEST(VectorStore, NamesAreFileSafe) {
    EXPECT_TRUE(VectorStore::valid_name("happy-1.v2"));
    EXPECT_FALSE(VectorStore::valid_name(""));
    EXPECT_FALSE(VectorStore::valid_name(".hidden"));
    EXPECT_FALSE(VectorStore::valid_name("a/b"));
    EXPECT_FALSE(VectorStore::valid_name("sp ace"));
}

TEST(WorkQueue, RunsInOrderAndRefusesPastTheLimit) {
    WorkQueue q(1);
    std::promise<void> go;
    std::shared_future<void> gate = go.get_future().share();
    std::promise<void> started;
    std::vector<int> order;
    std::mutex m;
    ASSERT_TRUE(q.submit([&, gate] {
        started.set_value();
        gate.wait();
        std::lock_guard lock(m);
        order.push_back(1);
    }));
    started.get_future().wait();
    std::promise<void> finished;
    ASSERT_TRUE(q.submit([&] {
        {
            std::lock_guard lock(m);
            order.push_back(2);
        }
        finished.set_value();
    }));
    EXPECT_FALSE(q.submit([] {}));
    EXPECT_EQ(q.waiting(), 1u);
    go.set_value();
    finished.get_future().wait();
    EXPECT_EQ(order, (std::vector<int>{1, 2}));
    EXPECT_EQ(q.waiting(), 0u);
}
