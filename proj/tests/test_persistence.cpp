#include <gtest/gtest.h>

#include <bit>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "json.hpp"
#include "steerkit/error.hpp"
#include "steerkit/persistence.hpp"
#include "test_util.hpp"

using namespace steerkit;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

using testutil::TempDir;

void spit(const fs::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

ErrorKind kind_of(const std::function<void()>& f, std::string* message = nullptr) {
    try {
        f();
    } catch (const Error& e) {
        if (message) *message = e.what();
        return e.kind();
    }
    ADD_FAILURE() << "expected a steerkit::Error";
    return ErrorKind::Contract;
}

// Builds container bytes by hand so malformed layouts can be produced.
std::string raw_container(const json& manifest, std::size_t payload_bytes, std::uint16_t version = 1) {
    const std::string m = manifest.dump();
    std::string out = "STWT";
    out.push_back(static_cast<char>(version & 0xFF));
    out.push_back(static_cast<char>(version >> 8));
    out.append(2, '\0');
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((m.size() >> (8 * i)) & 0xFF));
    out += m;
    out.resize(out.size() + payload_bytes, '\0');
    return out;
}

std::size_t payload_start_for(const json& manifest) { return (16 + manifest.dump().size() + 63) / 64 * 64; }

bool bits_equal(const Container& a, const Container& b) {
    if (a.kind != b.kind || a.metadata != b.metadata || a.arrays.size() != b.arrays.size()) return false;
    for (std::size_t i = 0; i < a.arrays.size(); ++i)
        if (a.arrays[i].name != b.arrays[i].name || !bit_equal(a.arrays[i].tensor, b.arrays[i].tensor)) return false;
    return true;
}

}  // namespace

TEST(Container, SingleArrayRoundTripIsBitIdentical) {
    TempDir dir;
    Container c{"test", {}, {{"x", Tensor::vector({1.5f, -2.0f})}}};
    save_container(dir / "one.stwt", c);
    Container back = load_container(dir / "one.stwt");
    ASSERT_EQ(back.arrays.size(), 1u);
    EXPECT_EQ(back.arrays[0].name, "x");
    EXPECT_TRUE(bit_equal(back.arrays[0].tensor, Tensor::vector({1.5f, -2.0f})));
    EXPECT_EQ(back.kind, "test");
}

TEST(Container, EmptyArrayListIsAValidFile) {
    TempDir dir;
    save_container(dir / "empty.stwt", Container{"nothing", {}, {}});
    Container back = load_container(dir / "empty.stwt");
    EXPECT_TRUE(back.arrays.empty());
    EXPECT_EQ(back.kind, "nothing");
}

// The byte layout is read back here without the library decoder.
TEST(Container, LayoutMatchesTheDocumentedFormat) {
    Container c{"layout", {{"k", "v"}},
                {{"a", Tensor::vector({1.0f, -0.0f, 3.25f})}, {"b", Tensor::matrix(2, 2, {5, 6, 7, 8})}}};
    const std::string bytes = encode_container(c);
    ASSERT_EQ(bytes.substr(0, 4), "STWT");
    EXPECT_EQ(static_cast<unsigned char>(bytes[4]) | (static_cast<unsigned char>(bytes[5]) << 8), 1);
    std::uint64_t mlen = 0;
    for (int i = 0; i < 8; ++i) mlen |= std::uint64_t(static_cast<unsigned char>(bytes[8 + i])) << (8 * i);
    const json m = json::parse(bytes.substr(16, mlen));
    EXPECT_EQ(m["kind"], "layout");
    EXPECT_EQ(m["metadata"]["k"], "v");
    ASSERT_EQ(m["arrays"].size(), 2u);

    std::uint64_t prev_end = 16 + mlen;
    for (const auto& a : m["arrays"]) {
        EXPECT_EQ(a["dtype"], "f32");
        const std::uint64_t off = a["offset"], nbytes = a["nbytes"];
        EXPECT_EQ(off % 64, 0u);
        EXPECT_GE(off, prev_end);
        EXPECT_LE(off + nbytes, bytes.size());
        prev_end = off + nbytes;
    }
    const std::uint64_t off_a = m["arrays"][0]["offset"];
    const float expect[] = {1.0f, -0.0f, 3.25f};
    for (int i = 0; i < 3; ++i) {
        std::uint32_t bits = 0;
        for (int k = 0; k < 4; ++k)
            bits |= std::uint32_t(static_cast<unsigned char>(bytes[off_a + 4 * i + k])) << (8 * k);
        EXPECT_EQ(bits, std::bit_cast<std::uint32_t>(expect[i]));
    }
    EXPECT_EQ(m["arrays"][1]["shape"], json::array({2, 2}));
}

TEST(Container, RandomArraySetsRoundTripBitIdentically) {
    std::mt19937_64 rng(7);
    std::uniform_int_distribution<int> count(0, 12), rank(0, 3), extent(1, 9), pick(0, 9);
    std::normal_distribution<float> normal(0.0f, 100.0f);
    const float specials[] = {-0.0f, 0.0f, std::numeric_limits<float>::denorm_min(),
                              -std::numeric_limits<float>::max(), std::numeric_limits<float>::max(),
                              std::numeric_limits<float>::min()};
    for (int trial = 0; trial < 200; ++trial) {
        Container c;
        c.kind = "random";
        c.metadata["trial"] = std::to_string(trial);
        const int n = count(rng);
        for (int i = 0; i < n; ++i) {
            Shape shape(rank(rng));
            for (auto& e : shape) e = extent(rng);
            std::vector<float> values(shape_size(shape));
            for (auto& v : values) v = pick(rng) == 0 ? specials[rng() % 6] : normal(rng);
            c.arrays.push_back({"arr" + std::to_string(i), Tensor(shape, values)});
        }
        const std::string bytes = encode_container(c);
        EXPECT_TRUE(bits_equal(decode_container(bytes), c)) << "trial " << trial;
    }
}

TEST(Container, MetadataRoundTripsArbitraryStrings) {
    TempDir dir;
    Container c{"meta",
                {{"plain", "value"},
                 {"empty", ""},
                 {"quotes \"and\" \\slashes", "tab\there\nnewline"},
                 {"unicode", "\xc3\xa9t\xc3\xa9 \xe2\x86\x92 \xf0\x9f\x98\x80"},
                 {"json-ish", "{\"a\": [1, 2]}"}},
                {}};
    save_container(dir / "m.stwt", c);
    EXPECT_EQ(load_container(dir / "m.stwt").metadata, c.metadata);
}

TEST(Container, DuplicateOrEmptyNamesAreRejected) {
    TempDir dir;
    Container dup{"x", {}, {{"a", Tensor::scalar(1)}, {"a", Tensor::scalar(2)}}};
    EXPECT_EQ(kind_of([&] { save_container(dir / "d.stwt", dup); }), ErrorKind::Validation);
    Container unnamed{"x", {}, {{"", Tensor::scalar(1)}}};
    EXPECT_EQ(kind_of([&] { save_container(dir / "e.stwt", unnamed); }), ErrorKind::Validation);
    EXPECT_FALSE(fs::exists(dir / "d.stwt"));
}

TEST(Container, CorruptMagicIsAFormatErrorNamingTheMagic) {
    TempDir dir;
    std::string bytes = encode_container(Container{"x", {}, {{"a", Tensor::scalar(1)}}});
    bytes[0] = 'X';
    spit(dir / "bad.stwt", bytes);
    std::string msg;
    EXPECT_EQ(kind_of([&] { load_container(dir / "bad.stwt"); }, &msg), ErrorKind::Format);
    EXPECT_NE(msg.find("STWT"), std::string::npos);
}

TEST(Container, TruncationReportsExpectedAndActualSize) {
    TempDir dir;
    const std::string bytes = encode_container(Container{"x", {}, {{"a", Tensor::vector({1, 2, 3, 4})}}});
    spit(dir / "t.stwt", bytes.substr(0, bytes.size() - 3));
    std::string msg;
    EXPECT_EQ(kind_of([&] { load_container(dir / "t.stwt"); }, &msg), ErrorKind::Truncated);
    EXPECT_NE(msg.find(std::to_string(bytes.size())), std::string::npos) << msg;
    EXPECT_NE(msg.find(std::to_string(bytes.size() - 3)), std::string::npos) << msg;

    // Cut inside the manifest and inside the fixed header.
    EXPECT_EQ(kind_of([&] { decode_container(bytes.substr(0, 30)); }), ErrorKind::Truncated);
    EXPECT_EQ(kind_of([&] { decode_container(bytes.substr(0, 10)); }), ErrorKind::Truncated);
}

TEST(Container, UnsupportedVersionIsDistinct) {
    std::string bytes = encode_container(Container{"x", {}, {}});
    bytes[4] = 2;
    EXPECT_EQ(kind_of([&] { decode_container(bytes); }), ErrorKind::UnsupportedVersion);
}

TEST(Container, InconsistentManifestsAreRejected) {
    auto manifest_with = [](json arrays) { return json{{"kind", "x"}, {"metadata", json::object()}, {"arrays", arrays}}; };
    auto entry = [](std::string name, json shape, std::uint64_t offset, std::uint64_t nbytes) {
        return json{{"name", name}, {"dtype", "f32"}, {"shape", shape}, {"offset", offset}, {"nbytes", nbytes}};
    };
    // Work out a payload start that stays put as offsets change digit counts.
    const std::uint64_t base = payload_start_for(manifest_with({entry("a", {4}, 1000, 16), entry("b", {4}, 1000, 16)}));

    auto decode_padded = [&](const json& m, std::uint64_t end) {
        const std::size_t header = 16 + m.dump().size();
        return decode_container(raw_container(m, end - header));
    };
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {4}, base, 12)}), base + 12); }),
              ErrorKind::ManifestInconsistent);  // byte count disagrees with the shape
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {4}, base, 16), entry("b", {4}, base, 16)}), base + 16); }),
              ErrorKind::ManifestInconsistent);  // overlap
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {4}, base + 4, 16)}), base + 20); }),
              ErrorKind::ManifestInconsistent);  // misaligned
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {4}, 0, 16)}), base + 64); }),
              ErrorKind::ManifestInconsistent);  // inside the header
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {0}, base, 0)}), base); }),
              ErrorKind::ManifestInconsistent);  // zero extent
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {4}, base, 16), entry("a", {4}, base + 64, 16)}), base + 80); }),
              ErrorKind::ManifestInconsistent);  // duplicate name
    EXPECT_EQ(kind_of([&] { decode_padded(manifest_with({entry("a", {4}, base, 16)}), base + 64); }),
              ErrorKind::ManifestInconsistent);  // undeclared trailing bytes
    json f64 = manifest_with({entry("a", {2}, base, 16)});
    f64["arrays"][0]["dtype"] = "f64";
    EXPECT_EQ(kind_of([&] { decode_padded(f64, base + 16); }), ErrorKind::ManifestInconsistent);
    EXPECT_EQ(kind_of([&] { decode_padded(json{{"kind", "x"}}, 64); }), ErrorKind::ManifestInconsistent);

    // Sanity check that the helper produces loadable files when consistent.
    Container ok = decode_padded(manifest_with({entry("a", {4}, base, 16)}), base + 16);
    EXPECT_EQ(ok.arrays.at(0).tensor, Tensor::zeros({4}));
}

TEST(Container, HugeDeclaredSizesFailWithoutAllocating) {
    const json m = {{"kind", "x"},
                    {"arrays", json::array({{{"name", "a"},
                                             {"dtype", "f32"},
                                             {"shape", {1u << 20, 1u << 20}},
                                             {"offset", 128},
                                             {"nbytes", std::uint64_t(1) << 42}}})}};
    EXPECT_EQ(kind_of([&] { decode_container(raw_container(m, 64)); }), ErrorKind::Truncated);

    const json overflow = {{"kind", "x"},
                           {"arrays", json::array({{{"name", "a"},
                                                    {"dtype", "f32"},
                                                    {"shape", {std::uint64_t(1) << 40, std::uint64_t(1) << 40}},
                                                    {"offset", 128},
                                                    {"nbytes", 0}}})}};
    EXPECT_EQ(kind_of([&] { decode_container(raw_container(overflow, 64)); }), ErrorKind::ManifestInconsistent);

    std::string bytes = encode_container(Container{"x", {}, {}});
    for (int i = 8; i < 16; ++i) bytes[i] = '\xFF';  // manifest length near 2^64
    EXPECT_EQ(kind_of([&] { decode_container(bytes); }), ErrorKind::Truncated);
}

TEST(Container, MalformedManifestJsonIsAFormatError) {
    std::string bytes = encode_container(Container{"x", {}, {}});
    bytes[16] = '#';
    EXPECT_EQ(kind_of([&] { decode_container(bytes); }), ErrorKind::Format);
}

TEST(Container, WritesAreAtomicAndLeaveNoTemporaries) {
    TempDir dir;
    save_container(dir / "f.stwt", Container{"v1", {}, {{"a", Tensor::scalar(1)}}});
    save_container(dir / "f.stwt", Container{"v2", {}, {{"a", Tensor::scalar(2)}}});
    EXPECT_EQ(load_container(dir / "f.stwt").kind, "v2");
    int files = 0;
    for (const auto& entry : fs::directory_iterator(dir.path())) {
        ++files;
        EXPECT_EQ(entry.path().filename(), "f.stwt");
    }
    EXPECT_EQ(files, 1);
}

TEST(Container, IoErrorsNameThePath) {
    TempDir dir;
    std::string msg;
    EXPECT_EQ(kind_of([&] { load_container(dir / "missing.stwt"); }, &msg), ErrorKind::Io);
    EXPECT_NE(msg.find("missing.stwt"), std::string::npos);
    EXPECT_EQ(kind_of([&] { save_container(dir / "no" / "such" / "dir.stwt", Container{}); }, &msg), ErrorKind::Io);
    EXPECT_NE(msg.find("dir.stwt"), std::string::npos);
}

TEST(Container, DecodeIsIdempotent) {
    const Container c{"x", {{"a", "b"}}, {{"w", Tensor::matrix(2, 3, {1, 2, 3, 4, 5, 6})}}};
    const std::string once = encode_container(c);
    EXPECT_EQ(encode_container(decode_container(once)), once);
}

TEST(ModelFiles, ReloadedModelGeneratesIdentically) {
    TempDir dir;
    const auto cfg = testutil::small_config(3, 16, 4, 40);
    const auto bundle = testutil::random_bundle(cfg, 11);
    save_model(dir / "model.stwt", *bundle);
    auto loaded = std::make_shared<const ModelBundle>(load_model(dir / "model.stwt"));

    EXPECT_EQ(loaded->config(), cfg);
    EXPECT_EQ(weights_fingerprint(*loaded), weights_fingerprint(*bundle));
    for (const auto& [name, t] : bundle->weights()) EXPECT_TRUE(bit_equal(loaded->weight(name), t)) << name;

    std::mt19937_64 rng(3);
    std::vector<std::vector<int>> prompts;
    for (int i = 0; i < 4; ++i) prompts.push_back(testutil::random_tokens(rng, cfg.vocab_size, 5 + i));
    GenerateOptions opts;
    opts.max_new_tokens = 12;
    const auto a = WrappedModel(bundle).generate(prompts, opts);
    const auto b = WrappedModel(loaded).generate(prompts, opts);
    for (std::size_t i = 0; i < prompts.size(); ++i) EXPECT_EQ(a.sequences[i].token_ids, b.sequences[i].token_ids);

    const auto la = WrappedModel(bundle).prefill(prompts).logits;
    const auto lb = WrappedModel(loaded).prefill(prompts).logits;
    for (std::size_t i = 0; i < la.size(); ++i) EXPECT_TRUE(bit_equal(la[i], lb[i]));
}

TEST(ModelFiles, WrongKindIsAFormatError) {
    TempDir dir;
    save_container(dir / "x.stwt", Container{"sae", {}, {}});
    EXPECT_EQ(kind_of([&] { load_model(dir / "x.stwt"); }), ErrorKind::Format);
    EXPECT_EQ(kind_of([&] { load_vector(dir / "x.stwt"); }), ErrorKind::Format);
}

TEST(VectorFiles, AllPayloadsRoundTrip) {
    TempDir dir;
    std::mt19937_64 rng(5);
    const std::size_t d = 8;
    auto rnd = [&](Shape s) { return Tensor(s, testutil::random_values(rng, shape_size(s))); };

    std::vector<SteeringVector> vectors;
    vectors.push_back({"caa", "caa", 2, rnd({d}), {{"source", "pairs.tsv"}, {"note", "a\tb"}}});
    vectors.push_back({"bias", "sav", 1, LearnedSteeringParams{SavParams{rnd({d})}}, {}});
    vectors.push_back({"lm", "lmsteer", 3, LearnedSteeringParams{LmSteerParams{rnd({d, d}), 0.3f}}, {}});
    vectors.push_back(
        {"reft", "loreft", 2, LearnedSteeringParams{LoreftParams{rnd({2, d}), rnd({2, d}), rnd({2})}}, {{"k", "v"}}});

    for (const auto& v : vectors) {
        const fs::path p = dir / (v.name + ".stwt");
        save_vector(p, v);
        const SteeringVector back = load_vector(p);
        EXPECT_EQ(back.name, v.name);
        EXPECT_EQ(back.method_id, v.method_id);
        EXPECT_EQ(back.source_layer, v.source_layer);
        EXPECT_EQ(back.metadata, v.metadata);
        const Container a = vector_to_container(v), b = vector_to_container(back);
        EXPECT_TRUE(bits_equal(a, b)) << v.name;
    }
    const auto lm = load_vector(dir / "lm.stwt");
    EXPECT_EQ(std::bit_cast<std::uint32_t>(std::get<LmSteerParams>(lm.learned()).epsilon),
              std::bit_cast<std::uint32_t>(0.3f));
}

TEST(VectorFiles, InconsistentLearnedShapesAreRejected) {
    Container c = vector_to_container(
        {"r", "loreft", 1, LearnedSteeringParams{LoreftParams{Tensor::zeros({2, 4}), Tensor::zeros({2, 4}),
                                                              Tensor::zeros({2})}},
         {}});
    c.arrays[2].tensor = Tensor::zeros({3});
    EXPECT_EQ(kind_of([&] { vector_from_container(c); }), ErrorKind::ManifestInconsistent);
}

TEST(SaeFiles, RoundTrip) {
    TempDir dir;
    std::mt19937_64 rng(9);
    const int d = 4, n = 8;
    SaeWeights sae{Tensor({std::size_t(n), std::size_t(d)}, testutil::random_values(rng, n * d)),
                   Tensor({std::size_t(n)}, testutil::random_values(rng, n)),
                   Tensor({std::size_t(d), std::size_t(n)}, testutil::random_values(rng, n * d)),
                   Tensor({std::size_t(d)}, testutil::random_values(rng, d)),
                   {"happy tone", "questions", "", "a \"quoted\" label", "x", "y", "z", "w"}};
    save_sae(dir / "sae.stwt", sae);
    const SaeWeights back = load_sae(dir / "sae.stwt");
    EXPECT_TRUE(bit_equal(back.w_enc, sae.w_enc));
    EXPECT_TRUE(bit_equal(back.b_enc, sae.b_enc));
    EXPECT_TRUE(bit_equal(back.w_dec, sae.w_dec));
    EXPECT_TRUE(bit_equal(back.b_dec, sae.b_dec));
    EXPECT_EQ(back.feature_labels, sae.feature_labels);
}

TEST(Tokenizer, BytesMapToIds) {
    EXPECT_EQ(byte_tokenize("good"), (std::vector<int>{103, 111, 111, 100}));
    EXPECT_EQ(byte_tokenize("\xc3\xa9"), (std::vector<int>{0xC3, 0xA9}));
    EXPECT_EQ(byte_detokenize(std::vector<int>{104, 105, kEosToken}), "hi");
    EXPECT_EQ(kind_of([] { byte_detokenize(std::vector<int>{256}); }), ErrorKind::Domain);
    for (int b = 0; b < 255; ++b) {
        const std::string s(1, static_cast<char>(b));
        EXPECT_EQ(byte_detokenize(byte_tokenize(s)), s);
    }
}

TEST(Datasets, ContrastiveExample) {
    const auto set = std::get<ContrastivePairSet>(parse_dataset("good\tbad\n", DatasetKind::contrastive));
    ASSERT_EQ(set.pairs.size(), 1u);
    EXPECT_EQ(set.pairs[0].positive, (std::vector<int>{103, 111, 111, 100}));
    EXPECT_EQ(set.pairs[0].negative, (std::vector<int>{98, 97, 100}));
}

TEST(Datasets, ArityMismatchNamesTheLine) {
    std::string msg;
    EXPECT_EQ(kind_of([&] { parse_dataset("a\tb\nc\td\te\n", DatasetKind::contrastive); }, &msg), ErrorKind::Format);
    EXPECT_NE(msg.find("line 2"), std::string::npos) << msg;
    EXPECT_EQ(kind_of([&] { parse_dataset("a\tb\nc\n", DatasetKind::preference); }, &msg), ErrorKind::Format);
    EXPECT_NE(msg.find("line 1"), std::string::npos) << msg;
    EXPECT_EQ(kind_of([&] { parse_dataset("a\t\n", DatasetKind::io); }, &msg), ErrorKind::Format);
    EXPECT_NE(msg.find("empty"), std::string::npos) << msg;
    EXPECT_EQ(kind_of([&] { parse_dataset("a\tb\xff\n", DatasetKind::io); }), ErrorKind::Format);
}

TEST(Datasets, CrlfAndLfAreEquivalent) {
    const std::string lf = "p one\tt one\np two\tt two\n";
    const std::string crlf = "p one\tt one\r\np two\tt two\r\n";
    const auto a = std::get<TaskDataset>(parse_dataset(lf, DatasetKind::io));
    const auto b = std::get<TaskDataset>(parse_dataset(crlf, DatasetKind::io));
    ASSERT_EQ(a.io_pairs.size(), 2u);
    ASSERT_EQ(b.io_pairs.size(), 2u);
    for (std::size_t i = 0; i < 2; ++i) {
        EXPECT_EQ(a.io_pairs[i].prompt, b.io_pairs[i].prompt);
        EXPECT_EQ(a.io_pairs[i].target, b.io_pairs[i].target);
    }
    EXPECT_EQ(byte_detokenize(a.io_pairs[1].target), "t two");
}

TEST(Datasets, EmptyFileIsADomainError) {
    TempDir dir;
    spit(dir / "empty.tsv", "");
    EXPECT_EQ(kind_of([&] { load_dataset(dir / "empty.tsv", DatasetKind::contrastive); }), ErrorKind::Domain);
    spit(dir / "blank.tsv", "\n\r\n");
    EXPECT_EQ(kind_of([&] { load_dataset(dir / "blank.tsv", DatasetKind::io); }), ErrorKind::Domain);
}

TEST(Datasets, OrderPreservingAndIdempotent) {
    TempDir dir;
    std::string text;
    for (int i = 0; i < 50; ++i) text += "prompt " + std::to_string(i) + "\tyes " + std::to_string(i) + "\tno\n";
    spit(dir / "pref.tsv", text);
    const TaskDataset a = load_task_dataset(dir / "pref.tsv", DatasetKind::preference);
    const TaskDataset b = load_task_dataset(dir / "pref.tsv", DatasetKind::preference);
    ASSERT_EQ(a.preference_pairs.size(), 50u);
    EXPECT_TRUE(a.is_preference());
    for (int i = 0; i < 50; ++i) {
        EXPECT_EQ(byte_detokenize(a.preference_pairs[i].prompt), "prompt " + std::to_string(i));
        EXPECT_EQ(a.preference_pairs[i].preferred, b.preference_pairs[i].preferred);
        EXPECT_EQ(byte_detokenize(a.preference_pairs[i].dispreferred), "no");
    }
    EXPECT_EQ(kind_of([&] { load_task_dataset(dir / "pref.tsv", DatasetKind::contrastive); }), ErrorKind::Validation);
}

TEST(Datasets, KindNames) {
    for (auto k : {DatasetKind::contrastive, DatasetKind::io, DatasetKind::preference})
        EXPECT_EQ(dataset_kind_from_string(to_string(k)), k);
    EXPECT_EQ(kind_of([] { dataset_kind_from_string("csv"); }), ErrorKind::Validation);
}
