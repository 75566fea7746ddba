#include "steerkit/persistence.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <bit>
#include <cerrno>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "json.hpp"
#include "steerkit/error.hpp"

namespace steerkit {

using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'S', 'T', 'W', 'T'};
constexpr std::size_t kHeaderSize = 16;

std::size_t align_up(std::size_t n) { return (n + kContainerAlignment - 1) / kContainerAlignment * kContainerAlignment; }

void put_u16(std::string& out, std::uint16_t v) {
    out.push_back(static_cast<char>(v & 0xFF));
    out.push_back(static_cast<char>(v >> 8));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

std::uint64_t get_le(std::string_view bytes, std::size_t at, int width) {
    std::uint64_t v = 0;
    for (int i = 0; i < width; ++i) v |= std::uint64_t(static_cast<unsigned char>(bytes[at + i])) << (8 * i);
    return v;
}

void put_f32(char* dst, float f) {
    const auto bits = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) dst[i] = static_cast<char>((bits >> (8 * i)) & 0xFF);
}

float get_f32(const char* src) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= std::uint32_t(static_cast<unsigned char>(src[i])) << (8 * i);
    return std::bit_cast<float>(bits);
}

[[noreturn]] void inconsistent(const std::string& what) {
    fail(ErrorKind::ManifestInconsistent, "container manifest: " + what);
}

json parse_manifest(std::string_view text) {
    try {
        return json::parse(text);
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, fmt::format("container manifest is not valid JSON: {}", e.what()));
    }
}

std::string dump_json(const json& j) {
    try {
        return j.dump();
    } catch (const json::type_error&) {
        fail(ErrorKind::Validation, "container metadata and names must be valid UTF-8");
    }
}

std::string errno_text() { return std::strerror(errno); }

std::atomic<unsigned> temp_counter{0};

}  // namespace

const Tensor& Container::array(std::string_view name) const {
    for (const auto& a : arrays)
        if (a.name == name) return a.tensor;
    fail(ErrorKind::Format, fmt::format("container of kind '{}' has no array named '{}'", kind, name));
}

bool Container::has_array(std::string_view name) const {
    return std::any_of(arrays.begin(), arrays.end(), [&](const NamedArray& a) { return a.name == name; });
}

std::string encode_container(const Container& c) {
    std::set<std::string_view> seen;
    for (const auto& a : c.arrays) {
        if (a.name.empty()) fail(ErrorKind::Validation, "container array names must be non-empty");
        if (!seen.insert(a.name).second)
            fail(ErrorKind::Validation, fmt::format("duplicate container array name '{}'", a.name));
        if (a.tensor.empty()) fail(ErrorKind::Validation, fmt::format("container array '{}' is empty", a.name));
    }

    // Offsets depend on the manifest length, which depends on the offsets'
    // digit counts, so iterate until the layout stops moving.
    std::vector<std::size_t> offsets(c.arrays.size(), 0);
    std::string manifest;
    for (int round = 0;; ++round) {
        json arrays = json::array();
        for (std::size_t i = 0; i < c.arrays.size(); ++i) {
            const auto& t = c.arrays[i].tensor;
            arrays.push_back({{"name", c.arrays[i].name},
                              {"dtype", "f32"},
                              {"shape", t.shape()},
                              {"offset", offsets[i]},
                              {"nbytes", t.size() * 4}});
        }
        json m = {{"kind", c.kind}, {"metadata", c.metadata}, {"arrays", arrays}};
        manifest = dump_json(m);

        std::vector<std::size_t> next(c.arrays.size());
        std::size_t cursor = align_up(kHeaderSize + manifest.size());
        for (std::size_t i = 0; i < c.arrays.size(); ++i) {
            next[i] = cursor;
            cursor = align_up(cursor + c.arrays[i].tensor.size() * 4);
        }
        if (next == offsets) break;
        offsets = std::move(next);
        if (round > 8) fail(ErrorKind::Contract, "container layout did not converge");
    }

    std::string out;
    out.append(kMagic, 4);
    put_u16(out, kContainerVersion);
    put_u16(out, 0);
    put_u64(out, manifest.size());
    out += manifest;
    for (std::size_t i = 0; i < c.arrays.size(); ++i) {
        out.resize(offsets[i], '\0');
        const auto values = c.arrays[i].tensor.values();
        const std::size_t start = out.size();
        out.resize(start + values.size() * 4);
        for (std::size_t k = 0; k < values.size(); ++k) put_f32(out.data() + start + 4 * k, values[k]);
    }
    if (c.arrays.empty()) out.resize(align_up(kHeaderSize + manifest.size()), '\0');
    return out;
}

Container decode_container(std::string_view bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0)
        fail(ErrorKind::Format, "not a steerkit container: expected magic \"STWT\"");
    if (bytes.size() < kHeaderSize)
        fail(ErrorKind::Truncated,
             fmt::format("container header truncated: expected {} bytes, got {}", kHeaderSize, bytes.size()));
    const auto version = static_cast<std::uint16_t>(get_le(bytes, 4, 2));
    if (version != kContainerVersion)
        fail(ErrorKind::UnsupportedVersion,
             fmt::format("container version {} is not supported (expected {})", version, kContainerVersion));
    const std::uint64_t manifest_len = get_le(bytes, 8, 8);
    if (manifest_len > bytes.size() - kHeaderSize)
        fail(ErrorKind::Truncated, fmt::format("container manifest truncated: expected {} bytes, got {}",
                                               kHeaderSize + manifest_len, bytes.size()));
    const json m = parse_manifest(bytes.substr(kHeaderSize, manifest_len));

    Container c;
    try {
        if (!m.is_object()) inconsistent("top level is not an object");
        c.kind = m.at("kind").get<std::string>();
        if (m.contains("metadata")) c.metadata = m.at("metadata").get<Metadata>();
        const json& arrays = m.at("arrays");
        if (!arrays.is_array()) inconsistent("'arrays' is not a list");

        struct Entry {
            std::string name;
            Shape shape;
            std::uint64_t offset, nbytes;
        };
        std::vector<Entry> entries;
        std::set<std::string> names;
        const std::uint64_t payload_start = align_up(kHeaderSize + manifest_len);
        std::uint64_t declared_end = payload_start;
        for (const auto& a : arrays) {
            Entry e{a.at("name").get<std::string>(), a.at("shape").get<Shape>(), a.at("offset").get<std::uint64_t>(),
                    a.at("nbytes").get<std::uint64_t>()};
            if (e.name.empty()) inconsistent("array with empty name");
            if (!names.insert(e.name).second) inconsistent(fmt::format("duplicate array name '{}'", e.name));
            if (a.at("dtype").get<std::string>() != "f32")
                inconsistent(fmt::format("array '{}' has dtype '{}', only f32 is supported", e.name,
                                         a.at("dtype").get<std::string>()));
            std::uint64_t count = 1;
            for (auto extent : e.shape) {
                if (extent == 0) inconsistent(fmt::format("array '{}' has a zero extent", e.name));
                if (count > std::numeric_limits<std::uint64_t>::max() / 4 / extent)
                    inconsistent(fmt::format("array '{}' shape overflows", e.name));
                count *= extent;
            }
            if (e.nbytes != count * 4)
                inconsistent(fmt::format("array '{}' declares {} bytes but shape {} needs {}", e.name, e.nbytes,
                                         shape_string(e.shape), count * 4));
            if (e.offset % kContainerAlignment != 0)
                inconsistent(fmt::format("array '{}' offset {} is not 64-byte aligned", e.name, e.offset));
            if (e.offset < payload_start)
                inconsistent(fmt::format("array '{}' offset {} overlaps the header", e.name, e.offset));
            if (e.offset > std::numeric_limits<std::uint64_t>::max() - e.nbytes)
                inconsistent(fmt::format("array '{}' extent overflows", e.name));
            declared_end = std::max(declared_end, e.offset + e.nbytes);
            entries.push_back(std::move(e));
        }

        auto by_offset = entries;
        std::sort(by_offset.begin(), by_offset.end(), [](const Entry& a, const Entry& b) { return a.offset < b.offset; });
        for (std::size_t i = 1; i < by_offset.size(); ++i)
            if (by_offset[i - 1].offset + by_offset[i - 1].nbytes > by_offset[i].offset)
                inconsistent(
                    fmt::format("arrays '{}' and '{}' overlap", by_offset[i - 1].name, by_offset[i].name));

        // Sizes are checked against the actual byte count before anything is
        // allocated, so a corrupt manifest cannot request huge buffers.
        if (bytes.size() < declared_end)
            fail(ErrorKind::Truncated,
                 fmt::format("container payload truncated: expected {} bytes, got {}", declared_end, bytes.size()));
        if (bytes.size() > declared_end)
            inconsistent(fmt::format("{} trailing bytes not described by the manifest", bytes.size() - declared_end));

        for (auto& e : entries) {
            std::vector<float> values(e.nbytes / 4);
            const char* src = bytes.data() + e.offset;
            for (std::size_t k = 0; k < values.size(); ++k) values[k] = get_f32(src + 4 * k);
            for (float v : values)
                if (!std::isfinite(v)) inconsistent(fmt::format("array '{}' contains a non-finite value", e.name));
            c.arrays.push_back({std::move(e.name), Tensor(std::move(e.shape), std::move(values))});
        }
    } catch (const json::exception& e) {
        inconsistent(e.what());
    }
    return c;
}

std::string read_text_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorKind::Io, fmt::format("cannot open '{}' for reading: {}", path.string(), errno_text()));
    std::ostringstream ss;
    ss << in.rdbuf();
    if (in.bad()) fail(ErrorKind::Io, fmt::format("error reading '{}'", path.string()));
    return std::move(ss).str();
}

void write_text_file_atomic(const fs::path& path, std::string_view contents) {
    const fs::path dir = path.has_parent_path() ? path.parent_path() : fs::path(".");
    const fs::path tmp =
        dir / fmt::format(".{}.tmp.{}.{}", path.filename().string(), ::getpid(), temp_counter.fetch_add(1));

    const int fd = ::open(tmp.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_CLOEXEC, 0644);
    if (fd < 0) fail(ErrorKind::Io, fmt::format("cannot create '{}': {}", tmp.string(), errno_text()));
    const char* p = contents.data();
    std::size_t left = contents.size();
    while (left > 0) {
        const ssize_t n = ::write(fd, p, left);
        if (n < 0) {
            if (errno == EINTR) continue;
            const std::string why = errno_text();
            ::close(fd);
            ::unlink(tmp.c_str());
            fail(ErrorKind::Io, fmt::format("write to '{}' failed: {}", path.string(), why));
        }
        p += n;
        left -= static_cast<std::size_t>(n);
    }
    if (::fsync(fd) != 0 || ::close(fd) != 0) {
        const std::string why = errno_text();
        ::unlink(tmp.c_str());
        fail(ErrorKind::Io, fmt::format("flushing '{}' failed: {}", path.string(), why));
    }
    if (::rename(tmp.c_str(), path.c_str()) != 0) {
        const std::string why = errno_text();
        ::unlink(tmp.c_str());
        fail(ErrorKind::Io, fmt::format("cannot replace '{}': {}", path.string(), why));
    }
    const int dfd = ::open(dir.c_str(), O_RDONLY | O_DIRECTORY | O_CLOEXEC);
    if (dfd >= 0) {
        ::fsync(dfd);
        ::close(dfd);
    }
}

void save_container(const fs::path& path, const Container& container) {
    write_text_file_atomic(path, encode_container(container));
}

Container load_container(const fs::path& path) {
    const std::string bytes = read_text_file(path);
    try {
        return decode_container(bytes);
    } catch (const Error& e) {
        throw Error(e.kind(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

// ---------------------------------------------------------------------------
// Typed artifacts

namespace {

void expect_kind(const Container& c, std::string_view kind) {
    if (c.kind != kind)
        fail(ErrorKind::Format, fmt::format("expected a container of kind '{}', found '{}'", kind, c.kind));
}

const std::string& meta(const Container& c, const std::string& key) {
    auto it = c.metadata.find(key);
    if (it == c.metadata.end())
        fail(ErrorKind::Format, fmt::format("container of kind '{}' is missing metadata '{}'", c.kind, key));
    return it->second;
}

int meta_int(const Container& c, const std::string& key) {
    const std::string& s = meta(c, key);
    try {
        std::size_t used = 0;
        const int v = std::stoi(s, &used);
        if (used != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        fail(ErrorKind::Format, fmt::format("metadata '{}' is not an integer: '{}'", key, s));
    }
}

constexpr std::string_view kUserPrefix = "meta.";

}  // namespace

void save_model(const fs::path& path, const ModelBundle& bundle) {
    const auto& cfg = bundle.config();
    Container c;
    c.kind = "model";
    c.metadata = {{"num_layers", std::to_string(cfg.num_layers)},
                  {"hidden_dim", std::to_string(cfg.hidden_dim)},
                  {"num_heads", std::to_string(cfg.num_heads)},
                  {"vocab_size", std::to_string(cfg.vocab_size)},
                  {"max_seq_len", std::to_string(cfg.max_seq_len)}};
    for (const auto& [name, t] : bundle.weights()) c.arrays.push_back({name, t});
    save_container(path, c);
}

ModelBundle load_model(const fs::path& path) {
    Container c = load_container(path);
    expect_kind(c, "model");
    EngineConfig cfg;
    cfg.num_layers = meta_int(c, "num_layers");
    cfg.hidden_dim = meta_int(c, "hidden_dim");
    cfg.num_heads = meta_int(c, "num_heads");
    cfg.vocab_size = meta_int(c, "vocab_size");
    cfg.max_seq_len = meta_int(c, "max_seq_len");
    std::map<std::string, Tensor> weights;
    for (auto& a : c.arrays) weights.emplace(std::move(a.name), std::move(a.tensor));
    return ModelBundle(cfg, std::move(weights));
}

Container vector_to_container(const SteeringVector& v) {
    Container c;
    c.kind = "steering_vector";
    c.metadata = {{"name", v.name}, {"method_id", v.method_id}, {"source_layer", std::to_string(v.source_layer)}};
    for (const auto& [k, val] : v.metadata) c.metadata[std::string(kUserPrefix) + k] = val;

    if (!v.is_learned()) {
        c.metadata["payload"] = "direction";
        c.arrays.push_back({"direction", v.direction()});
        return c;
    }
    std::visit(
        [&](const auto& p) {
            using P = std::decay_t<decltype(p)>;
            if constexpr (std::is_same_v<P, SavParams>) {
                c.metadata["payload"] = "sav";
                c.arrays.push_back({"bias", p.bias});
            } else if constexpr (std::is_same_v<P, LmSteerParams>) {
                c.metadata["payload"] = "lmsteer";
                c.arrays.push_back({"weight", p.weight});
                c.arrays.push_back({"epsilon", Tensor::scalar(p.epsilon)});
            } else {
                c.metadata["payload"] = "loreft";
                c.arrays.push_back({"projection", p.projection});
                c.arrays.push_back({"weight", p.weight});
                c.arrays.push_back({"bias", p.bias});
            }
        },
        v.learned());
    return c;
}

SteeringVector vector_from_container(const Container& c) {
    expect_kind(c, "steering_vector");
    SteeringVector v;
    v.name = meta(c, "name");
    v.method_id = meta(c, "method_id");
    v.source_layer = meta_int(c, "source_layer");
    for (const auto& [k, val] : c.metadata)
        if (k.starts_with(kUserPrefix)) v.metadata[k.substr(kUserPrefix.size())] = val;

    const std::string& payload = meta(c, "payload");
    if (payload == "direction") {
        v.payload = c.array("direction");
    } else if (payload == "sav") {
        v.payload = LearnedSteeringParams{SavParams{c.array("bias")}};
    } else if (payload == "lmsteer") {
        v.payload = LearnedSteeringParams{LmSteerParams{c.array("weight"), c.array("epsilon").item()}};
    } else if (payload == "loreft") {
        v.payload = LearnedSteeringParams{LoreftParams{c.array("projection"), c.array("weight"), c.array("bias")}};
    } else {
        fail(ErrorKind::Format, fmt::format("unknown steering vector payload '{}'", payload));
    }
    if (v.is_learned()) {
        try {
            validate_params(v.learned(), v.dim());
        } catch (const Error& e) {
            fail(ErrorKind::ManifestInconsistent, fmt::format("stored parameters are inconsistent: {}", e.what()));
        }
    } else if (v.direction().rank() != 1) {
        fail(ErrorKind::ManifestInconsistent, "stored direction is not a vector");
    }
    return v;
}

void save_vector(const fs::path& path, const SteeringVector& vector) {
    save_container(path, vector_to_container(vector));
}

SteeringVector load_vector(const fs::path& path) { return vector_from_container(load_container(path)); }

void save_sae(const fs::path& path, const SaeWeights& sae) {
    sae.validate();
    Container c;
    c.kind = "sae";
    c.metadata["feature_labels"] = dump_json(json(sae.feature_labels));
    c.arrays = {{"w_enc", sae.w_enc}, {"b_enc", sae.b_enc}, {"w_dec", sae.w_dec}, {"b_dec", sae.b_dec}};
    save_container(path, c);
}

SaeWeights load_sae(const fs::path& path) {
    Container c = load_container(path);
    expect_kind(c, "sae");
    SaeWeights sae{c.array("w_enc"), c.array("b_enc"), c.array("w_dec"), c.array("b_dec"), {}};
    try {
        sae.feature_labels = json::parse(meta(c, "feature_labels")).get<std::vector<std::string>>();
    } catch (const json::exception& e) {
        fail(ErrorKind::Format, fmt::format("sae feature labels are malformed: {}", e.what()));
    }
    try {
        sae.validate();
    } catch (const Error& e) {
        fail(ErrorKind::ManifestInconsistent, fmt::format("stored SAE is inconsistent: {}", e.what()));
    }
    return sae;
}

// ---------------------------------------------------------------------------
// Text datasets

std::vector<int> byte_tokenize(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (char ch : text) out.push_back(static_cast<unsigned char>(ch));
    return out;
}

std::string byte_detokenize(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t < 0 || t > kEosToken) fail(ErrorKind::Domain, fmt::format("token {} is not a byte", t));
        if (t != kEosToken) out.push_back(static_cast<char>(t));
    }
    return out;
}

std::string_view to_string(DatasetKind kind) {
    switch (kind) {
        case DatasetKind::contrastive: return "contrastive";
        case DatasetKind::io: return "io";
        case DatasetKind::preference: return "preference";
    }
    return "unknown";
}

DatasetKind dataset_kind_from_string(std::string_view name) {
    for (auto k : {DatasetKind::contrastive, DatasetKind::io, DatasetKind::preference})
        if (to_string(k) == name) return k;
    fail(ErrorKind::Validation, fmt::format("unknown dataset kind '{}' (contrastive, io, preference)", name));
}

Dataset parse_dataset(std::string_view text, DatasetKind kind) {
    const std::size_t arity = kind == DatasetKind::preference ? 3 : 2;
    std::vector<std::vector<std::vector<int>>> records;

    std::size_t line_no = 0;
    std::size_t pos = 0;
    while (pos < text.size()) {
        std::size_t end = text.find('\n', pos);
        if (end == std::string_view::npos) end = text.size();
        std::string_view line = text.substr(pos, end - pos);
        pos = end + 1;
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
        if (line.empty()) continue;

        std::vector<std::vector<int>> fields;
        std::size_t fpos = 0;
        while (true) {
            const std::size_t tab = line.find('\t', fpos);
            const std::string_view field = line.substr(fpos, tab == std::string_view::npos ? tab : tab - fpos);
            if (field.empty())
                fail(ErrorKind::Format, fmt::format("line {}: field {} is empty", line_no, fields.size() + 1));
            if (field.find('\xFF') != std::string_view::npos)
                fail(ErrorKind::Format, fmt::format("line {}: byte 0xFF is reserved for end-of-sequence", line_no));
            fields.push_back(byte_tokenize(field));
            if (tab == std::string_view::npos) break;
            fpos = tab + 1;
        }
        if (fields.size() != arity)
            fail(ErrorKind::Format, fmt::format("line {}: expected {} tab-separated fields for a {} dataset, found {}",
                                                line_no, arity, to_string(kind), fields.size()));
        records.push_back(std::move(fields));
    }
    if (records.empty()) fail(ErrorKind::Domain, "dataset contains no records");

    if (kind == DatasetKind::contrastive) {
        ContrastivePairSet set;
        for (auto& r : records) set.pairs.push_back({std::move(r[0]), std::move(r[1])});
        return set;
    }
    TaskDataset data;
    for (auto& r : records) {
        if (kind == DatasetKind::io)
            data.io_pairs.push_back({std::move(r[0]), std::move(r[1])});
        else
            data.preference_pairs.push_back({std::move(r[0]), std::move(r[1]), std::move(r[2])});
    }
    return data;
}

Dataset load_dataset(const fs::path& path, DatasetKind kind) {
    const std::string text = read_text_file(path);
    try {
        return parse_dataset(text, kind);
    } catch (const Error& e) {
        throw Error(e.kind(), fmt::format("{}: {}", path.string(), e.what()));
    }
}

ContrastivePairSet load_contrastive_dataset(const fs::path& path) {
    return std::get<ContrastivePairSet>(load_dataset(path, DatasetKind::contrastive));
}

TaskDataset load_task_dataset(const fs::path& path, DatasetKind kind) {
    if (kind == DatasetKind::contrastive) fail(ErrorKind::Validation, "a task dataset is io or preference");
    return std::get<TaskDataset>(load_dataset(path, kind));
}

}  // namespace steerkit
