#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include "steerkit/extraction.hpp"
#include "steerkit/learning.hpp"
#include "steerkit/model.hpp"
#include "steerkit/steering.hpp"

namespace steerkit {

// On-disk layout, all integers little-endian:
//   "STWT" | u16 version | u16 reserved | u64 manifest length | JSON manifest
//   | zero padding | f32 arrays, each starting on a 64-byte boundary.
// Array offsets in the manifest are absolute file offsets.
inline constexpr std::uint16_t kContainerVersion = 1;
inline constexpr std::size_t kContainerAlignment = 64;

using Metadata = std::map<std::string, std::string>;

struct NamedArray {
    std::string name;
    Tensor tensor;
};

struct Container {
    std::string kind;
    Metadata metadata;
    std::vector<NamedArray> arrays;

    const Tensor& array(std::string_view name) const;
    bool has_array(std::string_view name) const;
};

// Writes atomically: a temporary sibling file is written and fsynced, then
// renamed over the target.
void save_container(const std::filesystem::path& path, const Container& container);
Container load_container(const std::filesystem::path& path);

// In-memory forms of the same layout.
std::string encode_container(const Container& container);
Container decode_container(std::string_view bytes);

void save_model(const std::filesystem::path& path, const ModelBundle& bundle);
ModelBundle load_model(const std::filesystem::path& path);

// Direction vectors and learned parameter sets share one kind.
void save_vector(const std::filesystem::path& path, const SteeringVector& vector);
SteeringVector load_vector(const std::filesystem::path& path);
Container vector_to_container(const SteeringVector& vector);
SteeringVector vector_from_container(const Container& container);

void save_sae(const std::filesystem::path& path, const SaeWeights& sae);
SaeWeights load_sae(const std::filesystem::path& path);

// Byte-level tokenizer: one token per byte. Byte 255 never occurs in UTF-8
// and doubles as end-of-sequence.
std::vector<int> byte_tokenize(std::string_view text);
// Drops end-of-sequence tokens.
std::string byte_detokenize(std::span<const int> tokens);

enum class DatasetKind {
    contrastive,  // positive \t negative
    io,           // prompt \t target
    preference,   // prompt \t preferred \t dispreferred
};

std::string_view to_string(DatasetKind kind);
DatasetKind dataset_kind_from_string(std::string_view name);

using Dataset = std::variant<ContrastivePairSet, TaskDataset>;

// Tab-separated text, CRLF normalised to LF, blank lines skipped.
Dataset parse_dataset(std::string_view text, DatasetKind kind);
Dataset load_dataset(const std::filesystem::path& path, DatasetKind kind);
ContrastivePairSet load_contrastive_dataset(const std::filesystem::path& path);
TaskDataset load_task_dataset(const std::filesystem::path& path, DatasetKind kind);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file_atomic(const std::filesystem::path& path, std::string_view contents);

}  // namespace steerkit
