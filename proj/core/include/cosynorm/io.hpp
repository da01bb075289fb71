#pragma once

// Binary and text formats shared by the tools.
//
// Checkpoint:  "COSYNORM1" | u32 count | count x { u32 name_len | name bytes |
//              u32 rank | rank x u32 dim | f32 values }      (little-endian)
// Features:    u32 T | u32 D | T*D f32, row-major               (little-endian)
// Labels:      one line of space-separated integers

#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "cosynorm/ctc.hpp"
#include "cosynorm/tensor.hpp"

namespace cosynorm {

inline constexpr char kCheckpointMagic[] = "COSYNORM1";

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct CheckpointRecord {
  std::string name;
  std::vector<std::uint32_t> dims;
  std::vector<float> values;

  bool operator==(const CheckpointRecord&) const = default;
};

std::vector<unsigned char> encode_checkpoint(const std::vector<CheckpointRecord>& records);
std::vector<CheckpointRecord> decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const ParameterStore<float>& store, const std::filesystem::path& path);
/// Loads values into an already-constructed store; names and shapes must match exactly.
void load_checkpoint(ParameterStore<float>& store, const std::filesystem::path& path);
std::vector<CheckpointRecord> read_checkpoint(const std::filesystem::path& path);

void write_features(const FeatureSeq& features, const std::filesystem::path& path);
FeatureSeq read_features(const std::filesystem::path& path);

void write_labels(const LabelSeq& labels, const std::filesystem::path& path);
LabelSeq read_labels(const std::filesystem::path& path);

std::vector<unsigned char> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::vector<unsigned char>& bytes, const std::filesystem::path& path);

}  // namespace cosynorm
