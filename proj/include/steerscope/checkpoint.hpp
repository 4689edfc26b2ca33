#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "steerscope/attribution.hpp"
#include "steerscope/model.hpp"
#include "steerscope/steering.hpp"

namespace steerscope {

enum class CheckpointKind : std::uint32_t { model = 1, vector = 2, iestore = 3 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Binary container: "STSC", u32 version, u32 kind, u64 metadata length + JSON
/// metadata, u32 tensor count, per tensor (u32 name length, name, u32 rank,
/// u64 dims...), the f64 payload of every tensor in table order, then a u32
/// CRC-32 of all preceding bytes. Integers and floats are little-endian.
struct Checkpoint {
  CheckpointKind kind = CheckpointKind::model;
  std::string metadata;  // JSON text
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor& tensor(const std::string& name) const;
};

std::vector<unsigned char> encode(const Checkpoint& ckpt);
Checkpoint decode(const std::vector<unsigned char>& bytes);

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint model_checkpoint(const Model& model);
Model model_from_checkpoint(const Checkpoint& ckpt);
Checkpoint vector_checkpoint(const SteeringVector& v);
SteeringVector vector_from_checkpoint(const Checkpoint& ckpt);
Checkpoint iestore_checkpoint(const IEStore& store);
IEStore iestore_from_checkpoint(const Checkpoint& ckpt);

void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);
void save_vector(const SteeringVector& v, const std::filesystem::path& path);
SteeringVector load_vector(const std::filesystem::path& path);
void save_iestore(const IEStore& store, const std::filesystem::path& path);
IEStore load_iestore(const std::filesystem::path& path);

}  // namespace steerscope
