#pragma once

#include <filesystem>
#include <memory>

#include "elit/binary_io.hpp"
#include "elit/run_config.hpp"
#include "elit/train.hpp"

namespace elit {

inline constexpr std::uint32_t kCheckpointVersion = 1;

// Archive written by a different format version.
class CheckpointVersionError : public IntegrityError {
public:
    using IntegrityError::IntegrityError;
};

struct LoadedCheckpoint {
    RunConfig config;
    std::unique_ptr<TrainState> state;
};

// Layout (little-endian):
//   "ELITCKPT" u32 version
//   string config (canonical YAML)
//   i64 step, string rng state
//   u32 tensor count, then per tensor: string name, u8 dtype (0 = f32),
//     u32 rank, u64 dims[rank], raw data in row-major order
//   u32 crc32 of everything before it
// Tensors are stored under param/, adam_m/, adam_v/ and ema/ prefixes in
// name order, so equal states give equal bytes.
std::vector<unsigned char> serialize_checkpoint(const RunConfig& cfg, const TrainState& state);
LoadedCheckpoint deserialize_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const std::filesystem::path& path, const RunConfig& cfg, const TrainState& state);
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

} // namespace elit
