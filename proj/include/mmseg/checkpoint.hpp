#ifndef MMSEG_CHECKPOINT_HPP
#define MMSEG_CHECKPOINT_HPP

#include <filesystem>
#include <string>

#include "mmseg/network.hpp"

namespace mmseg {

// "MMSEGCKP", u32 version, u32 length + config text, u32 parameter count,
// then per parameter: u32 length + name, u32 rank, u32 dims..., f32 values.
inline constexpr char kCheckpointMagic[8] = {'M', 'M', 'S', 'E', 'G', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Written to a sibling temporary and renamed into place.
void save_checkpoint(const std::filesystem::path& path, const Model<float>& model);

/// Throws IO_ERROR for unreadable or truncated files and
/// CHECKPOINT_MISMATCH when the stored tensors disagree with the config.
Model<float> load_checkpoint(const std::filesystem::path& path);

/// As above, additionally requiring the stored config to equal `expected`.
Model<float> load_checkpoint(const std::filesystem::path& path,
                             const NetworkConfig& expected);

/// Human-readable summary: config, parameter names, shapes and counts.
std::string inspect_checkpoint(const std::filesystem::path& path);

} // namespace mmseg

#endif
