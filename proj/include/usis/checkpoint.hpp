// checkpoint.hpp
//
// Single-file archive of the trainable parameters. Layout: 8-byte magic,
// u32 version, u64 manifest length, JSON manifest (model config, backbone
// config hash, parameter names/shapes/offsets), then raw little-endian
// doubles. The frozen backbone is rebuilt from the config.

#pragma once

#include <filesystem>

#include "usis/model.hpp"

namespace usis {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const UsisSam& model, const std::filesystem::path& path);

/// Throws IoError, ParseError or IntegrityError (hash or manifest mismatch).
UsisSam load_checkpoint(const std::filesystem::path& path);

} // namespace usis
