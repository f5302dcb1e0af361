#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "ttav/codec.hpp"

// TLAT latent-stream files. 16-byte little-endian header:
//   "TLAT" | version u16 | modality u8 | reserved u8 | frame_count u32 |
//   dim u16 | frame_rate u16
// followed by frame_count × dim float32 values, row-major.
namespace ttav::tlat {

inline constexpr std::uint16_t kVersion = 1;
inline constexpr std::size_t kHeaderBytes = 16;

std::vector<std::uint8_t> encode(const codec::LatentStream& stream);
codec::LatentStream decode(const std::vector<std::uint8_t>& bytes);

void write(const std::filesystem::path& path, const codec::LatentStream& stream);
codec::LatentStream read(const std::filesystem::path& path);

}  // namespace ttav::tlat
