#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rfedit/core.hpp"

namespace rfedit::io {

// Binary 8-bit PPM (P6). 1- or 3-channel float images in [0,1];
// single-channel images are replicated to gray on write.
void write_ppm(const std::filesystem::path& path, const Image& img);
Image read_ppm(const std::filesystem::path& path);

// Binary 8-bit PGM (P5), values x 255, rounded half-up.
void write_pgm(const std::filesystem::path& path, const TokenMap& map);
TokenMap read_pgm(const std::filesystem::path& path);

// Lossless raw export of a token map: magic, dims, little-endian f32.
void write_map_raw(const std::filesystem::path& path, const TokenMap& map);
TokenMap read_map_raw(const std::filesystem::path& path);

// Plain-text key=value manifest, keys written in sorted order.
void write_manifest(const std::filesystem::path& path,
                    const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_manifest(const std::filesystem::path& path);

void write_f32_le(std::ostream& os, const float* data, size_t n);
void read_f32_le(std::istream& is, float* data, size_t n);
void write_u32_le(std::ostream& os, uint32_t v);
uint32_t read_u32_le(std::istream& is);

}  // namespace rfedit::io
