#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace p3d {

std::uint32_t crc32(const unsigned char* data, std::size_t len);
std::uint32_t crc32(const std::string& bytes);

std::string read_file_bytes(const std::filesystem::path& path);

// Writes via a sibling temp file and rename, so readers never observe a
// partial file.
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

void append_f32le(std::string& out, float v);
void append_u32le(std::string& out, std::uint32_t v);
void append_u16le(std::string& out, std::uint16_t v);
float read_f32le(const unsigned char* p);
std::uint32_t read_u32le(const unsigned char* p);
std::uint16_t read_u16le(const unsigned char* p);

std::string floats_to_le_bytes(const std::vector<float>& v);
std::vector<float> le_bytes_to_floats(const std::string& bytes);

std::string hex_u32(std::uint32_t v);
std::uint32_t parse_hex_u32(const std::string& s);

}  // namespace p3d
