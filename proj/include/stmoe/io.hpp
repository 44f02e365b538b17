#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace stmoe::io {

std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

/// Little-endian IEEE-754 binary32, independent of host byte order.
void append_f32le(std::string& out, std::span<const double> values);
std::vector<double> parse_f32le(std::string_view bytes);
std::vector<double> read_f32le(const std::filesystem::path& path, std::size_t expected_count);

void append_u32le(std::string& out, std::uint32_t v);
std::uint32_t parse_u32le(std::string_view bytes, std::size_t offset);

/// SHA-1 of "blob <size>\0<content>", the way git names file contents.
std::string git_blob_sha1(std::string_view content);

}  // namespace stmoe::io
