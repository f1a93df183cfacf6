#pragma once

// Small file helpers shared by the CSV/JSON writers.

#include <filesystem>
#include <string>
#include <vector>

namespace wali {

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, const std::string& contents);

/// Shortest round-trippable decimal form of a double.
std::string format_double(double v);

/// Plain comma-separated rows; no quoting (none of our fields contain commas).
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);
std::vector<std::string> read_lines(const std::filesystem::path& path);

/// Git-style content hash: SHA-1 over "blob <size>\0<bytes>", hex encoded.
std::string git_blob_hash(const std::string& bytes);
std::string git_blob_hash_file(const std::filesystem::path& path);

}  // namespace wali
