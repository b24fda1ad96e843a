#pragma once

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace fediptw {

// Shortest representation that round-trips.
std::string format_double(double v);

std::vector<std::string_view> split_csv_line(std::string_view line);

// Whole-file helpers. write_file creates parent directories.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view content);

// Header plus rows of a comma-separated file without quoting.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  // Index of a header column; throws IngestError if absent.
  std::size_t column(std::string_view name) const;
};
CsvTable read_csv_table(const std::filesystem::path& path);

// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace fediptw
