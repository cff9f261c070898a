#pragma once

// Small helpers shared by the text artifact formats (gate, policy, CSV).
// Numbers go through <charconv>, so output never depends on the C locale.

#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

namespace duoattn {

// Shortest decimal that round-trips to the same double.
std::string format_real(double v);
double parse_real(std::string_view s, const std::string& source, std::size_t line);
std::size_t parse_count(std::string_view s, const std::string& source, std::size_t line);

std::vector<std::string> split(std::string_view s, char sep);

void write_text_file(const std::filesystem::path& path, const std::string& content);
std::vector<std::string> read_text_lines(const std::filesystem::path& path);

// Parses `<magic> v1 k=v k=v ...`; throws ParseError (line 1) on a wrong magic
// or version.
std::map<std::string, std::string> parse_header(std::string_view line, std::string_view magic,
                                                const std::string& source);
std::size_t header_count(const std::map<std::string, std::string>& header, const std::string& key,
                         const std::string& source);
double header_real(const std::map<std::string, std::string>& header, const std::string& key,
                   const std::string& source);

}  // namespace duoattn
