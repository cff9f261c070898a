#include "duoattn/textio.hpp"

#include <array>
#include <charconv>
#include <fstream>
#include <sstream>

#include "duoattn/errors.hpp"

namespace duoattn {

std::string format_real(double v) {
    std::array<char, 64> buf{};
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    return std::string(buf.data(), res.ptr);
}

double parse_real(std::string_view s, const std::string& source, std::size_t line) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\r')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\r')) s.remove_suffix(1);
    double v = 0.0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ParseError(source, line, "invalid number '" + std::string(s) + "'");
    }
    return v;
}

std::size_t parse_count(std::string_view s, const std::string& source, std::size_t line) {
    std::size_t v = 0;
    const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (s.empty() || res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
        throw ParseError(source, line, "invalid count '" + std::string(s) + "'");
    }
    return v;
}

std::vector<std::string> split(std::string_view s, char sep) {
    std::vector<std::string> out;
    std::size_t start = 0;
    for (;;) {
        const auto pos = s.find(sep, start);
        out.emplace_back(s.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

void write_text_file(const std::filesystem::path& path, const std::string& content) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open " + path.string() + " for writing");
    os << content;
    if (!os) throw IoError("failed writing " + path.string());
}

std::vector<std::string> read_text_lines(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path.string());
    std::vector<std::string> lines;
    std::string line;
    while (std::getline(is, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        lines.push_back(line);
    }
    return lines;
}

std::map<std::string, std::string> parse_header(std::string_view line, std::string_view magic,
                                                const std::string& source) {
    const auto fields = split(line, ' ');
    if (fields.size() < 2 || fields[0] != magic) {
        throw ParseError(source, 1, "expected header starting with '" + std::string(magic) + "'");
    }
    if (fields[1] != "v1") throw ParseError(source, 1, "unsupported version '" + fields[1] + "'");
    std::map<std::string, std::string> kv;
    for (std::size_t i = 2; i < fields.size(); ++i) {
        if (fields[i].empty()) continue;
        const auto eq = fields[i].find('=');
        if (eq == std::string::npos) throw ParseError(source, 1, "malformed header field '" + fields[i] + "'");
        kv[fields[i].substr(0, eq)] = fields[i].substr(eq + 1);
    }
    return kv;
}

std::size_t header_count(const std::map<std::string, std::string>& header, const std::string& key,
                         const std::string& source) {
    const auto it = header.find(key);
    if (it == header.end()) throw ParseError(source, 1, "header is missing " + key + "=");
    return parse_count(it->second, source, 1);
}

double header_real(const std::map<std::string, std::string>& header, const std::string& key,
                   const std::string& source) {
    const auto it = header.find(key);
    if (it == header.end()) throw ParseError(source, 1, "header is missing " + key + "=");
    return parse_real(it->second, source, 1);
}

}  // namespace duoattn
