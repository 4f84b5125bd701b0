// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "sensdef/error.hpp"

namespace sensdef {

/// Shortest-safe decimal for a double: 17 significant digits round-trip exactly.
inline std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace detail {

inline std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::vector<std::string_view> split_fields(std::string_view line, char sep = ',') {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        out.push_back(trim(line.substr(start, pos == std::string_view::npos ? std::string_view::npos : pos - start)));
        if (pos == std::string_view::npos) break;
        start = pos + 1;
    }
    return out;
}

inline bool parse_double(std::string_view s, double& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), out);
    return ec == std::errc() && ptr == s.data() + s.size();
}

inline std::string location(const std::string& source, std::size_t line) {
    return source + ":" + std::to_string(line);
}

}  // namespace detail

/// Parses a rectangular numeric CSV (no header). Blank lines are skipped.
inline std::vector<std::vector<double>> parse_csv_matrix(const std::string& text, const std::string& source) {
    std::vector<std::vector<double>> rows;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (detail::trim(line).empty()) continue;
        std::vector<double> row;
        for (auto field : detail::split_fields(line)) {
            double v;
            if (!detail::parse_double(field, v))
                throw ValidationError(detail::location(source, lineno) + ": malformed number '" + std::string(field) + "'");
            row.push_back(v);
        }
        if (!rows.empty() && row.size() != rows.front().size())
            throw ValidationError(detail::location(source, lineno) + ": expected " +
                                  std::to_string(rows.front().size()) + " columns, got " + std::to_string(row.size()));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline std::string read_text_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ValidationError("cannot open file: " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_text_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write file: " + path);
    out << text;
    if (!out) throw std::runtime_error("write failed: " + path);
}

}  // namespace sensdef
