// SPDX-License-Identifier: Apache-2.0
// Minimal numeric CSV reading shared by the dataset formats.
#pragma once

#include <charconv>
#include <istream>
#include <stdexcept>
#include <string>
#include <system_error>
#include <vector>

namespace dcbf {

namespace detail {

inline double parse_double(const std::string& field, std::size_t line) {
    double v = 0.0;
    const char* first = field.data();
    const char* last = first + field.size();
    while (first < last && *first == ' ') ++first;
    while (last > first && (last[-1] == ' ' || last[-1] == '\r')) --last;
    const auto res = std::from_chars(first, last, v);
    if (res.ec != std::errc{} || res.ptr != last) {
        throw std::invalid_argument("line " + std::to_string(line) + ": cannot parse number '" + field + "'");
    }
    return v;
}

//! Splits a CSV line on commas (no quoting).
inline std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (const char c : line) {
        if (c == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (c != '\r') {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

inline std::vector<std::vector<double>> read_numeric_csv(std::istream& in, const std::vector<std::string>& header) {
    std::string line;
    if (!std::getline(in, line) || split_csv(line) != header) {
        std::string expected;
        for (const auto& h : header) expected += (expected.empty() ? "" : ",") + h;
        throw std::invalid_argument("CSV: expected header '" + expected + "'");
    }
    std::vector<std::vector<double>> rows;
    for (std::size_t lineno = 2; std::getline(in, line); ++lineno) {
        if (line.empty() || line == "\r") continue;
        const auto fields = split_csv(line);
        if (fields.size() != header.size()) {
            throw std::invalid_argument("CSV line " + std::to_string(lineno) + ": wrong field count");
        }
        std::vector<double> row;
        for (const auto& f : fields) row.push_back(parse_double(f, lineno));
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace detail

}  // namespace dcbf
