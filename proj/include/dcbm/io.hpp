#pragma once

// Deterministic text I/O: CSV emission with fixed float formatting (so a
// rerun with the same seed produces byte-identical files) and hexfloat
// round-tripping for bit-exact model serialization.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dcbm/errors.hpp"
#include "dcbm/matrix.hpp"

namespace dcbm {

/// 17 significant digits: enough to reproduce any double exactly on parse,
/// and a pure function of the value (no locale, no shortest-repr variance).
inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

/// Bit-exact textual form (C99 hexfloat).
inline std::string fmt_hex(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%a", v);
    return buf;
}

inline double parse_double(const std::string& s) {
    try {
        return std::stod(s);
    } catch (const std::exception&) {
        throw NumericError("parse_double: cannot parse '" + s + "'");
    }
}

inline void write_text_file(const std::filesystem::path& path, const std::string& body) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open for writing: " + path.string());
    out << body;
    if (!out) throw ConfigError("write failed: " + path.string());
}

inline std::string read_text_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open for reading: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

/// Matrix as CSV with a generated header `prefix0,prefix1,...`.
inline void write_matrix_csv(const std::filesystem::path& path, const Matrix& m,
                             const std::string& prefix) {
    std::string body;
    body.reserve(m.rows * m.cols * 12);
    for (std::size_t c = 0; c < m.cols; ++c) {
        if (c) body += ',';
        body += prefix + std::to_string(c);
    }
    body += '\n';
    for (std::size_t r = 0; r < m.rows; ++r) {
        for (std::size_t c = 0; c < m.cols; ++c) {
            if (c) body += ',';
            body += fmt_double(m(r, c));
        }
        body += '\n';
    }
    write_text_file(path, body);
}

/// Rows assembled by the caller; every row must match the header's arity.
class CsvWriter {
  public:
    explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {
        for (std::size_t i = 0; i < header_.size(); ++i) {
            if (i) body_ += ',';
            body_ += header_[i];
        }
        body_ += '\n';
    }

    void add_row(const std::vector<std::string>& cells) {
        if (cells.size() != header_.size())
            throw ShapeError("CsvWriter: row arity mismatch");
        for (std::size_t i = 0; i < cells.size(); ++i) {
            if (i) body_ += ',';
            body_ += cells[i];
        }
        body_ += '\n';
    }

    const std::string& body() const { return body_; }

    void save(const std::filesystem::path& path) const { write_text_file(path, body_); }

  private:
    std::vector<std::string> header_;
    std::string body_;
};

} // namespace dcbm
