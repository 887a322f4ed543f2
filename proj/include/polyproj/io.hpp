/**
 * @file io.hpp
 * @brief Minimal CSV I/O with a fixed dialect: header row, comma separator,
 *        UTF-8, LF line endings, doubles printed with 17 significant digits.
 */
#pragma once

#include <Eigen/Dense>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace polyproj {

/// Shortest round-trip-exact decimal representation of a double.
inline std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    int column(const std::string& name) const {
        for (std::size_t j = 0; j < header.size(); ++j)
            if (header[j] == name) return static_cast<int>(j);
        return -1;
    }

    double number(std::size_t i, int j) const { return std::stod(rows[i][j]); }
};

/// Splits one CSV line. Double-quoted fields may contain commas and embedded
/// quotes written as "" (the subset CsvWriter emits); newlines inside fields
/// are not supported.
inline std::vector<std::string> split_csv_line(const std::string& raw) {
    std::string line = raw;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    std::vector<std::string> out;
    std::string field;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c != '"') {
                field += c;
            } else if (i + 1 < line.size() && line[i + 1] == '"') {
                field += '"';
                ++i;
            } else {
                quoted = false;
            }
        } else if (c == '"' && field.empty()) {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(field));
            field.clear();
        } else {
            field += c;
        }
    }
    out.push_back(std::move(field));
    return out;
}

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open CSV file: " + path);
    CsvTable t;
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error("empty CSV file: " + path);
    t.header = split_csv_line(line);
    while (std::getline(in, line)) {
        if (line.empty() || (line.size() == 1 && line[0] == '\r')) continue;
        auto fields = split_csv_line(line);
        if (fields.size() != t.header.size())
            throw std::runtime_error("ragged CSV row in " + path);
        t.rows.push_back(std::move(fields));
    }
    return t;
}

class CsvWriter {
  public:
    CsvWriter(const std::string& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw std::runtime_error("cannot open CSV file for writing: " + path);
        columns_ = header.size();
        for (std::size_t j = 0; j < header.size(); ++j) {
            if (j) out_ << ',';
            write_field(header[j]);
        }
        out_ << '\n';
    }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != columns_) throw std::runtime_error("CSV row width mismatch");
        for (std::size_t j = 0; j < fields.size(); ++j) {
            if (j) out_ << ',';
            write_field(fields[j]);
        }
        out_ << '\n';
    }

  private:
    // Quotes only fields that need it, so numeric output stays unquoted.
    void write_field(const std::string& f) {
        if (f.find_first_of(",\"\n") == std::string::npos) {
            out_ << f;
            return;
        }
        out_ << '"';
        for (char c : f) {
            if (c == '"') out_ << '"';
            out_ << c;
        }
        out_ << '"';
    }

    std::ofstream out_;
    std::size_t columns_;
};

/**
 * @brief Read a dataset CSV with header columns x_1..x_d,y.
 *
 * A single `y` column (d = 0) is allowed for problems whose design is given
 * separately (posets via an edge list).
 */
struct DatasetCsv {
    Eigen::MatrixXd X; // n x d, d may be 0
    Eigen::VectorXd y; // n
};

inline DatasetCsv read_dataset_csv(const std::string& path) {
    CsvTable t = read_csv(path);
    const int ycol = t.column("y");
    if (ycol < 0) throw std::runtime_error("dataset CSV lacks a 'y' column: " + path);
    std::vector<int> xcols;
    for (std::size_t j = 0; j < t.header.size(); ++j)
        if (static_cast<int>(j) != ycol) xcols.push_back(static_cast<int>(j));
    DatasetCsv d;
    const auto n = static_cast<Eigen::Index>(t.rows.size());
    d.X.resize(n, static_cast<Eigen::Index>(xcols.size()));
    d.y.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < xcols.size(); ++j)
            d.X(i, static_cast<Eigen::Index>(j)) = t.number(i, xcols[j]);
        d.y(i) = t.number(i, ycol);
    }
    return d;
}

/// Read an edge-list CSV with header i,j (0-based node indices).
inline std::vector<std::pair<int, int>> read_edges_csv(const std::string& path) {
    CsvTable t = read_csv(path);
    const int ic = t.column("i"), jc = t.column("j");
    if (ic < 0 || jc < 0) throw std::runtime_error("edge CSV needs columns i,j: " + path);
    std::vector<std::pair<int, int>> edges;
    edges.reserve(t.rows.size());
    for (std::size_t r = 0; r < t.rows.size(); ++r)
        edges.emplace_back(static_cast<int>(t.number(r, ic)), static_cast<int>(t.number(r, jc)));
    return edges;
}

/// Read a dense matrix CSV (all columns numeric, header names ignored).
inline Eigen::MatrixXd read_matrix_csv(const std::string& path) {
    CsvTable t = read_csv(path);
    Eigen::MatrixXd M(static_cast<Eigen::Index>(t.rows.size()),
                      static_cast<Eigen::Index>(t.header.size()));
    for (Eigen::Index i = 0; i < M.rows(); ++i)
        for (Eigen::Index j = 0; j < M.cols(); ++j) M(i, j) = t.number(i, static_cast<int>(j));
    return M;
}

} // namespace polyproj
