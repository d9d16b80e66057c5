#pragma once

// CSV tables, JSON manifests and ensemble / solution export.

#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

#include <json.hpp>

#include "bsdelab/bsde.hpp"
#include "bsdelab/forward.hpp"

namespace bsdelab {

using Json = nlohmann::ordered_json;

/// 64-bit FNV-1a.
inline std::uint64_t fnv1a64(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

/// Shortest round-trip decimal for a double.
inline std::string format_double(double v) {
    char buf[32];
    for (int prec = 15; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

class CsvTable {
public:
    using Cell = std::variant<double, long long, std::string>;

    CsvTable() = default;
    explicit CsvTable(std::vector<std::string> columns) : columns_(std::move(columns)) {}

    void add(std::vector<Cell> row) {
        if (row.size() != columns_.size()) throw std::invalid_argument("CsvTable: row width differs from header");
        rows_.push_back(std::move(row));
    }
    [[nodiscard]] const std::vector<std::string>& columns() const noexcept { return columns_; }
    [[nodiscard]] std::size_t size() const noexcept { return rows_.size(); }
    [[nodiscard]] const std::vector<Cell>& row(std::size_t i) const { return rows_.at(i); }

    void write(std::ostream& os) const {
        for (std::size_t c = 0; c < columns_.size(); ++c) os << (c ? "," : "") << columns_[c];
        os << '\n';
        for (const auto& r : rows_) {
            for (std::size_t c = 0; c < r.size(); ++c) {
                if (c) os << ',';
                std::visit(
                    [&](const auto& v) {
                        using T = std::decay_t<decltype(v)>;
                        if constexpr (std::is_same_v<T, double>) os << format_double(v);
                        else if constexpr (std::is_same_v<T, long long>) os << v;
                        else os << quote(v);
                    },
                    r[c]);
            }
            os << '\n';
        }
    }
    void write(const std::filesystem::path& p) const {
        std::ofstream f(p);
        if (!f) throw std::runtime_error("CsvTable: cannot open " + p.string());
        write(f);
    }

private:
    static std::string quote(const std::string& s) {
        if (s.find_first_of(",\"\n") == std::string::npos) return s;
        std::string o = "\"";
        for (char c : s) o += c == '"' ? std::string("\"\"") : std::string(1, c);
        return o + "\"";
    }
    std::vector<std::string> columns_;
    std::vector<std::vector<CsvTable::Cell>> rows_;
};

inline void write_json(const Json& j, const std::filesystem::path& p) {
    std::ofstream f(p);
    if (!f) throw std::runtime_error("write_json: cannot open " + p.string());
    f << j.dump(2) << '\n';
}

inline Json summary_json(const McSummary& m) {
    return Json{{"mean", m.mean}, {"se", m.se}, {"n", m.n}, {"level", m.level}};
}

/// Columnar (path, step, mode, value) export plus a replay manifest.
inline void write_ensemble(const PathEnsemble& ens, const std::filesystem::path& csv, const std::filesystem::path& manifest,
                           const std::string& config_hash, std::size_t max_paths = 0) {
    const std::size_t n = max_paths ? std::min(max_paths, ens.n_paths()) : ens.n_paths();
    const std::size_t d = ens.dim();
    std::ofstream f(csv);
    if (!f) throw std::runtime_error("write_ensemble: cannot open " + csv.string());
    f << "path,step,mode,value\n";
    for (std::size_t j = 0; j <= ens.steps(); ++j) {
        const auto X = ens.states(j);
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t k = 0; k < d; ++k) f << p << ',' << j << ',' << k << ',' << format_double(X[p * d + k]) << '\n';
    }
    Json m{{"seed", ens.seed()},
           {"config_hash", config_hash},
           {"n_paths", ens.n_paths()},
           {"exported_paths", n},
           {"steps", ens.steps()},
           {"dim", d},
           {"t0", ens.grid().t0},
           {"T", ens.grid().T},
           {"noise_alpha", ens.noise_alpha()},
           {"drift", ens.spec().drift.name()}};
    write_json(m, manifest);
}

/// (t, path, Y, Z modes) for the first paths, plus a JSON summary.
inline void write_solution(const BsdeSolution& sol, const PathEnsemble& ens, const std::filesystem::path& csv,
                           const std::filesystem::path& summary, const std::string& config_hash,
                           std::size_t max_paths = 100) {
    const std::size_t n = std::min(max_paths, ens.n_paths()), d = ens.dim();
    std::ofstream f(csv);
    if (!f) throw std::runtime_error("write_solution: cannot open " + csv.string());
    f << "t,path,Y";
    for (std::size_t k = 0; k < d; ++k) f << ",Z" << k;
    f << '\n';
    std::vector<double> z(d);
    for (std::size_t j = 0; j <= ens.steps(); ++j) {
        const auto X = ens.states(j);
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = X.subspan(p * d, d);
            f << format_double(ens.grid().node(j)) << ',' << p << ',' << format_double(sol.y(j, x));
            sol.z(j, x, z);
            for (double v : z) f << ',' << format_double(v);
            f << '\n';
        }
    }
    Json s{{"value", sol.value.mean},
           {"se", sol.value.se},
           {"basis", sol.options.basis.describe()},
           {"clip", sol.z_clip},
           {"clipped", sol.clipped},
           {"seed", sol.seed},
           {"config_hash", config_hash},
           {"warnings", sol.warnings}};
    write_json(s, summary);
}

} // namespace bsdelab
