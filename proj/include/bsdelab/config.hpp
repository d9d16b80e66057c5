#pragma once

// Experiment configuration: an INI file with sections operator, drift, driver,
// cost and run, plus builders for the library objects it describes.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numbers>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <boost/algorithm/string.hpp>
#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "bsdelab/bsde.hpp"
#include "bsdelab/control.hpp"
#include "bsdelab/forward.hpp"
#include "bsdelab/generators.hpp"
#include "bsdelab/io.hpp"
#include "bsdelab/spectral.hpp"

namespace bsdelab {

class Config {
public:
    static const std::map<std::string, std::set<std::string>>& schema() {
        static const std::map<std::string, std::set<std::string>> s{
            {"operator", {"geometry", "dim", "alpha", "beta", "length", "lx", "ly"}},
            {"drift", {"kind", "rate", "cap"}},
            {"driver",
             {"kind", "value", "gamma", "b", "r", "c", "n", "terminal", "terminal_value", "terminal_weights",
              "terminal_gamma", "terminal_c", "terminal_theta", "terminal_delta"}},
            {"cost", {"kind", "scale", "center", "mode", "channel", "admissible", "perturbation"}},
            {"run",
             {"t0", "T", "steps", "paths", "seed", "x0", "direction", "basis", "degree", "leading", "centers", "width",
              "ridge", "scheme", "picard_iterations", "z_clip", "level", "fd_step", "horizons", "scan_steps",
              "scan_paths", "weight_horizons", "n_list", "k_list", "delta_list", "closed_loop_paths",
              "closed_loop_seed", "export_paths", "mollifier_n", "quadrature_nodes"}},
        };
        return s;
    }

    Config() = default;

    static Config from_string(const std::string& text) {
        Config c;
        std::istringstream is(text);
        try {
            boost::property_tree::ini_parser::read_ini(is, c.tree_);
        } catch (const boost::property_tree::ini_parser_error& e) {
            throw std::invalid_argument(std::string("config: ") + e.message() + " at line " + std::to_string(e.line()));
        }
        c.validate();
        return c;
    }
    static Config from_file(const std::filesystem::path& p) {
        std::ifstream f(p);
        if (!f) throw std::invalid_argument("config: cannot open " + p.string());
        std::stringstream ss;
        ss << f.rdbuf();
        return from_string(ss.str());
    }

    /// "section.key=value" override.
    void set(const std::string& assignment) {
        const auto eq = assignment.find('=');
        const auto dot = assignment.find('.');
        if (eq == std::string::npos || dot == std::string::npos || dot > eq)
            throw std::invalid_argument("config: override must look like section.key=value: " + assignment);
        set(assignment.substr(0, dot), assignment.substr(dot + 1, eq - dot - 1), assignment.substr(eq + 1));
    }
    void set(const std::string& section, const std::string& key, const std::string& value) {
        check_key(section, key);
        tree_.put(boost::property_tree::ptree::path_type(section + "." + key, '.'), value);
    }

    [[nodiscard]] bool has(const std::string& section, const std::string& key) const {
        return static_cast<bool>(raw(section, key));
    }
    [[nodiscard]] std::string str(const std::string& section, const std::string& key, const std::string& def) const {
        const auto v = raw(section, key);
        return v ? boost::algorithm::trim_copy(*v) : def;
    }
    [[nodiscard]] double num(const std::string& section, const std::string& key, double def) const {
        const auto v = raw(section, key);
        if (!v) return def;
        return parse_double(*v, section, key);
    }
    [[nodiscard]] std::size_t count(const std::string& section, const std::string& key, std::size_t def) const {
        const double v = num(section, key, static_cast<double>(def));
        if (!(v >= 0.0) || v != std::floor(v)) throw std::invalid_argument("config: " + section + "." + key + " must be a count");
        return static_cast<std::size_t>(v);
    }
    [[nodiscard]] bool flag(const std::string& section, const std::string& key, bool def) const {
        const auto v = str(section, key, def ? "true" : "false");
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw std::invalid_argument("config: " + section + "." + key + " must be a boolean");
    }
    [[nodiscard]] std::vector<double> list(const std::string& section, const std::string& key,
                                           std::vector<double> def = {}) const {
        const auto v = raw(section, key);
        if (!v) return def;
        std::vector<std::string> parts;
        boost::algorithm::split(parts, *v, boost::is_any_of(", "), boost::token_compress_on);
        std::vector<double> out;
        for (auto& p : parts) {
            boost::algorithm::trim(p);
            if (!p.empty()) out.push_back(parse_double(p, section, key));
        }
        return out;
    }

    /// Sorted section.key=value lines; the hash is over this text.
    [[nodiscard]] std::string canonical() const {
        std::vector<std::string> lines;
        for (const auto& [sec, sub] : tree_)
            for (const auto& [key, val] : sub)
                lines.push_back(sec + "." + key + "=" + boost::algorithm::trim_copy(val.data()));
        std::sort(lines.begin(), lines.end());
        std::string out;
        for (const auto& l : lines) out += l + "\n";
        return out;
    }
    [[nodiscard]] std::string hash() const { return hex64(fnv1a64(canonical())); }

private:
    void validate() const {
        for (const auto& [sec, sub] : tree_) {
            if (sub.data().size() && sub.empty())
                throw std::invalid_argument("config: key outside a section: " + sec);
            for (const auto& [key, val] : sub) check_key(sec, key);
        }
    }
    static void check_key(const std::string& sec, const std::string& key) {
        const auto& s = schema();
        const auto it = s.find(sec);
        if (it == s.end()) throw std::invalid_argument("config: unknown section [" + sec + "]");
        if (!it->second.count(key)) throw std::invalid_argument("config: unknown key " + sec + "." + key);
    }
    [[nodiscard]] boost::optional<std::string> raw(const std::string& section, const std::string& key) const {
        const auto sec = tree_.get_child_optional(boost::property_tree::ptree::path_type(section, '.'));
        if (!sec) return boost::none;
        const auto v = sec->get_child_optional(boost::property_tree::ptree::path_type(key, '.'));
        if (!v) return boost::none;
        return v->data();
    }
    static double parse_double(const std::string& s, const std::string& section, const std::string& key) {
        try {
            std::size_t used = 0;
            const auto t = boost::algorithm::trim_copy(s);
            const double v = std::stod(t, &used);
            if (used != t.size()) throw std::invalid_argument("trailing characters");
            return v;
        } catch (const std::exception&) {
            throw std::invalid_argument("config: " + section + "." + key + " is not a number: " + s);
        }
    }

    boost::property_tree::ptree tree_;
};

// ---------------------------------------------------------------------------
// Builders

inline SpectralOperator make_operator(const Config& c) {
    const auto g = c.str("operator", "geometry", "interval");
    Geometry geo;
    if (g == "interval") geo = Geometry::interval(c.num("operator", "length", std::numbers::pi));
    else if (g == "rectangle")
        geo = Geometry::rectangle(c.num("operator", "lx", std::numbers::pi), c.num("operator", "ly", std::numbers::pi));
    else throw std::invalid_argument("config: operator.geometry must be interval or rectangle");
    return build_operator(geo, c.count("operator", "dim", 8), c.num("operator", "alpha", 0.25), c.num("operator", "beta", 0.0));
}

inline DriftSpec make_drift(const Config& c) {
    const auto k = c.str("drift", "kind", "zero");
    if (k == "zero") return DriftSpec::zero();
    if (k == "linear") return DriftSpec::linear(c.num("drift", "rate", 1.0));
    if (k == "cubic_truncated") return DriftSpec::cubic_truncated(c.num("drift", "cap", 10.0));
    throw std::invalid_argument("config: drift.kind must be zero, linear or cubic_truncated");
}

/// Vector of length dim from a list key (zero padded); `def` when absent.
inline std::vector<double> config_vector(const Config& c, const std::string& sec, const std::string& key,
                                         std::size_t dim, std::vector<double> def) {
    auto v = c.list(sec, key, def);
    if (v.size() > dim) throw std::invalid_argument("config: " + sec + "." + key + " has more entries than dim");
    v.resize(dim, 0.0);
    return v;
}

inline std::vector<double> unit_vector(std::size_t dim, std::size_t k = 0) {
    std::vector<double> v(dim, 0.0);
    v.at(k) = 1.0;
    return v;
}

inline TerminalCondition make_terminal(const Config& c, std::size_t dim) {
    const auto k = c.str("driver", "terminal", "log_cosine");
    const auto w = config_vector(c, "driver", "terminal_weights", dim, unit_vector(dim));
    if (k == "constant") return TerminalCondition::constant(c.num("driver", "terminal_value", 1.0));
    if (k == "linear") return TerminalCondition::linear(w);
    if (k == "log_cosine")
        return TerminalCondition::log_cosine(c.num("driver", "terminal_gamma", 1.0), c.num("driver", "terminal_c", 0.5), w,
                                             c.num("driver", "terminal_theta", 0.0));
    if (k == "tanh_ridge") return TerminalCondition::tanh_ridge(w, c.num("driver", "terminal_delta", 0.1));
    throw std::invalid_argument("config: driver.terminal must be constant, linear, log_cosine or tanh_ridge");
}

inline RunningCost make_cost(const Config& c, const SpectralOperator& op) {
    const auto k = c.str("cost", "kind", "lq");
    const auto mode_s = c.str("cost", "mode", k == "lq_fractional" ? "alpha" : "h");
    if (mode_s != "h" && mode_s != "alpha") throw std::invalid_argument("config: cost.mode must be h or alpha");
    const auto mode = mode_s == "h" ? CostMode::h_cost : CostMode::alpha_cost;
    const double scale = c.num("cost", "scale", 1.0);
    if (k == "lq") return RunningCost::lq(op.dim(), scale, config_vector(c, "cost", "center", op.dim(), {}), mode);
    if (k == "lq_fractional") {
        auto r = RunningCost::lq_fractional(op, scale);
        r.mode = mode;
        return r;
    }
    if (k == "constant") return RunningCost::constant(scale, mode);
    throw std::invalid_argument("config: cost.kind must be lq, lq_fractional or constant");
}

inline TimeGrid make_grid(const Config& c) {
    return TimeGrid(c.num("run", "t0", 0.0), c.num("run", "T", 1.0), c.count("run", "steps", 32));
}

inline ControlProblem make_problem(const Config& c) {
    const auto op = make_operator(c);
    const auto ch = c.str("cost", "channel", "fractional");
    const auto adm = c.str("cost", "admissible", "U2");
    if (ch != "fractional" && ch != "identity") throw std::invalid_argument("config: cost.channel must be fractional or identity");
    if (adm != "U2" && adm != "U2_alpha") throw std::invalid_argument("config: cost.admissible must be U2 or U2_alpha");
    ControlProblem p{op,
                     make_drift(c),
                     make_cost(c, op),
                     make_terminal(c, op.dim()),
                     ch == "fractional" ? ControlChannel::fractional : ControlChannel::identity,
                     make_grid(c),
                     GalerkinState(config_vector(c, "run", "x0", op.dim(), {})),
                     adm == "U2" ? AdmissibleClass::U2 : AdmissibleClass::U2_alpha};
    p.validate();
    return p;
}

inline Driver make_driver(const Config& c, const SpectralOperator& op) {
    const auto k = c.str("driver", "kind", "quadratic");
    if (k == "zero") return Driver::zero();
    if (k == "constant") return Driver::constant(c.num("driver", "value", 1.0));
    if (k == "quadratic") return Driver::quadratic(c.num("driver", "gamma", 1.0));
    if (k == "linear_z") return Driver::linear_z(config_vector(c, "driver", "b", op.dim(), unit_vector(op.dim())));
    if (k == "affine")
        return Driver::affine(c.num("driver", "r", 0.0), config_vector(c, "driver", "b", op.dim(), {}),
                              c.num("driver", "c", 0.0));
    if (k == "hamiltonian") return make_problem(c).hamiltonian(c.num("driver", "n", 0.0));
    throw std::invalid_argument("config: driver.kind must be zero, constant, quadratic, linear_z, affine or hamiltonian");
}

inline RegressionBasis make_basis(const Config& c) {
    const auto k = c.str("run", "basis", "polynomial");
    RegressionBasis b;
    if (k == "polynomial") b = RegressionBasis::polynomial(static_cast<int>(c.count("run", "degree", 2)), c.count("run", "leading", 0));
    else if (k == "modewise") b = RegressionBasis::modewise(static_cast<int>(c.count("run", "degree", 2)));
    else if (k == "radial") b = RegressionBasis::radial(c.count("run", "centers", 32), c.num("run", "width", 1.0));
    else throw std::invalid_argument("config: run.basis must be polynomial, modewise or radial");
    b.ridge = c.num("run", "ridge", 1e-8);
    return b;
}

inline BsdeOptions make_bsde_options(const Config& c) {
    BsdeOptions o;
    o.basis = make_basis(c);
    const auto s = c.str("run", "scheme", "multi_step");
    if (s == "multi_step") o.scheme = BsdeScheme::multi_step;
    else if (s == "one_step") o.scheme = BsdeScheme::one_step;
    else if (s == "picard") o.scheme = BsdeScheme::picard;
    else throw std::invalid_argument("config: run.scheme must be multi_step, one_step or picard");
    o.picard_iterations = static_cast<int>(c.count("run", "picard_iterations", 8));
    o.z_clip = c.num("run", "z_clip", 0.0);
    o.level = c.num("run", "level", 0.95);
    return o;
}

inline EnsembleSpec make_ensemble_spec(const Config& c, bool with_direction = false) {
    const auto op = make_operator(c);
    EnsembleSpec s{op, make_grid(c), make_drift(c), GalerkinState(config_vector(c, "run", "x0", op.dim(), {})),
                   c.count("run", "paths", 10000), static_cast<std::uint64_t>(c.count("run", "seed", 1))};
    if (with_direction) s.direction = GalerkinState(config_vector(c, "run", "direction", op.dim(), unit_vector(op.dim())));
    return s;
}

} // namespace bsdelab
