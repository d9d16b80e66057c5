#pragma once

// Diagonal spectral representation of the Dirichlet Laplacian on an interval or
// rectangle: eigenvalues, eigenfunctions, fractional powers and the semigroup,
// plus collocation grids used to evaluate E-norms and nonlinear drifts.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace bsdelab {

/// Point of H written in the retained eigenbasis (mode 0 is the lowest mode).
class GalerkinState {
public:
    GalerkinState() = default;
    explicit GalerkinState(std::size_t dim, double fill = 0.0) : coords_(dim, fill) {}
    explicit GalerkinState(std::vector<double> coords) : coords_(std::move(coords)) {
        for (double c : coords_) {
            if (!std::isfinite(c)) throw std::invalid_argument("GalerkinState: non-finite coordinate");
        }
    }

    static GalerkinState unit(std::size_t dim, std::size_t mode, double value = 1.0) {
        if (mode >= dim) throw std::out_of_range("GalerkinState::unit: mode out of range");
        GalerkinState s(dim);
        s.coords_[mode] = value;
        return s;
    }

    [[nodiscard]] std::size_t dim() const noexcept { return coords_.size(); }
    double operator[](std::size_t k) const { return coords_[k]; }
    double& operator[](std::size_t k) { return coords_[k]; }
    [[nodiscard]] std::span<const double> coords() const noexcept { return coords_; }
    [[nodiscard]] std::span<double> coords() noexcept { return coords_; }
    [[nodiscard]] const std::vector<double>& vec() const noexcept { return coords_; }

    [[nodiscard]] bool finite() const noexcept {
        return std::all_of(coords_.begin(), coords_.end(), [](double c) { return std::isfinite(c); });
    }

    GalerkinState& operator+=(const GalerkinState& o) {
        check_same(o);
        for (std::size_t k = 0; k < coords_.size(); ++k) coords_[k] += o.coords_[k];
        return *this;
    }
    GalerkinState& operator-=(const GalerkinState& o) {
        check_same(o);
        for (std::size_t k = 0; k < coords_.size(); ++k) coords_[k] -= o.coords_[k];
        return *this;
    }
    GalerkinState& operator*=(double a) {
        for (double& c : coords_) c *= a;
        return *this;
    }
    friend GalerkinState operator+(GalerkinState a, const GalerkinState& b) { return a += b; }
    friend GalerkinState operator-(GalerkinState a, const GalerkinState& b) { return a -= b; }
    friend GalerkinState operator*(double s, GalerkinState a) { return a *= s; }
    friend GalerkinState operator*(GalerkinState a, double s) { return a *= s; }

private:
    void check_same(const GalerkinState& o) const {
        if (o.dim() != dim()) throw std::invalid_argument("GalerkinState: dimension mismatch");
    }
    std::vector<double> coords_;
};

inline double inner(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw std::invalid_argument("inner: dimension mismatch");
    double s = 0.0;
    for (std::size_t k = 0; k < a.size(); ++k) s += a[k] * b[k];
    return s;
}
inline double inner(const GalerkinState& a, const GalerkinState& b) { return inner(a.coords(), b.coords()); }
inline double h_norm(std::span<const double> v) { return std::sqrt(inner(v, v)); }
inline double h_norm(const GalerkinState& v) { return h_norm(v.coords()); }

enum class GeometryKind { interval, rectangle };

struct Geometry {
    GeometryKind kind = GeometryKind::interval;
    double length_x = std::numbers::pi;
    double length_y = std::numbers::pi;

    static Geometry interval(double length = std::numbers::pi) { return {GeometryKind::interval, length, 0.0}; }
    static Geometry rectangle(double lx = std::numbers::pi, double ly = std::numbers::pi) {
        return {GeometryKind::rectangle, lx, ly};
    }
};

/// Per-mode wave numbers; ky == 0 on an interval.
struct ModeIndex {
    int kx = 1;
    int ky = 0;
};

/// -A restricted to the first `dim` eigenmodes, eigenvalues ascending.
class SpectralOperator {
public:
    SpectralOperator(Geometry geometry, std::vector<double> eigenvalues, std::vector<ModeIndex> modes,
                     double alpha, double beta)
        : geometry_(geometry), eigenvalues_(std::move(eigenvalues)), modes_(std::move(modes)), alpha_(alpha),
          beta_(beta) {}

    [[nodiscard]] std::size_t dim() const noexcept { return eigenvalues_.size(); }
    [[nodiscard]] double eigenvalue(std::size_t k) const { return eigenvalues_.at(k); }
    [[nodiscard]] const std::vector<double>& eigenvalues() const noexcept { return eigenvalues_; }
    [[nodiscard]] const std::vector<ModeIndex>& modes() const noexcept { return modes_; }
    [[nodiscard]] const Geometry& geometry() const noexcept { return geometry_; }
    [[nodiscard]] double alpha() const noexcept { return alpha_; }
    [[nodiscard]] double beta() const noexcept { return beta_; }

    /// L2-normalised eigenfunction of mode k at (x, y); y ignored on an interval.
    [[nodiscard]] double eigenfunction(std::size_t k, double x, double y = 0.0) const {
        const ModeIndex& m = modes_.at(k);
        if (geometry_.kind == GeometryKind::interval) {
            const double L = geometry_.length_x;
            return std::sqrt(2.0 / L) * std::sin(m.kx * std::numbers::pi * x / L);
        }
        const double Lx = geometry_.length_x, Ly = geometry_.length_y;
        return 2.0 / std::sqrt(Lx * Ly) * std::sin(m.kx * std::numbers::pi * x / Lx) *
               std::sin(m.ky * std::numbers::pi * y / Ly);
    }

    /// Largest wave number along each axis among retained modes.
    [[nodiscard]] std::pair<int, int> max_wave_numbers() const {
        int mx = 0, my = 0;
        for (const auto& m : modes_) {
            mx = std::max(mx, m.kx);
            my = std::max(my, m.ky);
        }
        return {mx, my};
    }

    /// (-A)^exponent multiplier of mode k.
    [[nodiscard]] double power(std::size_t k, double exponent) const {
        return exponent == 0.0 ? 1.0 : std::pow(eigenvalues_[k], exponent);
    }

private:
    Geometry geometry_;
    std::vector<double> eigenvalues_;
    std::vector<ModeIndex> modes_;
    double alpha_;
    double beta_;
};

inline SpectralOperator build_operator(Geometry geometry, std::size_t dim, double alpha, double beta = 0.0) {
    if (dim == 0) throw std::invalid_argument("build_operator: dim must be >= 1");
    if (!(alpha > 0.0 && alpha < 0.5)) throw std::invalid_argument("build_operator: alpha must lie in (0, 1/2)");
    if (!(beta >= 0.0)) throw std::invalid_argument("build_operator: beta must be nonnegative");
    std::vector<double> eig;
    std::vector<ModeIndex> modes;
    if (geometry.kind == GeometryKind::interval) {
        if (!(geometry.length_x > 0.0)) throw std::invalid_argument("build_operator: length must be positive");
        const double c = std::numbers::pi / geometry.length_x;
        for (std::size_t k = 1; k <= dim; ++k) {
            eig.push_back(c * c * static_cast<double>(k * k));
            modes.push_back({static_cast<int>(k), 0});
        }
    } else {
        if (!(geometry.length_x > 0.0 && geometry.length_y > 0.0))
            throw std::invalid_argument("build_operator: lengths must be positive");
        const double cx = std::numbers::pi / geometry.length_x, cy = std::numbers::pi / geometry.length_y;
        struct Cand {
            double lam;
            ModeIndex m;
        };
        std::vector<Cand> cands;
        const int kmax = static_cast<int>(dim);
        for (int i = 1; i <= kmax; ++i)
            for (int j = 1; j <= kmax; ++j) cands.push_back({cx * cx * i * i + cy * cy * j * j, {i, j}});
        std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
            if (a.lam != b.lam) return a.lam < b.lam;
            if (a.m.kx != b.m.kx) return a.m.kx < b.m.kx;
            return a.m.ky < b.m.ky;
        });
        for (std::size_t k = 0; k < dim; ++k) {
            eig.push_back(cands[k].lam);
            modes.push_back(cands[k].m);
        }
    }
    return SpectralOperator(geometry, std::move(eig), std::move(modes), alpha, beta);
}

inline void check_dim(const SpectralOperator& op, std::size_t n, const char* where) {
    if (n != op.dim()) throw std::invalid_argument(std::string(where) + ": dimension mismatch with operator");
}

inline GalerkinState fractional_apply(const SpectralOperator& op, double exponent, const GalerkinState& v) {
    check_dim(op, v.dim(), "fractional_apply");
    GalerkinState out = v;
    for (std::size_t k = 0; k < v.dim(); ++k) out[k] *= op.power(k, exponent);
    return out;
}

inline GalerkinState semigroup_apply(const SpectralOperator& op, double t, const GalerkinState& v) {
    check_dim(op, v.dim(), "semigroup_apply");
    if (!(t >= 0.0)) throw std::invalid_argument("semigroup_apply: t must be nonnegative");
    GalerkinState out = v;
    for (std::size_t k = 0; k < v.dim(); ++k) out[k] *= std::exp(-op.eigenvalue(k) * t);
    return out;
}

/// Point values of the retained eigenfunctions on a fixed set of spatial points.
/// With `weights` set, the points also form a quadrature rule exact for products
/// of retained eigenfunctions (used to project nonlinear drifts).
struct CollocationGrid {
    std::size_t points = 0;
    std::size_t dim = 0;
    std::vector<double> basis;   // points x dim, row-major
    std::vector<double> weights; // empty for sup-norm grids

    void reconstruct(std::span<const double> coords, std::span<double> values) const {
        for (std::size_t g = 0; g < points; ++g) {
            const double* row = &basis[g * dim];
            double s = 0.0;
            for (std::size_t k = 0; k < dim; ++k) s += row[k] * coords[k];
            values[g] = s;
        }
    }
    /// coords_k = sum_g w_g values_g e_k(p_g)
    void project(std::span<const double> values, std::span<double> coords) const {
        std::fill(coords.begin(), coords.end(), 0.0);
        for (std::size_t g = 0; g < points; ++g) {
            const double wv = weights[g] * values[g];
            const double* row = &basis[g * dim];
            for (std::size_t k = 0; k < dim; ++k) coords[k] += wv * row[k];
        }
    }
};

namespace detail {
inline CollocationGrid tensor_grid(const SpectralOperator& op, const std::vector<double>& xs,
                                   const std::vector<double>& ys, double w) {
    CollocationGrid g;
    g.dim = op.dim();
    const bool rect = op.geometry().kind == GeometryKind::rectangle;
    for (double x : xs) {
        if (rect) {
            for (double y : ys) {
                for (std::size_t k = 0; k < op.dim(); ++k) g.basis.push_back(op.eigenfunction(k, x, y));
                ++g.points;
            }
        } else {
            for (std::size_t k = 0; k < op.dim(); ++k) g.basis.push_back(op.eigenfunction(k, x));
            ++g.points;
        }
    }
    if (w > 0.0) g.weights.assign(g.points, w);
    return g;
}
} // namespace detail

/// Uniform grid including the boundary with `grid_points` points per axis.
inline CollocationGrid sup_norm_grid(const SpectralOperator& op, std::size_t grid_points) {
    const auto [mx, my] = op.max_wave_numbers();
    const bool rect = op.geometry().kind == GeometryKind::rectangle;
    const std::size_t need = rect ? 2 * static_cast<std::size_t>(std::max(mx, my)) : 2 * op.dim();
    if (grid_points < need || grid_points < 2)
        throw std::invalid_argument("sup_norm: grid under-resolved (need at least 2 points per highest mode)");
    auto axis = [&](double L) {
        std::vector<double> v(grid_points);
        for (std::size_t i = 0; i < grid_points; ++i) v[i] = L * static_cast<double>(i) / (grid_points - 1);
        return v;
    };
    return detail::tensor_grid(op, axis(op.geometry().length_x), rect ? axis(op.geometry().length_y)
                                                                         : std::vector<double>{},
                               0.0);
}

/// Interior midpoint-free rule x_g = L g / G, g = 1..G-1, weight L/G; exact for
/// sin(k x) sin(l x) whenever k + l < 2G.
inline CollocationGrid quadrature_grid(const SpectralOperator& op) {
    const auto [mx, my] = op.max_wave_numbers();
    const bool rect = op.geometry().kind == GeometryKind::rectangle;
    auto axis = [](double L, int kmax) {
        const int G = 2 * kmax + 2;
        std::vector<double> v;
        for (int g = 1; g < G; ++g) v.push_back(L * g / G);
        return std::pair{v, L / G};
    };
    auto [xs, wx] = axis(op.geometry().length_x, mx);
    if (!rect) return detail::tensor_grid(op, xs, {}, wx);
    auto [ys, wy] = axis(op.geometry().length_y, my);
    return detail::tensor_grid(op, xs, ys, wx * wy);
}

inline double sup_norm(const CollocationGrid& grid, std::span<const double> coords) {
    double best = 0.0;
    for (std::size_t g = 0; g < grid.points; ++g) {
        const double* row = &grid.basis[g * grid.dim];
        double s = 0.0;
        for (std::size_t k = 0; k < grid.dim; ++k) s += row[k] * coords[k];
        best = std::max(best, std::abs(s));
    }
    return best;
}

inline double sup_norm(const SpectralOperator& op, const GalerkinState& v, std::size_t grid_points) {
    check_dim(op, v.dim(), "sup_norm");
    return sup_norm(sup_norm_grid(op, grid_points), v.coords());
}

/// max_k lambda_k^{-alpha} e^{-lambda_k t}: norm of e^{tA}(-A)^{-alpha} on the retained modes.
inline double smoothing_prefactor(const SpectralOperator& op, double t, double exponent) {
    double best = 0.0;
    for (std::size_t k = 0; k < op.dim(); ++k)
        best = std::max(best, op.power(k, exponent) * std::exp(-op.eigenvalue(k) * t));
    return best;
}

} // namespace bsdelab
