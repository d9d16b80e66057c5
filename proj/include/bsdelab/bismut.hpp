#pragma once

// Bismut-Elworthy weights built from stored noise, classical and nonlinear
// gradient representations, and the mild Kolmogorov residual.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "bsdelab/bsde.hpp"
#include "bsdelab/forward.hpp"
#include "bsdelab/generators.hpp"
#include "bsdelab/stats.hpp"

namespace bsdelab {

struct BismutWeight {
    std::vector<double> values; // per path U_s
    GalerkinState direction;
    std::size_t node = 0;
    double t = 0.0, s = 0.0;
    [[nodiscard]] McSummary summary(double level = 0.95) const { return summarize(values, level); }
};

struct GradientEstimate {
    McSummary summary;
    std::vector<double> samples;
    [[nodiscard]] double mean() const { return summary.mean; }
    [[nodiscard]] double se() const { return summary.se; }
};

namespace detail {
inline void require_variation(const PathEnsemble& ens, const char* where) {
    if (!ens.has_variation()) throw std::invalid_argument(std::string(where) + ": ensemble lacks first variation");
}
/// Per-path increment of sum_k lambda_k^a V_jk dW_jk over step j.
inline void weight_increment(const PathEnsemble& ens, std::size_t j, const std::vector<double>& la, std::span<double> out) {
    const std::size_t d = ens.dim();
    const auto V = ens.variation(j);
    const auto dW = ens.increments(j);
    for (std::size_t p = 0; p < out.size(); ++p) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += la[k] * V[p * d + k] * dW[p * d + k];
        out[p] = s;
    }
}
inline std::vector<double> weight_powers(const PathEnsemble& ens) {
    std::vector<double> la(ens.dim());
    for (std::size_t k = 0; k < la.size(); ++k) la[k] = ens.op().power(k, ens.noise_alpha());
    return la;
}
} // namespace detail

/// U at every node in `nodes` (s > t0): left-point Ito sums over (t0, s] divided by s - t0.
inline std::vector<BismutWeight> bismut_weights(const PathEnsemble& ens, const std::vector<std::size_t>& nodes) {
    detail::require_variation(ens, "bismut_weight");
    const std::size_t n = ens.n_paths();
    std::size_t last = 0;
    for (auto s : nodes) {
        if (s == 0) throw std::invalid_argument("bismut_weight: s must be after t0");
        if (s > ens.steps()) throw std::out_of_range("bismut_weight: node out of range");
        last = std::max(last, s);
    }
    const auto la = detail::weight_powers(ens);
    std::vector<double> S(n, 0.0), inc(n);
    std::vector<BismutWeight> out(nodes.size());
    for (std::size_t j = 0; j < last; ++j) {
        detail::weight_increment(ens, j, la, inc);
        for (std::size_t p = 0; p < n; ++p) S[p] += inc[p];
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            if (nodes[i] != j + 1) continue;
            auto& w = out[i];
            w.node = j + 1;
            w.t = ens.grid().t0;
            w.s = ens.grid().node(j + 1);
            w.direction = ens.direction();
            w.values.resize(n);
            for (std::size_t p = 0; p < n; ++p) w.values[p] = S[p] / (w.s - w.t);
        }
    }
    return out;
}

inline BismutWeight bismut_weight(const PathEnsemble& ens, std::size_t s_node) { return bismut_weights(ens, {s_node})[0]; }

/// (E sup_{s in window} |U_s|^2)^{1/2} over nodes [from, to].
inline McSummary weight_sup_moment(const PathEnsemble& ens, std::size_t from, std::size_t to) {
    detail::require_variation(ens, "weight_sup_moment");
    if (from == 0 || from > to || to > ens.steps()) throw std::invalid_argument("weight_sup_moment: bad window");
    const std::size_t n = ens.n_paths();
    const auto la = detail::weight_powers(ens);
    std::vector<double> S(n, 0.0), inc(n), sup(n, 0.0);
    for (std::size_t j = 0; j < to; ++j) {
        detail::weight_increment(ens, j, la, inc);
        const double dt = ens.grid().node(j + 1) - ens.grid().t0;
        for (std::size_t p = 0; p < n; ++p) {
            S[p] += inc[p];
            if (j + 1 >= from) sup[p] = std::max(sup[p], (S[p] / dt) * (S[p] / dt));
        }
    }
    auto s = summarize(sup);
    // delta method for the square root
    s.se = s.se / (2.0 * std::sqrt(s.mean));
    s.mean = std::sqrt(s.mean);
    return s;
}

/// Worst unit direction e_k for the weight moments: per node in `nodes`,
/// max_k (E|U_s|^2)^{1/2} with one ensemble per mode (same seed).
struct WeightNormRow {
    double s = 0.0;
    double norm = 0.0;
    double se = 0.0;
    std::size_t mode = 0;
};

inline std::vector<WeightNormRow> weight_operator_norm(const EnsembleSpec& base, const std::vector<std::size_t>& nodes) {
    const std::size_t d = base.op.dim();
    std::vector<WeightNormRow> rows(nodes.size());
    for (std::size_t k = 0; k < d; ++k) {
        EnsembleSpec s = base;
        s.direction = GalerkinState::unit(d, k);
        const PathEnsemble ens(s);
        const auto W = bismut_weights(ens, nodes);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            std::vector<double> sq(W[i].values.size());
            for (std::size_t p = 0; p < sq.size(); ++p) sq[p] = W[i].values[p] * W[i].values[p];
            const auto m = summarize(sq);
            const double r = std::sqrt(m.mean);
            if (k == 0 || r > rows[i].norm) rows[i] = {W[i].s - W[i].t, r, m.se / (2.0 * r), k};
        }
    }
    return rows;
}

/// Same, for the late-window sup moment on [0, tau] with window [tau/2, tau].
inline WeightNormRow weight_sup_operator_norm(const EnsembleSpec& base) {
    const std::size_t d = base.op.dim(), N = base.grid.steps;
    WeightNormRow row;
    row.s = base.grid.T - base.grid.t0;
    for (std::size_t k = 0; k < d; ++k) {
        EnsembleSpec s = base;
        s.direction = GalerkinState::unit(d, k);
        const PathEnsemble ens(s);
        const auto m = weight_sup_moment(ens, std::max<std::size_t>(1, N / 2), N);
        if (k == 0 || m.mean > row.norm) row.norm = m.mean, row.se = m.se, row.mode = k;
    }
    return row;
}

/// E[phi(X_T) U_T]
inline GradientEstimate classical_bismut_gradient(const PathEnsemble& ens, const TerminalCondition& terminal,
                                                  double level = 0.95) {
    const auto U = bismut_weight(ens, ens.steps());
    const std::size_t n = ens.n_paths(), d = ens.dim();
    const auto XN = ens.states(ens.steps());
    GradientEstimate g;
    g.samples.resize(n);
    for (std::size_t p = 0; p < n; ++p) g.samples[p] = terminal({XN.data() + p * d, d}) * U.values[p];
    g.summary = summarize(g.samples, level);
    return g;
}

/// E[ int_s^T psi(r, X_r, Y_r, Z_r) U^{(s)}_r dr + phi(X_T) U^{(s)}_T ] for each s in `nodes`,
/// with U^{(s)}_r = (S_r - S_s)/(r - s) from one prefix sum S per path; trapezoid in r,
/// the r = s endpoint weight taken as zero.
inline std::vector<GradientEstimate> nonlinear_bismut_gradients(const BsdeSolution& sol, const PathEnsemble& ens,
                                                                const std::vector<std::size_t>& nodes,
                                                                double level = 0.95) {
    detail::require_variation(ens, "nonlinear_bismut_gradient");
    if (ens.n_paths() != sol.n_paths || ens.steps() != sol.grid.steps)
        throw std::invalid_argument("nonlinear_bismut_gradient: solution and ensemble differ");
    const std::size_t N = ens.steps(), n = ens.n_paths(), d = ens.dim(), m = nodes.size();
    for (auto s : nodes)
        if (s >= N) throw std::invalid_argument("nonlinear_bismut_gradient: s must be before T");
    const double h = ens.grid().h();
    const auto la = detail::weight_powers(ens);
    std::vector<double> S(n, 0.0), inc(n), zrow(d);
    std::vector<double> Ss(n * m, 0.0), acc(n * m, 0.0);
    for (std::size_t r = 0; r <= N; ++r) {
        if (r > 0) {
            detail::weight_increment(ens, r - 1, la, inc);
            for (std::size_t p = 0; p < n; ++p) S[p] += inc[p];
        }
        for (std::size_t i = 0; i < m; ++i)
            if (nodes[i] == r)
                for (std::size_t p = 0; p < n; ++p) Ss[p * m + i] = S[p];
        bool any = false;
        for (auto s : nodes) any = any || r > s;
        if (!any) continue;
        const auto X = ens.states(r);
        const double t = ens.grid().node(r);
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = X.subspan(p * d, d);
            const double y = sol.y(r, x);
            sol.z_clipped(r, x, zrow);
            const double g = sol.driver(t, x, y, zrow);
            const double fin = r == N ? sol.terminal(x) : 0.0;
            for (std::size_t i = 0; i < m; ++i) {
                const std::size_t s = nodes[i];
                if (r <= s) continue;
                const double u = (S[p] - Ss[p * m + i]) / (t - ens.grid().node(s));
                const double wq = r == N ? 0.5 * h : h;
                acc[p * m + i] += wq * g * u + fin * u;
            }
        }
    }
    std::vector<GradientEstimate> out(m);
    for (std::size_t i = 0; i < m; ++i) {
        out[i].samples.resize(n);
        for (std::size_t p = 0; p < n; ++p) out[i].samples[p] = acc[p * m + i];
        out[i].summary = summarize(out[i].samples, level);
    }
    return out;
}

inline GradientEstimate nonlinear_bismut_gradient(const BsdeSolution& sol, const PathEnsemble& ens, std::size_t s_node,
                                                  double level = 0.95) {
    return nonlinear_bismut_gradients(sol, ens, {s_node}, level)[0];
}

/// Plain Monte-Carlo mean of phi(X_T), as a value functional for finite differences.
inline ValueFunctional terminal_mean(const TerminalCondition& terminal) {
    return [terminal](const PathEnsemble& e) {
        const std::size_t n = e.n_paths(), d = e.dim();
        const auto XN = e.states(e.steps());
        ValueEstimate v;
        v.samples.resize(n);
        CompensatedSum s;
        for (std::size_t p = 0; p < n; ++p) s.add(v.samples[p] = terminal({XN.data() + p * d, d}));
        v.value = s.value() / static_cast<double>(n);
        return v;
    };
}

// ---------------------------------------------------------------------------

struct EnergyCheck {
    std::vector<ScalingPoint> points; // (T - t, int_t^T (E grad Y_s h)^2 ds)
    ScalingFit fit;
    double threshold = 0.0; // -2 alpha - 0.15
    [[nodiscard]] bool passed() const { return fit.slope >= threshold; }
};

/// Returns E[grad Y_s h] on the uniform grid of [0, horizon] (steps + 1 values).
using GradientProfile = std::function<std::vector<double>(double horizon)>;

inline EnergyCheck gradient_energy_check(const GradientProfile& profile, const std::vector<double>& horizons, double alpha) {
    EnergyCheck c;
    c.threshold = -2.0 * alpha - 0.15;
    for (double tau : horizons) {
        const auto g = profile(tau);
        if (g.size() < 2) throw std::invalid_argument("gradient_energy_check: profile needs at least two nodes");
        const double h = tau / static_cast<double>(g.size() - 1);
        double s = 0.0;
        for (std::size_t j = 0; j + 1 < g.size(); ++j) s += 0.5 * h * (g[j] * g[j] + g[j + 1] * g[j + 1]);
        c.points.push_back({tau, s});
    }
    c.fit = fit_scaling_exponent(c.points);
    return c;
}

/// Profile from the nonlinear Bismut formula at every node before T, with the
/// terminal value E[grad phi(X_T) grad X_T h] from the stored variation.
inline GradientProfile bismut_gradient_profile(EnsembleSpec base, std::size_t steps, Driver driver,
                                               TerminalCondition terminal, BsdeOptions options = {}) {
    return [=](double tau) {
        EnsembleSpec s = base;
        s.grid = TimeGrid(0.0, tau, steps);
        const PathEnsemble ens(s);
        const auto sol = solve_bsde_lsmc(ens, driver, terminal, options);
        std::vector<std::size_t> nodes(steps);
        for (std::size_t j = 0; j < steps; ++j) nodes[j] = j;
        const auto est = nonlinear_bismut_gradients(sol, ens, nodes);
        std::vector<double> g(steps + 1);
        for (std::size_t j = 0; j < steps; ++j) g[j] = est[j].mean();
        const auto vs = solve_variational_bsde(sol, ens, options);
        g[steps] = vs.grad_y[steps].mean;
        return g;
    };
}

// ---------------------------------------------------------------------------

/// Value function v(s, x) and its (-A)^{-alpha}-gradient z(s, x).
struct ValueProvider {
    std::function<double(double s, std::span<const double> x)> v;
    std::function<void(double s, std::span<const double> x, std::span<double> z)> z;
    double value_se = 0.0; // SE of v(t, x) at the evaluation point, if random
};

inline ValueProvider lsmc_provider(const BsdeSolution& sol) {
    auto sp = std::make_shared<const BsdeSolution>(sol);
    ValueProvider p;
    p.v = [sp](double s, std::span<const double> x) { return sp->y(sp->grid.nearest(s), x); };
    p.z = [sp](double s, std::span<const double> x, std::span<double> z) { sp->z_clipped(sp->grid.nearest(s), x, z); };
    p.value_se = sol.value.se;
    return p;
}

struct KolmogorovResidual {
    double residual = 0.0;
    double se = 0.0;
    double allowance = 0.0; // 3 se + h
    std::vector<double> nodes, weights;
    [[nodiscard]] bool passed() const { return std::abs(residual) <= allowance; }
};

/// v(t,x) - P_{t,T}[phi](x) - sum_q w_q P_{t,s_q}[psi(s_q, ., v, z)](x), with Gauss-Legendre
/// nodes on [t, T] snapped to the grid of a fresh ensemble.
inline KolmogorovResidual kolmogorov_residual(const ValueProvider& provider, const Driver& driver,
                                              const TerminalCondition& terminal, const EnsembleSpec& fresh,
                                              std::size_t n_quadrature = 8) {
    if (n_quadrature != 8) throw std::invalid_argument("kolmogorov_residual: 8 quadrature nodes are supported");
    const PathEnsemble ens(fresh);
    const auto& grid = ens.grid();
    const double t = grid.t0, T = grid.T;
    using GL = boost::math::quadrature::gauss<double, 8>;
    KolmogorovResidual r;
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < GL::abscissa().size(); ++i) {
        for (double sgn : {-1.0, 1.0}) {
            const double a = sgn * GL::abscissa()[i];
            r.nodes.push_back(t + 0.5 * (T - t) * (1.0 + a));
            r.weights.push_back(0.5 * (T - t) * GL::weights()[i]);
        }
    }
    for (double s : r.nodes) idx.push_back(grid.nearest(s));
    const std::size_t n = ens.n_paths(), d = ens.dim();
    std::vector<double> per(n, 0.0), zrow(d);
    for (std::size_t q = 0; q < idx.size(); ++q) {
        const auto X = ens.states(idx[q]);
        const double s = grid.node(idx[q]);
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = X.subspan(p * d, d);
            provider.z(s, x, zrow);
            per[p] += r.weights[q] * driver(s, x, provider.v(s, x), zrow);
        }
    }
    const auto XN = ens.states(ens.steps());
    for (std::size_t p = 0; p < n; ++p) per[p] += terminal({XN.data() + p * d, d});
    const auto m = summarize(per);
    r.residual = provider.v(t, fresh.x0.coords()) - m.mean;
    r.se = combined_se(m.se, provider.value_se);
    r.allowance = 3.0 * r.se + grid.h();
    return r;
}

// ---------------------------------------------------------------------------

struct BlowupRow {
    double tau = 0.0;
    double z_norm = 0.0;    // |Z_{t}| at the start point
    double grad_norm = 0.0; // |(-A)^alpha Z_t|_H = |grad Y_t|_H
    McSummary value;
};

struct BlowupScan {
    std::vector<BlowupRow> rows;
    ScalingFit z_fit, grad_fit;
};

/// Near-maturity size of Z and of the value gradient: one BSDE solve per horizon
/// started at x0; squared means are debiased by their standard errors.
inline BlowupScan gradient_blowup_scan(EnsembleSpec base, const std::vector<double>& horizons, std::size_t steps,
                                       const Driver& driver, const TerminalCondition& terminal, BsdeOptions options = {}) {
    BlowupScan out;
    const std::size_t d = base.op.dim();
    base.direction.reset();
    for (double tau : horizons) {
        EnsembleSpec s = base;
        s.grid = TimeGrid(0.0, tau, steps);
        const PathEnsemble ens(s);
        const auto sol = solve_bsde_lsmc(ens, driver, terminal, options);
        BlowupRow r;
        r.tau = tau;
        r.value = sol.value;
        double z2 = 0.0, g2 = 0.0;
        std::vector<double> e(d, 0.0);
        for (std::size_t k = 0; k < d; ++k) {
            std::fill(e.begin(), e.end(), 0.0);
            e[k] = 1.0;
            const auto m = sol.z0_along(e);
            const double v = std::max(0.0, m.mean * m.mean - m.se * m.se);
            z2 += v;
            g2 += ens.op().power(k, 2.0 * ens.noise_alpha()) * v;
        }
        r.z_norm = std::sqrt(z2);
        r.grad_norm = std::sqrt(g2);
        out.rows.push_back(r);
    }
    std::vector<ScalingPoint> pz, pg;
    for (const auto& r : out.rows) pz.push_back({r.tau, r.z_norm}), pg.push_back({r.tau, r.grad_norm});
    out.z_fit = fit_scaling_exponent(pz);
    out.grad_fit = fit_scaling_exponent(pg);
    return out;
}

} // namespace bsdelab
