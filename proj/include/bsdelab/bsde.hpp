#pragma once

// Backward regression solver for Markovian BSDEs on a forward ensemble, the
// exponential-transform value for purely quadratic drivers, the variational
// BSDE for directional gradients, and the stability sweep under mollification.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "bsdelab/forward.hpp"
#include "bsdelab/generators.hpp"
#include "bsdelab/regression.hpp"
#include "bsdelab/stats.hpp"

namespace bsdelab {

enum class BsdeScheme { multi_step, one_step, picard };

struct BsdeOptions {
    RegressionBasis basis = RegressionBasis::polynomial(2);
    BsdeScheme scheme = BsdeScheme::multi_step;
    int picard_iterations = 8;
    double z_clip = 0.0;    // 0: 10 (K_phi + K_psi T); +inf disables (Lipschitz drivers only)
    double explosion = 1e8; // abort when |Y| exceeds explosion * (1 + bound)
    double level = 0.95;
};

struct BsdeSolution {
    TimeGrid grid;
    std::size_t dim = 0;
    std::size_t n_paths = 0;
    std::uint64_t seed = 0;
    TerminalCondition terminal;
    Driver driver;
    BsdeOptions options;
    double z_clip = std::numeric_limits<double>::infinity();
    double bound = std::numeric_limits<double>::infinity(); // (K_phi + T K_psi) e^{L T}

    std::vector<SliceFit> y_fit; // nodes 0..N-1
    std::vector<SliceFit> z_fit; // nodes 0..N-1

    McSummary value;
    std::vector<double> value_samples; // per-path T_0
    std::vector<double> z0_samples;    // per-path Z_0 targets (n x dim)

    std::vector<double> y_mean, z_sup, z_rms; // per node, on the ensemble
    std::vector<std::vector<double>> z_mean;
    std::size_t clipped = 0;
    std::size_t bound_violations = 0;
    std::vector<std::string> warnings;
    std::vector<double> picard_values; // value after each sweep (picard scheme)

    [[nodiscard]] double y(std::size_t node, std::span<const double> x) const {
        if (node == grid.steps) return terminal(x);
        return y_fit.at(node).eval(x);
    }
    /// The fitted Z at a node; the terminal node reuses the last fit.
    void z(std::size_t node, std::span<const double> x, std::span<double> out) const {
        z_fit.at(std::min(node, grid.steps - 1)).eval(x, out);
    }
    void z_clipped(std::size_t node, std::span<const double> x, std::span<double> out) const {
        z(node, x, out);
        clip(out);
    }
    void clip(std::span<double> zv) const {
        if (!std::isfinite(z_clip)) return;
        const double n = h_norm(zv);
        if (n > z_clip)
            for (double& v : zv) v *= z_clip / n;
    }
    /// Z_0 projected on h with its standard error.
    [[nodiscard]] McSummary z0_along(std::span<const double> h) const {
        std::vector<double> s(n_paths);
        for (std::size_t p = 0; p < n_paths; ++p) s[p] = inner({z0_samples.data() + p * dim, dim}, h);
        return summarize(s, options.level);
    }
    [[nodiscard]] std::vector<double> z0() const { return z_mean.at(0); }
};

namespace detail {

inline void check_finite_slice(std::span<const double> T, double limit, std::size_t node) {
    for (std::size_t p = 0; p < T.size(); ++p) {
        if (!std::isfinite(T[p]) || std::abs(T[p]) > limit) {
            std::ostringstream os;
            os << "bsde: exploding Y at node " << node << " on path " << p << " (value " << T[p] << ", limit " << limit
               << ")";
            throw std::runtime_error(os.str());
        }
    }
}

// One backward sweep. `old` (if given) supplies driver inputs (Picard).
inline void backward_sweep(const PathEnsemble& ens, BsdeSolution& sol, const BsdeSolution* old) {
    const std::size_t N = ens.steps(), d = ens.dim(), n = ens.n_paths();
    const double h = ens.grid().h();
    const auto& opt = sol.options;
    const double limit = opt.explosion * (1.0 + (std::isfinite(sol.bound) ? sol.bound : sol.terminal.bound));
    sol.y_fit.assign(N, {});
    sol.z_fit.assign(N, {});
    sol.y_mean.assign(N + 1, 0.0);
    sol.z_sup.assign(N + 1, 0.0);
    sol.z_rms.assign(N + 1, 0.0);
    sol.z_mean.assign(N + 1, std::vector<double>(d, 0.0));
    sol.clipped = 0;
    sol.bound_violations = 0;

    // Tc: terminal plus driver terms minus later martingale increments, the node-0 Z target
    Eigen::VectorXd T(n), ynext(n), Tc(n);
    {
        const auto XN = ens.states(N);
        CompensatedSum m;
        for (std::size_t p = 0; p < n; ++p) {
            T[p] = sol.terminal({XN.data() + p * d, d});
            ynext[p] = T[p];
            Tc[p] = T[p];
            m.add(T[p]);
            if (std::abs(T[p]) > sol.bound) ++sol.bound_violations;
        }
        sol.y_mean[N] = m.value() / static_cast<double>(n);
    }
    check_finite_slice({T.data(), n}, limit, N);

    Eigen::MatrixXd Zt(n, d);
    std::vector<double> zrow(d), zin(d);
    for (std::size_t jj = N; jj-- > 0;) {
        const std::size_t j = jj;
        const auto X = ens.states(j);
        const auto dW = ens.increments(j);
        FeatureMap fm(opt.basis, X, n, d);
        check_overfit(fm.size(), n);
        const Eigen::MatrixXd Phi = fm.design(X, n);
        const SliceSolver solver(Phi, opt.basis.ridge, &sol.warnings);

        // Z: martingale-increment regression with the projected Y as control variate.
        const Eigen::VectorXd& zsrc = j == 0 ? Tc : old ? T : ynext;
        const Eigen::VectorXd proj = Phi * solver.solve(zsrc);
        for (std::size_t p = 0; p < n; ++p) {
            const double r = zsrc[p] - proj[p];
            for (std::size_t k = 0; k < d; ++k) Zt(p, k) = r * dW[p * d + k] / h;
        }
        if (j == 0) sol.z0_samples.resize(n * d);
        if (j == 0)
            for (std::size_t p = 0; p < n; ++p)
                for (std::size_t k = 0; k < d; ++k) sol.z0_samples[p * d + k] = Zt(p, k);
        const Eigen::MatrixXd zc = solver.solve(Zt);
        const Eigen::MatrixXd Zhat = Phi * zc;
        sol.z_fit[j] = SliceFit{fm, zc};

        const double t = ens.grid().node(j);
        double zsup = 0.0;
        CompensatedSum z2;
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = X.subspan(p * d, d);
            for (std::size_t k = 0; k < d; ++k) zrow[k] = Zhat(p, k), sol.z_mean[j][k] += zrow[k];
            const double zn = h_norm(zrow);
            zsup = std::max(zsup, zn);
            z2.add(zn * zn);
            double yin = ynext[p];
            if (old) {
                yin = old->y(j, x);
                old->z_clipped(j, x, zin);
            } else {
                std::copy(zrow.begin(), zrow.end(), zin.begin());
                if (zn > sol.z_clip) {
                    ++sol.clipped;
                    for (double& v : zin) v *= sol.z_clip / zn;
                }
            }
            const double g = sol.driver(t, x, yin, zin);
            if (j > 0) {
                double m = 0.0;
                for (std::size_t k = 0; k < d; ++k) m += zrow[k] * dW[p * d + k];
                Tc[p] += h * g - m;
            }
            T[p] = (opt.scheme == BsdeScheme::one_step ? ynext[p] : T[p]) + h * g;
        }
        for (auto& v : sol.z_mean[j]) v /= static_cast<double>(n);
        sol.z_sup[j] = zsup;
        sol.z_rms[j] = std::sqrt(z2.value() / static_cast<double>(n));
        check_finite_slice({T.data(), n}, limit, j);

        const Eigen::VectorXd yc = solver.solve(T);
        sol.y_fit[j] = SliceFit{fm, yc};
        ynext = Phi * yc;
        CompensatedSum ym;
        for (std::size_t p = 0; p < n; ++p) {
            ym.add(ynext[p]);
            if (std::abs(ynext[p]) > sol.bound) ++sol.bound_violations;
        }
        sol.y_mean[j] = ym.value() / static_cast<double>(n);
        if (j == 0) sol.value_samples.assign(T.data(), T.data() + n);
        if (opt.scheme == BsdeScheme::one_step) T = ynext;
    }
    sol.z_mean[N] = sol.z_mean[N - 1];
    sol.z_sup[N] = sol.z_sup[N - 1];
    sol.z_rms[N] = sol.z_rms[N - 1];
    sol.value = summarize(sol.value_samples, opt.level);
}

} // namespace detail

inline double exp_affine_bound(const TerminalCondition& phi, const Driver& psi, double horizon) {
    if (!phi.bounded) return std::numeric_limits<double>::infinity();
    return (phi.bound + horizon * psi.K) * std::exp(psi.L * horizon);
}

inline BsdeSolution solve_bsde_lsmc(const PathEnsemble& ens, const Driver& driver, const TerminalCondition& terminal,
                                    const BsdeOptions& options = {}) {
    const double horizon = ens.grid().T - ens.grid().t0;
    BsdeSolution sol;
    sol.grid = ens.grid();
    sol.dim = ens.dim();
    sol.n_paths = ens.n_paths();
    sol.seed = ens.seed();
    sol.terminal = terminal;
    sol.driver = driver;
    sol.options = options;
    sol.bound = exp_affine_bound(terminal, driver, horizon);
    if (options.z_clip > 0.0) {
        sol.z_clip = options.z_clip;
    } else {
        const double base = terminal.bounded ? terminal.bound + driver.K * horizon : std::numeric_limits<double>::infinity();
        sol.z_clip = 10.0 * base;
        if (sol.z_clip == 0.0) sol.z_clip = 10.0;
    }
    if (driver.growth == DriverGrowth::quadratic && !std::isfinite(sol.z_clip))
        throw std::invalid_argument("solve_bsde_lsmc: quadratic drivers need a finite z truncation level");
    detail::backward_sweep(ens, sol, nullptr);
    if (options.scheme == BsdeScheme::picard) {
        sol.picard_values.push_back(sol.value.mean);
        for (int it = 0; it < options.picard_iterations; ++it) {
            BsdeSolution next = sol;
            next.warnings.clear();
            detail::backward_sweep(ens, next, &sol);
            next.picard_values = sol.picard_values;
            next.picard_values.push_back(next.value.mean);
            next.warnings.insert(next.warnings.begin(), sol.warnings.begin(), sol.warnings.end());
            sol = std::move(next);
        }
    }
    return sol;
}

// ---------------------------------------------------------------------------

struct ColeHopfResult {
    double value = 0.0;
    double se = 0.0;
    std::size_t n = 0;
    std::vector<double> influence; // per-path linearization, mean zero
};

/// (1/gamma) log E exp(gamma phi(X_T)) on the ensemble at its initial node.
inline ColeHopfResult cole_hopf_value(const PathEnsemble& ens, double gamma, const TerminalCondition& phi,
                                      std::size_t node = 0) {
    if (gamma == 0.0) throw std::invalid_argument("cole_hopf_value: gamma must be nonzero");
    if (node != 0) throw std::invalid_argument("cole_hopf_value: only the initial node is supported");
    const std::size_t n = ens.n_paths(), d = ens.dim();
    if (n < 2) throw std::invalid_argument("cole_hopf_value: need at least two paths");
    const auto XN = ens.states(ens.steps());
    std::vector<double> a(n);
    double M = -std::numeric_limits<double>::infinity();
    for (std::size_t p = 0; p < n; ++p) {
        a[p] = gamma * phi({XN.data() + p * d, d});
        M = std::max(M, a[p]);
    }
    std::vector<double> e(n);
    for (std::size_t p = 0; p < n; ++p) e[p] = std::exp(a[p] - M);
    const auto s = summarize(e);
    ColeHopfResult r;
    r.n = n;
    r.value = (M + std::log(s.mean)) / gamma;
    r.se = s.se / (s.mean * std::abs(gamma));
    r.influence.resize(n);
    for (std::size_t p = 0; p < n; ++p) r.influence[p] = (e[p] / s.mean - 1.0) / gamma;
    return r;
}

// ---------------------------------------------------------------------------

struct VariationalSolution {
    TimeGrid grid;
    GalerkinState direction;
    std::vector<McSummary> grad_y; // per node: ensemble mean of the fitted nabla Y h
    McSummary value;               // nabla Y_{t0} h
    std::vector<double> energy;    // per path: sup |nabla Y h|^2 + int |nabla Z h|^2
    std::vector<SliceFit> g_fit, h_fit;
    std::vector<std::string> warnings;

    [[nodiscard]] McSummary mean_energy() const { return summarize(energy); }
};

inline VariationalSolution solve_variational_bsde(const BsdeSolution& sol, const PathEnsemble& ens,
                                                  const BsdeOptions& options = {}) {
    if (!ens.has_variation()) throw std::invalid_argument("solve_variational_bsde: ensemble lacks first variation");
    if (!sol.terminal.differentiable()) throw std::invalid_argument("solve_variational_bsde: terminal needs a gradient");
    if (!sol.driver.differentiable()) throw std::invalid_argument("solve_variational_bsde: driver needs gradients");
    if (ens.n_paths() != sol.n_paths || ens.steps() != sol.grid.steps)
        throw std::invalid_argument("solve_variational_bsde: solution and ensemble differ");
    const std::size_t N = ens.steps(), d = ens.dim(), n = ens.n_paths();
    const double h = ens.grid().h();
    const auto& drv = sol.driver;

    VariationalSolution out;
    out.grid = ens.grid();
    out.direction = ens.direction();
    out.grad_y.resize(N + 1);
    out.g_fit.resize(N);
    out.h_fit.resize(N);
    out.energy.assign(n, 0.0);

    std::vector<double> gx(d), gz(d), yrow(d), zrow(d), grad(d), aug(n * 2 * d);
    Eigen::VectorXd T(n), gnext(n);
    {
        const auto XN = ens.states(N);
        const auto VN = ens.variation(N);
        for (std::size_t p = 0; p < n; ++p) {
            sol.terminal.gradient({XN.data() + p * d, d}, grad);
            T[p] = inner(grad, {VN.data() + p * d, d});
            gnext[p] = T[p];
            out.energy[p] = T[p] * T[p];
        }
        out.grad_y[N] = summarize(std::vector<double>(T.data(), T.data() + n), options.level);
    }
    std::vector<double> sup2(out.energy), int2(n, 0.0);
    Eigen::MatrixXd Ht(n, d);
    for (std::size_t j = N; j-- > 0;) {
        const auto X = ens.states(j);
        const auto V = ens.variation(j);
        const auto dW = ens.increments(j);
        for (std::size_t p = 0; p < n; ++p) {
            std::copy_n(X.data() + p * d, d, aug.data() + p * 2 * d);
            std::copy_n(V.data() + p * d, d, aug.data() + p * 2 * d + d);
        }
        FeatureMap fm(options.basis, aug, n, 2 * d);
        check_overfit(fm.size(), n);
        const Eigen::MatrixXd Phi = fm.design(aug, n);
        const SliceSolver solver(Phi, options.basis.ridge, &out.warnings);
        const Eigen::VectorXd proj = Phi * solver.solve(gnext);
        for (std::size_t p = 0; p < n; ++p) {
            const double r = gnext[p] - proj[p];
            for (std::size_t k = 0; k < d; ++k) Ht(p, k) = r * dW[p * d + k] / h;
        }
        const Eigen::MatrixXd hc = solver.solve(Ht);
        const Eigen::MatrixXd Hhat = Phi * hc;
        out.h_fit[j] = SliceFit{fm, hc};
        const double t = ens.grid().node(j);
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = X.subspan(p * d, d);
            const auto v = V.subspan(p * d, d);
            const double y = sol.y(j, x);
            sol.z_clipped(j, x, zrow);
            double lin = 0.0;
            if (drv.uses_x && drv.grad_x) {
                drv.grad_x(t, x, y, zrow, gx);
                lin += inner(gx, v);
            }
            if (drv.uses_y && drv.grad_y) lin += drv.grad_y(t, x, y, zrow) * gnext[p];
            drv.grad_z(t, x, y, zrow, gz);
            double hz2 = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                lin += gz[k] * Hhat(p, k);
                hz2 += Hhat(p, k) * Hhat(p, k);
            }
            int2[p] += h * hz2;
            T[p] += h * lin;
        }
        const Eigen::VectorXd gc = solver.solve(T);
        out.g_fit[j] = SliceFit{fm, gc};
        gnext = Phi * gc;
        for (std::size_t p = 0; p < n; ++p) sup2[p] = std::max(sup2[p], gnext[p] * gnext[p]);
        out.grad_y[j] = summarize(std::vector<double>(gnext.data(), gnext.data() + n), options.level);
    }
    for (std::size_t p = 0; p < n; ++p) out.energy[p] = sup2[p] + int2[p];
    out.value = summarize(std::vector<double>(T.data(), T.data() + n), options.level);
    return out;
}

// ---------------------------------------------------------------------------

struct ZIdentificationReport {
    double z_side = 0.0, z_se = 0.0;   // <Z_{t0}, h>
    double fd_side = 0.0, fd_se = 0.0; // FD of v(t0, .) along (-A)^{-alpha} h
    double combined_se = 0.0;
    [[nodiscard]] double discrepancy() const { return z_side - fd_side; }
    [[nodiscard]] double z_score() const {
        return combined_se > 0 ? discrepancy() / combined_se : (discrepancy() == 0 ? 0.0 : INFINITY);
    }
};

/// Value at t0 of a BSDE-type functional on an ensemble: estimate and per-path samples
/// whose paired differences carry the common-noise SE.
struct ValueEstimate {
    double value = 0.0;
    std::vector<double> samples;
};
using ValueFunctional = std::function<ValueEstimate(const PathEnsemble&)>;

inline ValueFunctional lsmc_value(const Driver& driver, const TerminalCondition& terminal, const BsdeOptions& options = {}) {
    return [=](const PathEnsemble& e) {
        auto s = solve_bsde_lsmc(e, driver, terminal, options);
        return ValueEstimate{s.value.mean, std::move(s.value_samples)};
    };
}

inline ValueFunctional cole_hopf_functional(double gamma, const TerminalCondition& terminal) {
    return [=](const PathEnsemble& e) {
        auto r = cole_hopf_value(e, gamma, terminal);
        for (double& v : r.influence) v += r.value;
        return ValueEstimate{r.value, std::move(r.influence)};
    };
}

/// Central difference of a value functional at x0 along direction k, common seed.
inline McSummary fd_directional(const EnsembleSpec& base, const GalerkinState& k, double step, const ValueFunctional& value,
                                double level = 0.95) {
    if (!(step > 0.0)) throw std::invalid_argument("fd_directional: step must be positive");
    EnsembleSpec plus = base, minus = base;
    plus.direction.reset(), minus.direction.reset();
    plus.x0 = base.x0 + step * k;
    minus.x0 = base.x0 - step * k;
    const auto vp = value(PathEnsemble(plus));
    const auto vm = value(PathEnsemble(minus));
    auto diff = paired_difference(vp.samples, vm.samples, level);
    McSummary r = diff;
    r.mean = (vp.value - vm.value) / (2.0 * step);
    r.se = diff.se / (2.0 * step);
    return r;
}

inline ZIdentificationReport check_z_identification(const BsdeSolution& sol, const EnsembleSpec& base,
                                                    const GalerkinState& h, double fd_step,
                                                    const ValueFunctional& value) {
    check_dim(base.op, h.dim(), "check_z_identification");
    ZIdentificationReport r;
    const auto zs = sol.z0_along(h.coords());
    r.z_side = inner(sol.z0(), h.coords());
    r.z_se = zs.se;
    const auto dir = fractional_apply(base.op, -base.op.alpha(), h);
    const auto fd = fd_directional(base, dir, fd_step, value);
    r.fd_side = fd.mean;
    r.fd_se = fd.se;
    r.combined_se = combined_se(r.z_se, r.fd_se);
    return r;
}

// ---------------------------------------------------------------------------

struct SolutionDistance {
    double sup_y = 0.0; // max over nodes of the ensemble RMS of Y^a - Y^b
    double l2_z = 0.0;  // h sum_j E |Z^a_j - Z^b_j|^2
};

inline SolutionDistance solution_distance(const BsdeSolution& a, const BsdeSolution& b, const PathEnsemble& ens) {
    const std::size_t N = ens.steps(), d = ens.dim(), n = ens.n_paths();
    const double h = ens.grid().h();
    SolutionDistance r;
    std::vector<double> za(d), zb(d);
    for (std::size_t j = N + 1; j-- > 0;) {
        const auto X = ens.states(j);
        CompensatedSum dy, dz;
        for (std::size_t p = 0; p < n; ++p) {
            const auto x = X.subspan(p * d, d);
            const double e = a.y(j, x) - b.y(j, x);
            dy.add(e * e);
            if (j < N) {
                a.z(j, x, za);
                b.z(j, x, zb);
                double s = 0.0;
                for (std::size_t k = 0; k < d; ++k) s += (za[k] - zb[k]) * (za[k] - zb[k]);
                dz.add(s);
            }
        }
        r.sup_y = std::max(r.sup_y, std::sqrt(dy.value() / static_cast<double>(n)));
        r.l2_z += h * dz.value() / static_cast<double>(n);
    }
    return r;
}

struct StabilityRow {
    std::size_t n = 0;
    double sup_y = 0.0;
    double l2_z = 0.0;
    double value = 0.0;
};

/// Solves with (phi_n, psi_n) for each size and compares with the unmollified solution.
inline std::vector<StabilityRow> bsde_stability_sweep(const PathEnsemble& ens, const Driver& driver,
                                                      const TerminalCondition& terminal, const std::vector<std::size_t>& sizes,
                                                      const BsdeOptions& options = {}, MollifierSpec templ = {}) {
    const auto reference = solve_bsde_lsmc(ens, driver, terminal, options);
    std::vector<StabilityRow> rows;
    for (std::size_t n : sizes) {
        MollifierSpec ms = templ;
        ms.n = n;
        ms.radius = 0.0;
        const auto phin = mollify_terminal(terminal, ms, ens.dim());
        const auto psin = mollify_driver(driver, ms, ens.dim());
        BsdeOptions o = options;
        if (o.z_clip == 0.0) o.z_clip = reference.z_clip;
        const auto s = solve_bsde_lsmc(ens, psin, phin, o);
        const auto dist = solution_distance(s, reference, ens);
        rows.push_back({n, dist.sup_y, dist.l2_z, s.value.mean});
    }
    return rows;
}

} // namespace bsdelab
