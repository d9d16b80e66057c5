#pragma once

// Terminal conditions, BSDE drivers, running costs and their Hamiltonians,
// and the finite-dimensional mollification of terminal data and drivers.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "bsdelab/rng.hpp"
#include "bsdelab/spectral.hpp"
#include "bsdelab/stats.hpp"

namespace bsdelab {

using ScalarField = std::function<double(std::span<const double> x)>;
using GradientField = std::function<void(std::span<const double> x, std::span<double> grad)>;

struct TerminalCondition {
    ScalarField phi;
    double bound = std::numeric_limits<double>::infinity(); // K_phi
    bool bounded = false;
    GradientField gradient;
    std::string name = "custom";

    double operator()(std::span<const double> x) const { return phi(x); }
    [[nodiscard]] bool differentiable() const { return static_cast<bool>(gradient); }

    static TerminalCondition constant(double c) {
        return {[c](std::span<const double>) { return c; }, std::abs(c), true,
                [](std::span<const double>, std::span<double> g) { std::fill(g.begin(), g.end(), 0.0); }, "constant"};
    }
    static TerminalCondition linear(std::vector<double> w) {
        auto wp = std::make_shared<const std::vector<double>>(std::move(w));
        return {[wp](std::span<const double> x) { return inner(x, *wp); }, std::numeric_limits<double>::infinity(), false,
                [wp](std::span<const double>, std::span<double> g) { std::copy(wp->begin(), wp->end(), g.begin()); },
                "linear"};
    }
    /// phi = log(1 + c cos(<w,x> + theta)) / gamma, |c| < 1.
    static TerminalCondition log_cosine(double gamma, double c, std::vector<double> w, double theta = 0.0) {
        if (!(std::abs(c) < 1.0)) throw std::invalid_argument("log_cosine: |c| must be < 1");
        if (gamma == 0.0) throw std::invalid_argument("log_cosine: gamma must be nonzero");
        auto wp = std::make_shared<const std::vector<double>>(std::move(w));
        const double K = std::max(std::abs(std::log1p(std::abs(c))), std::abs(std::log1p(-std::abs(c)))) / std::abs(gamma);
        return {[=](std::span<const double> x) { return std::log1p(c * std::cos(inner(x, *wp) + theta)) / gamma; }, K, true,
                [=](std::span<const double> x, std::span<double> g) {
                    const double a = inner(x, *wp) + theta;
                    const double s = -c * std::sin(a) / (1.0 + c * std::cos(a)) / gamma;
                    for (std::size_t k = 0; k < g.size(); ++k) g[k] = s * (*wp)[k];
                },
                "log_cosine"};
    }
    /// phi = tanh(<w,x> / delta).
    static TerminalCondition tanh_ridge(std::vector<double> w, double delta) {
        if (!(delta > 0.0)) throw std::invalid_argument("tanh_ridge: delta must be positive");
        auto wp = std::make_shared<const std::vector<double>>(std::move(w));
        return {[=](std::span<const double> x) { return std::tanh(inner(x, *wp) / delta); }, 1.0, true,
                [=](std::span<const double> x, std::span<double> g) {
                    const double c = std::cosh(inner(x, *wp) / delta);
                    const double s = 1.0 / (delta * c * c);
                    for (std::size_t k = 0; k < g.size(); ++k) g[k] = s * (*wp)[k];
                },
                "tanh_ridge"};
    }
};

/// Weights w_k = e_k(xi, eta), so <w, x> is the point value of x.
inline std::vector<double> point_evaluation(const SpectralOperator& op, double xi, double eta = 0.0) {
    std::vector<double> w(op.dim());
    for (std::size_t k = 0; k < op.dim(); ++k) w[k] = op.eigenfunction(k, xi, eta);
    return w;
}

enum class DriverGrowth { lipschitz, quadratic };

using DriverFn = std::function<double(double t, std::span<const double> x, double y, std::span<const double> z)>;
using DriverGradFn =
    std::function<void(double t, std::span<const double> x, double y, std::span<const double> z, std::span<double> g)>;
using DriverScalarGradFn = std::function<double(double t, std::span<const double> x, double y, std::span<const double> z)>;

struct Driver {
    DriverFn psi;
    DriverGrowth growth = DriverGrowth::lipschitz;
    double L = 0.0; // L_psi
    double K = 0.0; // K_psi
    DriverGradFn grad_x;
    DriverScalarGradFn grad_y;
    DriverGradFn grad_z;
    bool uses_x = true;
    bool uses_y = true;
    /// Set when psi(z) = (gamma/2)|z|^2 exactly.
    double quadratic_gamma = std::numeric_limits<double>::quiet_NaN();
    std::string name = "custom";

    double operator()(double t, std::span<const double> x, double y, std::span<const double> z) const {
        return psi(t, x, y, z);
    }
    [[nodiscard]] bool differentiable() const {
        return (!uses_x || grad_x) && (!uses_y || grad_y) && static_cast<bool>(grad_z);
    }
    [[nodiscard]] bool is_zero() const { return name == "zero"; }

    static Driver zero() { return constant(0.0, "zero"); }
    static Driver constant(double c, std::string nm = "constant") {
        Driver d;
        d.psi = [c](double, std::span<const double>, double, std::span<const double>) { return c; };
        d.K = std::abs(c);
        d.grad_x = [](double, std::span<const double>, double, std::span<const double>, std::span<double> g) {
            std::fill(g.begin(), g.end(), 0.0);
        };
        d.grad_y = [](double, std::span<const double>, double, std::span<const double>) { return 0.0; };
        d.grad_z = d.grad_x;
        d.uses_x = d.uses_y = false;
        d.name = std::move(nm);
        return d;
    }
    /// psi = (gamma/2)|z|^2
    static Driver quadratic(double gamma) {
        Driver d;
        d.psi = [gamma](double, std::span<const double>, double, std::span<const double> z) {
            return 0.5 * gamma * inner(z, z);
        };
        d.growth = DriverGrowth::quadratic;
        d.L = std::abs(gamma) / 2.0;
        d.K = 0.0;
        d.grad_z = [gamma](double, std::span<const double>, double, std::span<const double> z, std::span<double> g) {
            for (std::size_t k = 0; k < g.size(); ++k) g[k] = gamma * z[k];
        };
        d.uses_x = d.uses_y = false;
        d.quadratic_gamma = gamma;
        d.name = "quadratic";
        return d;
    }
    /// psi = <b, z>
    static Driver linear_z(std::vector<double> b) {
        auto bp = std::make_shared<const std::vector<double>>(std::move(b));
        Driver d;
        d.psi = [bp](double, std::span<const double>, double, std::span<const double> z) { return inner(z, *bp); };
        d.L = h_norm(*bp);
        d.grad_z = [bp](double, std::span<const double>, double, std::span<const double>, std::span<double> g) {
            std::copy(bp->begin(), bp->end(), g.begin());
        };
        d.uses_x = d.uses_y = false;
        d.name = "linear_z";
        return d;
    }
    /// psi = -r y + <b, z> + c, a Lipschitz driver with y-dependence.
    static Driver affine(double r, std::vector<double> b, double c = 0.0) {
        auto bp = std::make_shared<const std::vector<double>>(std::move(b));
        Driver d;
        d.psi = [=](double, std::span<const double>, double y, std::span<const double> z) { return -r * y + inner(z, *bp) + c; };
        d.L = std::abs(r) + h_norm(*bp);
        d.K = std::abs(c);
        d.grad_y = [r](double, std::span<const double>, double, std::span<const double>) { return -r; };
        d.grad_z = [bp](double, std::span<const double>, double, std::span<const double>, std::span<double> g) {
            std::copy(bp->begin(), bp->end(), g.begin());
        };
        d.uses_x = false;
        d.name = "affine";
        return d;
    }
};

struct BoundCheck {
    std::size_t samples = 0;
    std::size_t violations = 0;
    double worst_ratio = 0.0;
    [[nodiscard]] bool passed() const { return violations == 0; }
};

namespace detail {
inline void gaussian_vector(const NoiseStream& rng, std::uint64_t id, std::uint32_t slot, double scale, std::span<double> v) {
    for (std::size_t k = 0; k < v.size(); k += 4) {
        const auto q = rng.quad(id, static_cast<std::uint32_t>(k / 4), slot, NoiseDomain::auxiliary);
        for (std::size_t i = 0; i < 4 && k + i < v.size(); ++i) v[k + i] = scale * q.z[i];
    }
}
} // namespace detail

inline BoundCheck check_terminal_bound(const TerminalCondition& phi, std::size_t dim, std::size_t samples,
                                       std::uint64_t seed, double scale = 2.0) {
    BoundCheck r;
    if (!phi.bounded) return r;
    NoiseStream rng(seed);
    std::vector<double> x(dim);
    for (std::size_t s = 0; s < samples; ++s) {
        detail::gaussian_vector(rng, s, 0, scale, x);
        const double v = std::abs(phi(x));
        r.worst_ratio = std::max(r.worst_ratio, phi.bound > 0 ? v / phi.bound : v);
        if (v > phi.bound) ++r.violations;
        ++r.samples;
    }
    return r;
}

/// Local-Lipschitz ratio in z against L(1+|z1|+|z2|) (quadratic) or L, and |psi(t,x,0,0)| <= K.
inline BoundCheck check_driver_bounds(const Driver& d, std::size_t dim, std::size_t samples, std::uint64_t seed,
                                      double scale = 2.0, double T = 1.0) {
    NoiseStream rng(seed);
    BoundCheck r;
    std::vector<double> x(dim), z1(dim), z2(dim), zero(dim, 0.0);
    for (std::size_t s = 0; s < samples; ++s) {
        detail::gaussian_vector(rng, s, 0, scale, x);
        detail::gaussian_vector(rng, s, 1, scale, z1);
        detail::gaussian_vector(rng, s, 2, scale, z2);
        const double t = T * rng.uniform(s, 7);
        const double y = scale * (2.0 * rng.uniform(s, 8) - 1.0);
        double dz = 0.0;
        for (std::size_t k = 0; k < dim; ++k) dz += (z1[k] - z2[k]) * (z1[k] - z2[k]);
        dz = std::sqrt(dz);
        const double num = std::abs(d(t, x, y, z1) - d(t, x, y, z2));
        const double modulus = d.growth == DriverGrowth::quadratic ? d.L * (1.0 + h_norm(z1) + h_norm(z2)) : d.L;
        const double ratio = dz > 0 ? num / (dz * std::max(modulus, 1e-300)) : 0.0;
        r.worst_ratio = std::max(r.worst_ratio, ratio);
        if (num > modulus * dz * (1 + 1e-12) + 1e-14) ++r.violations;
        if (std::abs(d(t, x, 0.0, zero)) > d.K * (1 + 1e-12) + 1e-14) ++r.violations;
        ++r.samples;
    }
    return r;
}

enum class CostMode { h_cost, alpha_cost };

using CostFn = std::function<double(double t, std::span<const double> x, std::span<const double> u)>;
using CostGradFn = std::function<void(double t, std::span<const double> x, std::span<const double> u, std::span<double> g)>;

/// l(t,x,u) = state(t,x) + 1/2 sum_k weights_k (u_k - center_k)^2
struct QuadraticCost {
    std::vector<double> weights;
    std::vector<double> center;
    std::function<double(double, std::span<const double>)> state;
};

struct RunningCost {
    CostFn ell;
    CostGradFn grad_u;
    CostMode mode = CostMode::h_cost;
    double c = 0.0, C = 0.0, R = 0.0, L = 0.0;
    std::optional<QuadraticCost> quadratic;
    std::string name = "custom";

    double operator()(double t, std::span<const double> x, std::span<const double> u) const { return ell(t, x, u); }

    static RunningCost from_quadratic(QuadraticCost q, CostMode mode, std::string nm = "quadratic") {
        if (q.center.empty()) q.center.assign(q.weights.size(), 0.0);
        if (q.center.size() != q.weights.size()) throw std::invalid_argument("RunningCost: center/weights size mismatch");
        double wmin = std::numeric_limits<double>::infinity(), wmax = 0.0;
        for (double w : q.weights) {
            if (!(w > 0.0)) throw std::invalid_argument("RunningCost: weights must be positive");
            wmin = std::min(wmin, w), wmax = std::max(wmax, w);
        }
        auto qp = std::make_shared<const QuadraticCost>(q);
        RunningCost r;
        r.ell = [qp](double t, std::span<const double> x, std::span<const double> u) {
            double s = qp->state ? qp->state(t, x) : 0.0;
            for (std::size_t k = 0; k < u.size(); ++k) s += 0.5 * qp->weights[k] * (u[k] - qp->center[k]) * (u[k] - qp->center[k]);
            return s;
        };
        r.grad_u = [qp](double, std::span<const double>, std::span<const double> u, std::span<double> g) {
            for (std::size_t k = 0; k < u.size(); ++k) g[k] = qp->weights[k] * (u[k] - qp->center[k]);
        };
        const double c0 = h_norm(q.center);
        r.mode = mode;
        r.c = 0.5 * wmax * std::max(1.0, c0) * std::max(1.0, c0);
        r.C = c0 > 0 ? wmin / 4.0 : wmin / 2.0;
        r.R = c0 > 0 ? c0 / (1.0 - 1.0 / std::sqrt(2.0)) : 0.0;
        r.L = wmax;
        r.quadratic = std::move(q);
        r.name = std::move(nm);
        return r;
    }
    /// (scale/2)|u - center|_H^2
    static RunningCost lq(std::size_t dim, double scale = 1.0, std::vector<double> center = {},
                          CostMode mode = CostMode::h_cost) {
        return from_quadratic({std::vector<double>(dim, scale), std::move(center), {}}, mode, "lq");
    }
    /// (scale/2)|(-A)^alpha u|_H^2
    static RunningCost lq_fractional(const SpectralOperator& op, double scale = 1.0) {
        std::vector<double> w(op.dim());
        for (std::size_t k = 0; k < op.dim(); ++k) w[k] = scale * op.power(k, 2.0 * op.alpha());
        return from_quadratic({std::move(w), {}, {}}, CostMode::alpha_cost, "lq_fractional");
    }
    static RunningCost constant(double value, CostMode mode = CostMode::h_cost) {
        RunningCost r;
        r.ell = [value](double, std::span<const double>, std::span<const double>) { return value; };
        r.grad_u = [](double, std::span<const double>, std::span<const double>, std::span<double> g) {
            std::fill(g.begin(), g.end(), 0.0);
        };
        r.mode = mode;
        r.c = std::abs(value);
        r.name = "constant";
        return r;
    }
};

/// 0 <= l <= c(1+|u|)^2 and l >= C|u|^2 for |u| >= R (H-norm), sampled.
inline BoundCheck check_cost_bounds(const RunningCost& cost, std::size_t dim, std::size_t samples, std::uint64_t seed,
                                    double scale = 3.0) {
    NoiseStream rng(seed);
    BoundCheck r;
    std::vector<double> x(dim), u(dim);
    for (std::size_t s = 0; s < samples; ++s) {
        detail::gaussian_vector(rng, s, 0, scale, x);
        detail::gaussian_vector(rng, s, 1, scale * (1 + (s % 5)), u);
        const double l = cost(rng.uniform(s, 3), x, u);
        const double nu = h_norm(u);
        bool bad = l < 0.0 || l > cost.c * (1 + nu) * (1 + nu) * (1 + 1e-12);
        if (nu >= cost.R && l < cost.C * nu * nu * (1 - 1e-12)) bad = true;
        r.violations += bad;
        ++r.samples;
    }
    return r;
}

struct HamiltonianResult {
    double value = 0.0;
    std::vector<double> argmin;
    bool converged = true;
    int iterations = 0;
};

struct HamiltonianOptions {
    int budget = 200;
    double tolerance = 1e-8;
};

namespace detail {
/// inf over the ball of l(t,x,u) + pen(u) + <p, u>, with pen(u) = sum pen_k u_k^2.
inline HamiltonianResult minimize_pairing(const RunningCost& cost, double t, std::span<const double> x,
                                          std::span<const double> p, std::span<const double> pen,
                                          const HamiltonianOptions& opt) {
    const std::size_t d = p.size();
    const double pn = h_norm(p);
    const double radius = cost.C > 0 ? std::max(cost.R, pn / cost.C + std::sqrt(cost.c / cost.C))
                                     : std::numeric_limits<double>::infinity();
    HamiltonianResult r;
    r.argmin.assign(d, 0.0);
    if (cost.quadratic) {
        const auto& q = *cost.quadratic;
        double v = q.state ? q.state(t, x) : 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            // minimize 1/2 w (u-c)^2 + pen u^2 + p u
            const double a = q.weights[k] + 2.0 * pen[k];
            const double u = (q.weights[k] * q.center[k] - p[k]) / a;
            r.argmin[k] = u;
            v += 0.5 * q.weights[k] * (u - q.center[k]) * (u - q.center[k]) + pen[k] * u * u + p[k] * u;
        }
        r.value = v;
        return r;
    }
    auto objective = [&](std::span<const double> u) {
        double s = cost(t, x, u) + inner(p, u);
        for (std::size_t k = 0; k < d; ++k) s += pen[k] * u[k] * u[k];
        return s;
    };
    auto project = [&](std::vector<double>& u) {
        const double n = h_norm(u);
        if (n > radius)
            for (double& v : u) v *= radius / n;
    };
    std::vector<double> u(d, 0.0), g(d), trial(d);
    double f = objective(u);
    r.converged = false;
    for (r.iterations = 0; r.iterations < opt.budget; ++r.iterations) {
        if (cost.grad_u) {
            cost.grad_u(t, x, u, g);
        } else {
            for (std::size_t k = 0; k < d; ++k) {
                const double e = 1e-6 * (1.0 + std::abs(u[k]));
                auto up = u, um = u;
                up[k] += e, um[k] -= e;
                g[k] = (cost(t, x, up) - cost(t, x, um)) / (2 * e);
            }
        }
        for (std::size_t k = 0; k < d; ++k) g[k] += p[k] + 2.0 * pen[k] * u[k];
        const double g2 = inner(g, g);
        if (g2 == 0.0) {
            r.converged = true;
            break;
        }
        double step = 1.0;
        double ftrial = f;
        bool accepted = false;
        for (int bt = 0; bt < 60; ++bt, step *= 0.5) {
            for (std::size_t k = 0; k < d; ++k) trial[k] = u[k] - step * g[k];
            project(trial);
            ftrial = objective(trial);
            double dec = 0.0;
            for (std::size_t k = 0; k < d; ++k) dec += g[k] * (u[k] - trial[k]);
            if (ftrial <= f - 1e-4 * dec) {
                accepted = true;
                break;
            }
        }
        if (!accepted || f - ftrial <= opt.tolerance) {
            if (accepted && ftrial < f) u = trial, f = ftrial;
            r.converged = true;
            break;
        }
        u = trial;
        f = ftrial;
    }
    r.argmin = u;
    r.value = f;
    return r;
}
} // namespace detail

/// inf_u l(t,x,u) + <z, u>
inline HamiltonianResult hamiltonian_structure(const RunningCost& cost, double t, std::span<const double> x,
                                               std::span<const double> z, const HamiltonianOptions& opt = {}) {
    if (cost.mode != CostMode::h_cost) throw std::invalid_argument("hamiltonian_structure: cost must be an H-cost");
    const std::vector<double> pen(z.size(), 0.0);
    return detail::minimize_pairing(cost, t, x, z, pen, opt);
}

/// inf_u l(t,x,u) + <z, (-A)^alpha u>
inline HamiltonianResult hamiltonian_alpha(const RunningCost& cost, const SpectralOperator& op, double t,
                                           std::span<const double> x, std::span<const double> z,
                                           const HamiltonianOptions& opt = {}) {
    if (cost.mode != CostMode::alpha_cost) throw std::invalid_argument("hamiltonian_alpha: cost must be an alpha-cost");
    check_dim(op, z.size(), "hamiltonian_alpha");
    std::vector<double> p(z.size()), pen(z.size(), 0.0);
    for (std::size_t k = 0; k < z.size(); ++k) p[k] = op.power(k, op.alpha()) * z[k];
    return detail::minimize_pairing(cost, t, x, p, pen, opt);
}

/// inf_u l(t,x,u) + (1/n)|(-A)^alpha u|^2 + <z, (-A)^alpha u>
inline HamiltonianResult hamiltonian_penalized(const RunningCost& cost, const SpectralOperator& op, double n, double t,
                                               std::span<const double> x, std::span<const double> z,
                                               const HamiltonianOptions& opt = {}) {
    if (!(n >= 1.0)) throw std::invalid_argument("hamiltonian_penalized: n must be >= 1");
    check_dim(op, z.size(), "hamiltonian_penalized");
    std::vector<double> p(z.size()), pen(z.size());
    for (std::size_t k = 0; k < z.size(); ++k) {
        p[k] = op.power(k, op.alpha()) * z[k];
        pen[k] = op.power(k, 2.0 * op.alpha()) / n;
    }
    return detail::minimize_pairing(cost, t, x, p, pen, opt);
}

enum class HamiltonianRegime { structure, alpha, penalized };

/// The Hamiltonian as a BSDE driver psi(t,x,y,z) (y unused). grad_z is the
/// channel image of the argmin (envelope theorem).
inline Driver hamiltonian_driver(const RunningCost& cost, const SpectralOperator& op, HamiltonianRegime regime,
                                 double n = 1.0) {
    auto cp = std::make_shared<const RunningCost>(cost);
    auto opp = std::make_shared<const SpectralOperator>(op);
    auto eval = [=](double t, std::span<const double> x, std::span<const double> z) {
        switch (regime) {
        case HamiltonianRegime::structure: return hamiltonian_structure(*cp, t, x, z);
        case HamiltonianRegime::alpha: return hamiltonian_alpha(*cp, *opp, t, x, z);
        default: return hamiltonian_penalized(*cp, *opp, n, t, x, z);
        }
    };
    Driver d;
    d.psi = [eval](double t, std::span<const double> x, double, std::span<const double> z) { return eval(t, x, z).value; };
    d.grad_z = [eval, opp, regime](double t, std::span<const double> x, double, std::span<const double> z,
                                  std::span<double> g) {
        const auto r = eval(t, x, z);
        for (std::size_t k = 0; k < g.size(); ++k)
            g[k] = regime == HamiltonianRegime::structure ? r.argmin[k] : opp->power(k, opp->alpha()) * r.argmin[k];
    };
    d.grad_y = [](double, std::span<const double>, double, std::span<const double>) { return 0.0; };
    d.uses_y = false;
    d.uses_x = !cost.quadratic || static_cast<bool>(cost.quadratic->state);
    if (d.uses_x)
        d.grad_x = {};
    d.growth = DriverGrowth::quadratic;
    double lam_max = regime == HamiltonianRegime::structure ? 1.0 : op.power(op.dim() - 1, 2.0 * op.alpha());
    d.L = cost.C > 0 ? lam_max / cost.C : std::numeric_limits<double>::infinity();
    d.K = cost.c;
    if (cost.quadratic && !cost.quadratic->state) {
        // Pure quadratic in z: psi = -1/2 sum p_k^2 / (w_k + 2 pen_k) with p the paired vector.
        const auto& q = *cost.quadratic;
        bool isotropic = true;
        double g0 = std::numeric_limits<double>::quiet_NaN();
        for (std::size_t k = 0; k < op.dim(); ++k) {
            if (q.center[k] != 0.0) isotropic = false;
            const double m = regime == HamiltonianRegime::structure ? 1.0 : op.power(k, 2.0 * op.alpha());
            const double pen = regime == HamiltonianRegime::penalized ? 2.0 * op.power(k, 2.0 * op.alpha()) / n : 0.0;
            const double gk = -m / (q.weights[k] + pen);
            if (std::isnan(g0)) g0 = gk;
            if (std::abs(gk - g0) > 1e-12 * std::abs(g0)) isotropic = false;
        }
        if (isotropic) {
            d.quadratic_gamma = g0;
            d.L = std::abs(g0) / 2.0;
            d.K = 0.0;
        }
    }
    d.name = regime == HamiltonianRegime::structure ? "hamiltonian_structure"
             : regime == HamiltonianRegime::alpha   ? "hamiltonian_alpha"
                                                    : "hamiltonian_penalized";
    return d;
}

// ---------------------------------------------------------------------------
// Mollifiers

struct MollifierSpec {
    std::size_t n = 4;
    double radius = 0.0;            // 0: use 1/n
    std::size_t tensor_max_dim = 6; // tensor Gauss-Legendre up to this perturbation dimension
    std::size_t tensor_nodes = 8;   // per axis
    std::size_t tensor_max_points = std::size_t{1} << 18;
    std::size_t qmc_pairs = 512;    // antithetic pairs above the tensor cap
    double tolerance = 0.0;         // relative second-moment tolerance; 0 disables the check

    [[nodiscard]] double kernel_radius() const { return radius > 0 ? radius : 1.0 / static_cast<double>(n); }
};

/// Unnormalized bump exp(-1/(1-r^2)) on the unit ball.
inline double bump(double r2) { return r2 < 1.0 ? std::exp(-1.0 / (1.0 - r2)) : 0.0; }

/// Discrete rule sum_q w_q f(xi_q) for the product of normalized bump kernels of
/// radius r on blocks of the given dimensions. Weights are nonnegative and sum to 1,
/// and points come in +/- pairs.
struct KernelRule {
    std::vector<std::size_t> blocks;
    std::size_t dim = 0;
    std::vector<double> points; // Q x dim
    std::vector<double> weights;
    [[nodiscard]] std::size_t size() const { return weights.size(); }
    [[nodiscard]] std::span<const double> point(std::size_t q) const { return {points.data() + q * dim, dim}; }
};

namespace detail {
inline std::pair<std::vector<double>, std::vector<double>> gauss_legendre(std::size_t m) {
    auto expand = [](const auto& absc, const auto& wts, bool odd) {
        std::vector<double> x, w;
        for (std::size_t i = 0; i < absc.size(); ++i) {
            if (odd && i == 0) {
                x.push_back(absc[0]), w.push_back(wts[0]);
                continue;
            }
            x.push_back(absc[i]), w.push_back(wts[i]);
            x.push_back(-absc[i]), w.push_back(wts[i]);
        }
        return std::pair{x, w};
    };
    using boost::math::quadrature::gauss;
    switch (m) {
    case 4: return expand(gauss<double, 4>::abscissa(), gauss<double, 4>::weights(), false);
    case 6: return expand(gauss<double, 6>::abscissa(), gauss<double, 6>::weights(), false);
    case 8: return expand(gauss<double, 8>::abscissa(), gauss<double, 8>::weights(), false);
    case 10: return expand(gauss<double, 10>::abscissa(), gauss<double, 10>::weights(), false);
    case 12: return expand(gauss<double, 12>::abscissa(), gauss<double, 12>::weights(), false);
    case 16: return expand(gauss<double, 16>::abscissa(), gauss<double, 16>::weights(), false);
    case 20: return expand(gauss<double, 20>::abscissa(), gauss<double, 20>::weights(), false);
    default: throw std::invalid_argument("gauss_legendre: supported node counts are 4,6,8,10,12,16,20");
    }
}

/// Inverse CDF of the radial law r^{n-1} bump(r^2) on [0,1], tabulated.
class RadialLaw {
public:
    explicit RadialLaw(std::size_t n, std::size_t cells = 4096) : r_(cells + 1), cdf_(cells + 1, 0.0) {
        for (std::size_t i = 0; i <= cells; ++i) r_[i] = static_cast<double>(i) / cells;
        auto dens = [n](double r) { return std::pow(r, static_cast<double>(n) - 1.0) * bump(r * r); };
        for (std::size_t i = 1; i <= cells; ++i) {
            // Simpson on each cell
            const double a = r_[i - 1], b = r_[i];
            cdf_[i] = cdf_[i - 1] + (b - a) / 6.0 * (dens(a) + 4.0 * dens(0.5 * (a + b)) + dens(b));
        }
        const double tot = cdf_.back();
        for (double& c : cdf_) c /= tot;
        // second moment E r^2 under the law
        double m2 = 0.0;
        for (std::size_t i = 1; i <= cells; ++i) {
            const double a = r_[i - 1], b = r_[i], c = 0.5 * (a + b);
            m2 += (b - a) / 6.0 * (a * a * dens(a) + 4.0 * c * c * dens(c) + b * b * dens(b));
        }
        second_moment_ = m2 / tot;
    }
    [[nodiscard]] double quantile(double u) const {
        const auto it = std::lower_bound(cdf_.begin(), cdf_.end(), u);
        const std::size_t i = std::clamp<std::size_t>(static_cast<std::size_t>(it - cdf_.begin()), 1, cdf_.size() - 1);
        const double c0 = cdf_[i - 1], c1 = cdf_[i];
        const double f = c1 > c0 ? (u - c0) / (c1 - c0) : 0.5;
        return r_[i - 1] + f * (r_[i] - r_[i - 1]);
    }
    /// E|xi|^2 for the unit-radius kernel.
    [[nodiscard]] double second_moment() const { return second_moment_; }

private:
    std::vector<double> r_, cdf_;
    double second_moment_ = 0.0;
};

/// Additive recurrence with the generalized golden ratio (R_d sequence).
inline std::vector<double> rd_alphas(std::size_t d) {
    double phi = 2.0;
    for (int it = 0; it < 100; ++it) phi = std::pow(1.0 + phi, 1.0 / (static_cast<double>(d) + 1.0));
    std::vector<double> a(d);
    double p = 1.0;
    for (std::size_t j = 0; j < d; ++j) {
        p /= phi;
        a[j] = p;
    }
    return a;
}
} // namespace detail

inline KernelRule make_kernel_rule(std::vector<std::size_t> blocks, const MollifierSpec& spec) {
    KernelRule rule;
    rule.blocks = blocks;
    for (auto b : blocks) {
        if (b == 0) throw std::invalid_argument("make_kernel_rule: empty block");
        rule.dim += b;
    }
    const double r = spec.kernel_radius();
    const double tensor_points = std::pow(static_cast<double>(spec.tensor_nodes), static_cast<double>(rule.dim));
    if (rule.dim <= spec.tensor_max_dim && tensor_points <= static_cast<double>(spec.tensor_max_points)) {
        const auto [x, w] = detail::gauss_legendre(spec.tensor_nodes);
        const std::size_t m = x.size();
        std::size_t total = 1;
        for (std::size_t i = 0; i < rule.dim; ++i) total *= m;
        std::vector<std::size_t> idx(rule.dim, 0);
        double wsum = 0.0;
        std::vector<double> pt(rule.dim);
        for (std::size_t q = 0; q < total; ++q) {
            std::size_t rem = q;
            for (std::size_t i = 0; i < rule.dim; ++i) idx[i] = rem % m, rem /= m;
            double weight = 1.0;
            std::size_t off = 0;
            for (auto b : blocks) {
                double r2 = 0.0;
                for (std::size_t i = off; i < off + b; ++i) {
                    pt[i] = x[idx[i]];
                    r2 += pt[i] * pt[i];
                    weight *= w[idx[i]];
                }
                weight *= bump(r2);
                off += b;
            }
            if (weight <= 0.0) continue;
            for (double v : pt) rule.points.push_back(r * v);
            rule.weights.push_back(weight);
            wsum += weight;
        }
        for (double& v : rule.weights) v /= wsum;
    } else {
        std::size_t coords = 0;
        for (auto b : blocks) coords += b + 1; // direction + radius
        const auto alphas = detail::rd_alphas(coords);
        std::vector<detail::RadialLaw> laws;
        for (auto b : blocks) laws.emplace_back(b);
        std::vector<double> pt(rule.dim);
        for (std::size_t q = 0; q < spec.qmc_pairs; ++q) {
            std::size_t c = 0, off = 0;
            for (std::size_t bi = 0; bi < blocks.size(); ++bi) {
                const std::size_t b = blocks[bi];
                double n2 = 0.0;
                for (std::size_t i = 0; i < b; ++i) {
                    double u = std::fmod(0.5 + static_cast<double>(q + 1) * alphas[c++], 1.0);
                    u = std::clamp(u, 1e-12, 1.0 - 1e-12);
                    pt[off + i] = normal_quantile(u);
                    n2 += pt[off + i] * pt[off + i];
                }
                double u = std::fmod(0.5 + static_cast<double>(q + 1) * alphas[c++], 1.0);
                const double rad = laws[bi].quantile(std::clamp(u, 1e-12, 1.0 - 1e-12));
                const double scale = n2 > 0 ? rad / std::sqrt(n2) : 0.0;
                for (std::size_t i = 0; i < b; ++i) pt[off + i] *= scale;
                off += b;
            }
            for (double v : pt) rule.points.push_back(r * v);
            for (double v : pt) rule.points.push_back(-r * v);
            rule.weights.push_back(0.5 / static_cast<double>(spec.qmc_pairs));
            rule.weights.push_back(0.5 / static_cast<double>(spec.qmc_pairs));
        }
    }
    if (spec.tolerance > 0.0) {
        // Per-block second moments against the tabulated exact value.
        std::size_t off = 0;
        for (auto b : blocks) {
            const double exact = detail::RadialLaw(b).second_moment() * r * r;
            double m2 = 0.0;
            for (std::size_t q = 0; q < rule.size(); ++q) {
                const auto p = rule.point(q);
                double s = 0.0;
                for (std::size_t i = off; i < off + b; ++i) s += p[i] * p[i];
                m2 += rule.weights[q] * s;
            }
            if (std::abs(m2 - exact) > spec.tolerance * exact)
                throw std::runtime_error("mollifier: quadrature resolution insufficient for requested tolerance");
            off += b;
        }
    }
    return rule;
}

/// phi_n(x) = int rho_n(xi - P_n x) phi(sum_{i<n} xi_i e_i) dxi
inline TerminalCondition mollify_terminal(const TerminalCondition& phi, const MollifierSpec& spec, std::size_t dim) {
    if (spec.n == 0 || spec.n > dim) throw std::invalid_argument("mollify_terminal: need 1 <= n <= operator dim");
    auto rule = std::make_shared<const KernelRule>(make_kernel_rule({spec.n}, spec));
    auto base = std::make_shared<const TerminalCondition>(phi);
    const std::size_t n = spec.n;
    TerminalCondition out;
    out.bounded = phi.bounded;
    out.bound = phi.bound;
    out.name = phi.name + "_mollified";
    out.phi = [rule, base, n, dim](std::span<const double> x) {
        std::vector<double> y(dim, 0.0);
        double s = 0.0;
        for (std::size_t q = 0; q < rule->size(); ++q) {
            const auto p = rule->point(q);
            for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + p[i];
            s += rule->weights[q] * (*base)(y);
        }
        if (base->bounded) s = std::clamp(s, -base->bound, base->bound);
        return s;
    };
    if (phi.gradient) {
        out.gradient = [rule, base, n, dim](std::span<const double> x, std::span<double> g) {
            std::vector<double> y(dim, 0.0), gq(dim);
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t q = 0; q < rule->size(); ++q) {
                const auto p = rule->point(q);
                for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + p[i];
                base->gradient(y, gq);
                for (std::size_t i = 0; i < n; ++i) g[i] += rule->weights[q] * gq[i];
            }
        };
    } else {
        auto self = std::make_shared<ScalarField>(out.phi);
        out.gradient = [self, n](std::span<const double> x, std::span<double> g) {
            std::vector<double> y(x.begin(), x.end());
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t i = 0; i < n; ++i) {
                const double e = 1e-6;
                y[i] = x[i] + e;
                const double fp = (*self)(y);
                y[i] = x[i] - e;
                const double fm = (*self)(y);
                y[i] = x[i];
                g[i] = (fp - fm) / (2 * e);
            }
        };
    }
    return out;
}

/// psi_l convolves x and z over balls in R^l and y over an interval, jointly.
inline Driver mollify_driver(const Driver& psi, const MollifierSpec& spec, std::size_t dim) {
    if (spec.n == 0 || spec.n > dim) throw std::invalid_argument("mollify_driver: need 1 <= l <= operator dim");
    const std::size_t l = spec.n;
    auto rule = std::make_shared<const KernelRule>(make_kernel_rule({l, l, 1}, spec));
    auto base = std::make_shared<const Driver>(psi);
    Driver out = psi;
    out.quadratic_gamma = std::numeric_limits<double>::quiet_NaN();
    out.name = psi.name + "_mollified";
    out.uses_x = out.uses_y = true;
    {
        // |psi(t,x,y,eta) - psi(t,x,y,0)| over the kernel support
        const double r = spec.kernel_radius();
        out.K = psi.K + psi.L * r * (psi.growth == DriverGrowth::quadratic ? 1.0 + r : 1.0);
    }
    out.psi = [rule, base, l, dim](double t, std::span<const double> x, double y, std::span<const double> z) {
        std::vector<double> xs(dim, 0.0), zs(dim, 0.0);
        double s = 0.0;
        for (std::size_t q = 0; q < rule->size(); ++q) {
            const auto p = rule->point(q);
            for (std::size_t i = 0; i < l; ++i) xs[i] = x[i] + p[i], zs[i] = z[i] + p[l + i];
            s += rule->weights[q] * (*base)(t, xs, y + p[2 * l], zs);
        }
        return s;
    };
    auto mollified_grad = [rule, base, l, dim](const DriverGradFn& g0, bool in_z) -> DriverGradFn {
        if (!g0) return {};
        return [=](double t, std::span<const double> x, double y, std::span<const double> z, std::span<double> g) {
            std::vector<double> xs(dim, 0.0), zs(dim, 0.0), gq(dim);
            std::fill(g.begin(), g.end(), 0.0);
            for (std::size_t q = 0; q < rule->size(); ++q) {
                const auto p = rule->point(q);
                for (std::size_t i = 0; i < l; ++i) xs[i] = x[i] + p[i], zs[i] = z[i] + p[l + i];
                g0(t, xs, y + p[2 * l], zs, gq);
                for (std::size_t i = 0; i < l; ++i) g[i] += rule->weights[q] * gq[i];
            }
            (void)in_z;
        };
    };
    out.grad_x = psi.uses_x ? mollified_grad(psi.grad_x, false)
                            : DriverGradFn([](double, std::span<const double>, double, std::span<const double>,
                                              std::span<double> g) { std::fill(g.begin(), g.end(), 0.0); });
    out.grad_z = mollified_grad(psi.grad_z, true);
    if (psi.grad_y || !psi.uses_y) {
        out.grad_y = [rule, base, l, dim](double t, std::span<const double> x, double y, std::span<const double> z) {
            if (!base->uses_y) return 0.0;
            std::vector<double> xs(dim, 0.0), zs(dim, 0.0);
            double s = 0.0;
            for (std::size_t q = 0; q < rule->size(); ++q) {
                const auto p = rule->point(q);
                for (std::size_t i = 0; i < l; ++i) xs[i] = x[i] + p[i], zs[i] = z[i] + p[l + i];
                s += rule->weights[q] * base->grad_y(t, xs, y + p[2 * l], zs);
            }
            return s;
        };
    }
    return out;
}

} // namespace bsdelab
