#pragma once

// Closed forms used as independent references in tests. Everything here is
// computed directly from eigenvalues, not through library helpers.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <vector>

#include "bsdelab/spectral.hpp"

namespace oracle {

inline double lam(const bsdelab::SpectralOperator& op, std::size_t k) { return op.eigenvalues()[k]; }

/// Var of int_0^tau e^{-l(tau-s)} l^{-a} dW_s.
inline double ou_var(double l, double a, double tau) {
    return std::pow(l, -2.0 * a) * (1.0 - std::exp(-2.0 * l * tau)) / (2.0 * l);
}

/// Law of <w, X_tau> for drift zero started at x0: mean and variance.
struct ScalarGaussian {
    double mean = 0.0, var = 0.0;
};
inline ScalarGaussian projected_law(const bsdelab::SpectralOperator& op, double a, const std::vector<double>& x0,
                                    const std::vector<double>& w, double tau) {
    ScalarGaussian g;
    for (std::size_t k = 0; k < w.size(); ++k) {
        const double l = lam(op, k);
        g.mean += w[k] * std::exp(-l * tau) * x0[k];
        g.var += w[k] * w[k] * ou_var(l, a, tau);
    }
    return g;
}

/// phi = log(1 + c cos(<w,x> + theta)) / gamma; value of (1/gamma) log E exp(gamma phi(X_tau)),
/// which solves the BSDE with driver (gamma/2)|z|^2.
inline double log_cosine_value(const bsdelab::SpectralOperator& op, double a, double gamma, double c,
                               const std::vector<double>& w, double theta, const std::vector<double>& x0, double tau) {
    const auto g = projected_law(op, a, x0, w, tau);
    return std::log(1.0 + c * std::exp(-0.5 * g.var) * std::cos(g.mean + theta)) / gamma;
}

/// Gradient in x0 of log_cosine_value.
inline std::vector<double> log_cosine_gradient(const bsdelab::SpectralOperator& op, double a, double gamma, double c,
                                               const std::vector<double>& w, double theta,
                                               const std::vector<double>& x0, double tau) {
    const auto g = projected_law(op, a, x0, w, tau);
    const double damp = c * std::exp(-0.5 * g.var);
    const double s = -damp * std::sin(g.mean + theta) / (1.0 + damp * std::cos(g.mean + theta)) / gamma;
    std::vector<double> out(w.size());
    for (std::size_t k = 0; k < w.size(); ++k) out[k] = s * w[k] * std::exp(-lam(op, k) * tau);
    return out;
}

/// Z at t0 for the same problem: gradient composed with (-A)^{-a}.
inline std::vector<double> log_cosine_z(const bsdelab::SpectralOperator& op, double a, double gamma, double c,
                                        const std::vector<double>& w, double theta, const std::vector<double>& x0,
                                        double tau) {
    auto g = log_cosine_gradient(op, a, gamma, c, w, theta, x0, tau);
    for (std::size_t k = 0; k < g.size(); ++k) g[k] *= std::pow(lam(op, k), -a);
    return g;
}

/// Var of the Bismut weight for drift zero: (s)^{-2} sum h_k^2 l^{2a-1}(1-e^{-2 l s})/2.
inline double weight_variance(const bsdelab::SpectralOperator& op, double a, const std::vector<double>& h, double s) {
    double v = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) {
        const double l = lam(op, k);
        v += h[k] * h[k] * std::pow(l, 2.0 * a - 1.0) * (1.0 - std::exp(-2.0 * l * s)) / 2.0;
    }
    return v / (s * s);
}

/// int_0^tau |(-A)^e e^{sA} h|^2 ds.
inline double weighted_energy(const bsdelab::SpectralOperator& op, double e, const std::vector<double>& h, double tau) {
    double v = 0.0;
    for (std::size_t k = 0; k < h.size(); ++k) {
        const double l = lam(op, k);
        v += h[k] * h[k] * std::pow(l, 2.0 * e - 1.0) * (1.0 - std::exp(-2.0 * l * tau)) / 2.0;
    }
    return v;
}

/// sup_{mu > 0} mu^d / (1 + mu) = d^d (1-d)^{1-d}.
inline double yosida_constant(double d) {
    if (d == 0.0) return 1.0;
    return std::pow(d, d) * std::pow(1.0 - d, 1.0 - d);
}

} // namespace oracle
