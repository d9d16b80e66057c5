#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "bsdelab/generators.hpp"

using namespace bsdelab;

namespace {
std::vector<double> gaussian(std::size_t d, std::mt19937_64& gen, double s = 1.0) {
    std::normal_distribution<double> n(0.0, s);
    std::vector<double> v(d);
    for (auto& x : v) x = n(gen);
    return v;
}
} // namespace

TEST(Terminal, LogCosineBoundAndGradient) {
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, {1.0, 0.5, 0.0, 0.0});
    EXPECT_NEAR(phi.bound, std::log(2.0), 1e-15);
    EXPECT_TRUE(check_terminal_bound(phi, 4, 2000, 1).passed());
    std::mt19937_64 gen(1);
    const auto x = gaussian(4, gen);
    std::vector<double> g(4);
    phi.gradient(x, g);
    for (std::size_t k = 0; k < 4; ++k) {
        auto xp = x, xm = x;
        xp[k] += 1e-6, xm[k] -= 1e-6;
        EXPECT_NEAR(g[k], (phi(xp) - phi(xm)) / 2e-6, 1e-7);
    }
}

TEST(Driver, SampledBounds) {
    EXPECT_TRUE(check_driver_bounds(Driver::quadratic(1.0), 6, 500, 2).passed());
    EXPECT_TRUE(check_driver_bounds(Driver::constant(0.3), 6, 200, 2).passed());
    EXPECT_TRUE(check_driver_bounds(Driver::linear_z({1.0, -2.0, 0.5, 0, 0, 0}), 6, 500, 2).passed());
    EXPECT_TRUE(check_driver_bounds(Driver::affine(0.5, {0.3, 0, 0}, 0.2), 3, 500, 2).passed());
}

TEST(Cost, SampledBounds) {
    EXPECT_TRUE(check_cost_bounds(RunningCost::lq(5), 5, 2000, 3).passed());
    EXPECT_TRUE(check_cost_bounds(RunningCost::lq(5, 2.0, {1.0, -0.5, 0, 0, 0}), 5, 2000, 3).passed());
}

TEST(Hamiltonian, StructureExamples) {
    const auto cost = RunningCost::lq(3);
    const std::vector<double> x(3, 0.0), z{1.0, -2.0, 0.5};
    auto r = hamiltonian_structure(cost, 0.0, x, z);
    EXPECT_NEAR(r.value, -0.5 * inner(z, z), 1e-14);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(r.argmin[k], -z[k], 1e-14);
    const std::vector<double> c0{0.3, 0.1, -0.2};
    r = hamiltonian_structure(RunningCost::lq(3, 1.0, c0), 0.0, x, z);
    EXPECT_NEAR(r.value, inner(z, c0) - 0.5 * inner(z, z), 1e-14);
    for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(r.argmin[k], c0[k] - z[k], 1e-14);
    const std::vector<double> zero(3, 0.0);
    r = hamiltonian_structure(cost, 0.0, x, zero);
    EXPECT_EQ(r.value, 0.0);
    EXPECT_EQ(h_norm(r.argmin), 0.0);
    EXPECT_THROW(hamiltonian_structure(RunningCost::lq(3, 1.0, {}, CostMode::alpha_cost), 0.0, x, z), std::invalid_argument);
}

TEST(Hamiltonian, GenericOptimizerMatchesClosedForm) {
    // Same quadratic cost without the closed-form descriptor.
    const auto ref = RunningCost::lq(4, 1.5, {0.2, 0, -0.1, 0});
    RunningCost opaque = ref;
    opaque.quadratic.reset();
    std::mt19937_64 gen(4);
    for (int trial = 0; trial < 20; ++trial) {
        const auto z = gaussian(4, gen);
        const std::vector<double> x(4, 0.0);
        const auto a = hamiltonian_structure(ref, 0.0, x, z);
        const auto b = hamiltonian_structure(opaque, 0.0, x, z);
        EXPECT_TRUE(b.converged);
        EXPECT_NEAR(a.value, b.value, 1e-6);
        for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(a.argmin[k], b.argmin[k], 1e-3);
    }
}

TEST(Hamiltonian, OptimizerRespectsBallAndBudget) {
    // Non-quadratic smooth cost with no gradient supplied.
    RunningCost c;
    c.ell = [](double, std::span<const double>, std::span<const double> u) {
        double s = 0.0;
        for (double v : u) s += std::sqrt(1 + v * v) - 1 + 0.5 * v * v;
        return s;
    };
    c.c = 1.0, c.C = 0.5, c.R = 0.0;
    const std::vector<double> x(2, 0.0), z{3.0, -0.5};
    const auto r = hamiltonian_structure(c, 0.0, x, z);
    EXPECT_TRUE(r.converged);
    for (std::size_t k = 0; k < 2; ++k) {
        // stationarity u/sqrt(1+u^2) + u + z = 0, solved by bisection
        double lo = -10, hi = 10;
        for (int it = 0; it < 200; ++it) {
            const double m = 0.5 * (lo + hi);
            (m / std::sqrt(1 + m * m) + m + z[k] > 0 ? hi : lo) = m;
        }
        EXPECT_NEAR(r.argmin[k], lo, 1e-3);
    }
    EXPECT_LE(h_norm(r.argmin), std::max(c.R, h_norm(z) / c.C + std::sqrt(c.c / c.C)));
    const auto capped = hamiltonian_structure(c, 0.0, x, z, {.budget = 1, .tolerance = 1e-8});
    EXPECT_FALSE(capped.converged);
    EXPECT_TRUE(std::isfinite(capped.value));
    EXPECT_GE(capped.value, r.value - 1e-12);
}

TEST(Hamiltonian, AlphaAndPenalizedPerMode) {
    const auto op = build_operator(Geometry::interval(), 5, 0.25);
    const auto cost = RunningCost::lq(5, 1.0, {}, CostMode::alpha_cost);
    const std::vector<double> x(5, 0.0), z{1.0, 0.5, -0.3, 0.2, 0.1};
    const auto a = hamiltonian_alpha(cost, op, 0.0, x, z);
    double va = 0.0;
    for (std::size_t k = 0; k < 5; ++k) {
        const double la = op.power(k, 0.25);
        EXPECT_NEAR(a.argmin[k], -la * z[k], 1e-14);
        va -= 0.5 * la * la * z[k] * z[k];
    }
    EXPECT_NEAR(a.value, va, 1e-14);
    double prev = -INFINITY;
    for (double n : {1000.0, 100.0, 10.0, 1.0}) {
        const auto p = hamiltonian_penalized(cost, op, n, 0.0, x, z);
        double vp = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
            const double l2 = op.power(k, 0.5);
            EXPECT_NEAR(p.argmin[k], -op.power(k, 0.25) * z[k] / (1 + 2 * l2 / n), 1e-14);
            vp -= l2 * z[k] * z[k] / (2 * (1 + 2 * l2 / n));
        }
        EXPECT_NEAR(p.value, vp, 1e-14);
        EXPECT_GE(p.value, prev);
        prev = p.value;
    }
    EXPECT_NEAR(hamiltonian_penalized(cost, op, 1e12, 0.0, x, z).value, a.value, 1e-10);
    const std::vector<double> zero(5, 0.0);
    EXPECT_EQ(hamiltonian_alpha(cost, op, 0.0, x, zero).value, 0.0);
}

TEST(Hamiltonian, AlphaLowerBoundFromCostConstants) {
    const auto op = build_operator(Geometry::interval(), 6, 0.2);
    const auto cost = RunningCost::lq_fractional(op);
    std::mt19937_64 gen(6);
    for (int trial = 0; trial < 50; ++trial) {
        const auto z = gaussian(6, gen, 3.0);
        const std::vector<double> x(6, 0.0);
        const auto r = hamiltonian_alpha(cost, op, 0.0, x, z);
        EXPECT_NEAR(r.value, -0.5 * inner(z, z), 1e-12);
        const double CC = 1.0 / (4.0 * cost.C);
        EXPECT_GE(r.value, -CC * (1 + inner(z, z)));
    }
}

TEST(Hamiltonian, LocalLipschitzQuadraticModulus) {
    const auto op = build_operator(Geometry::interval(), 4, 0.25);
    const auto d = hamiltonian_driver(RunningCost::lq(4), op, HamiltonianRegime::structure);
    EXPECT_DOUBLE_EQ(d.quadratic_gamma, -1.0);
    EXPECT_TRUE(check_driver_bounds(d, 4, 500, 8).passed());
    const auto dp = hamiltonian_driver(RunningCost::lq_fractional(op), op, HamiltonianRegime::penalized, 10.0);
    EXPECT_NEAR(dp.quadratic_gamma, -10.0 / 12.0, 1e-14);
    EXPECT_TRUE(check_driver_bounds(dp, 4, 500, 8).passed());
    const auto da = hamiltonian_driver(RunningCost::lq(4, 1.0, {}, CostMode::alpha_cost), op, HamiltonianRegime::alpha);
    EXPECT_TRUE(std::isnan(da.quadratic_gamma));
    EXPECT_TRUE(check_driver_bounds(da, 4, 500, 8).passed());
}

TEST(Hamiltonian, ArgminInsideBall) {
    const auto cost = RunningCost::lq(3, 2.0, {0.5, 0, 0});
    std::mt19937_64 gen(9);
    for (int trial = 0; trial < 200; ++trial) {
        const auto z = gaussian(3, gen, 5.0);
        const std::vector<double> x(3, 0.0);
        const auto r = hamiltonian_structure(cost, 0.0, x, z);
        EXPECT_LE(h_norm(r.argmin), std::max(cost.R, h_norm(z) / cost.C + std::sqrt(cost.c / cost.C)));
    }
}

TEST(KernelRule, MassSymmetrySupport) {
    for (std::size_t n : {1u, 3u, 8u}) {
        const auto rule = make_kernel_rule({n}, {.n = n});
        double mass = 0.0;
        std::vector<double> mean(n, 0.0);
        for (std::size_t q = 0; q < rule.size(); ++q) {
            EXPECT_GE(rule.weights[q], 0.0);
            mass += rule.weights[q];
            const auto p = rule.point(q);
            EXPECT_LE(h_norm(p), 1.0 / n + 1e-12);
            for (std::size_t i = 0; i < n; ++i) mean[i] += rule.weights[q] * p[i];
        }
        EXPECT_NEAR(mass, 1.0, 1e-12);
        for (double m : mean) EXPECT_NEAR(m, 0.0, 1e-14);
    }
}

TEST(KernelRule, SecondMomentToleranceCheck) {
    EXPECT_NO_THROW(make_kernel_rule({2}, {.n = 2, .tensor_nodes = 16, .tolerance = 1e-3}));
    EXPECT_THROW(make_kernel_rule({4}, {.n = 4, .tensor_nodes = 4, .tolerance = 1e-9}), std::runtime_error);
}

TEST(Mollify, TerminalExamples) {
    const std::size_t dim = 10;
    const auto c = mollify_terminal(TerminalCondition::constant(1.7), {.n = 3}, dim);
    std::mt19937_64 gen(10);
    const auto x = gaussian(dim, gen);
    EXPECT_NEAR(c(x), 1.7, 1e-13);
    std::vector<double> w(dim, 0.0);
    w[0] = 1.0, w[4] = 2.0;
    for (std::size_t n : {2u, 5u, 8u}) {
        const auto lin = mollify_terminal(TerminalCondition::linear(w), {.n = n}, dim);
        double expect = 0.0;
        for (std::size_t k = 0; k < n; ++k) expect += w[k] * x[k];
        EXPECT_NEAR(lin(x), expect, 1e-12);
    }
    EXPECT_THROW(mollify_terminal(TerminalCondition::constant(0.0), {.n = 11}, dim), std::invalid_argument);
}

TEST(Mollify, TerminalBoundAndGradient) {
    const std::size_t dim = 8;
    const auto op = build_operator(Geometry::interval(), dim, 0.25);
    const auto phi = TerminalCondition::tanh_ridge(point_evaluation(op, 1.0), 0.05);
    for (std::size_t n : {4u, 8u}) {
        const auto pn = mollify_terminal(phi, {.n = n}, dim);
        EXPECT_TRUE(check_terminal_bound(pn, dim, 300, 11).passed());
        std::mt19937_64 gen(n);
        const auto x = gaussian(dim, gen, 0.3);
        std::vector<double> g(dim);
        pn.gradient(x, g);
        for (std::size_t k = 0; k < dim; ++k) {
            auto xp = x, xm = x;
            xp[k] += 1e-5, xm[k] -= 1e-5;
            EXPECT_NEAR(g[k], (pn(xp) - pn(xm)) / 2e-5, 1e-5 * (1 + std::abs(g[k])));
        }
    }
}

TEST(Mollify, DriverExamples) {
    const std::size_t dim = 6;
    std::mt19937_64 gen(12);
    const auto x = gaussian(dim, gen), z = gaussian(dim, gen);
    EXPECT_NEAR(mollify_driver(Driver::constant(0.4), {.n = 2}, dim)(0.0, x, 0.1, z), 0.4, 1e-13);
    const std::vector<double> b{1.0, -0.5, 2.0, 0.3, 0.0, 1.0};
    for (std::size_t l : {1u, 4u, 6u}) {
        const auto d = mollify_driver(Driver::linear_z(b), {.n = l}, dim);
        double expect = 0.0;
        for (std::size_t k = 0; k < l; ++k) expect += b[k] * z[k];
        EXPECT_NEAR(d(0.0, x, 0.0, z), expect, 1e-12);
        EXPECT_EQ(d.L, h_norm(b));
        EXPECT_TRUE(check_driver_bounds(d, dim, 100, 13).passed());
    }
    const auto q = mollify_driver(Driver::quadratic(1.0), {.n = 2}, dim);
    EXPECT_TRUE(check_driver_bounds(q, dim, 100, 14).passed());
}

TEST(Mollify, PointwiseErrorDecaysInN) {
    const std::size_t dim = 32;
    const auto op = build_operator(Geometry::interval(), dim, 0.25);
    std::vector<double> w(dim);
    for (std::size_t k = 0; k < dim; ++k) w[k] = 1.0 / (1.0 + k);
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, w);
    std::mt19937_64 gen(15);
    std::vector<std::vector<double>> xs;
    for (int s = 0; s < 20; ++s) xs.push_back(gaussian(dim, gen, 0.5));
    double prev = INFINITY;
    for (std::size_t n : {4u, 8u, 16u, 32u}) {
        const auto pn = mollify_terminal(phi, {.n = n}, dim);
        double err = 0.0;
        for (const auto& x : xs) err = std::max(err, std::abs(pn(x) - phi(x)));
        EXPECT_LT(err, prev);
        prev = err;
    }
}
