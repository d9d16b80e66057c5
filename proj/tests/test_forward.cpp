#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "bsdelab/forward.hpp"

using namespace bsdelab;

namespace {
SpectralOperator interval_op(std::size_t d, double alpha = 0.25) { return build_operator(Geometry::interval(), d, alpha); }
} // namespace

TEST(TimeGrid, Nodes) {
    const TimeGrid g(0.5, 1.5, 4);
    EXPECT_DOUBLE_EQ(g.h(), 0.25);
    EXPECT_DOUBLE_EQ(g.node(0), 0.5);
    EXPECT_DOUBLE_EQ(g.node(4), 1.5);
    EXPECT_EQ(g.node_count(), 5u);
    for (std::size_t j = 1; j <= 4; ++j) EXPECT_LT(g.node(j - 1), g.node(j));
    EXPECT_THROW(TimeGrid(1.0, 1.0, 4), std::invalid_argument);
    EXPECT_THROW(TimeGrid(0.0, 1.0, 0), std::invalid_argument);
}

TEST(Convolution, StartsAtZeroWithClosedFormVariance) {
    const auto op = interval_op(6);
    const TimeGrid g(0.0, 0.5, 64);
    const auto ens = simulate_convolution(op, 0.25, g, 20000, 17);
    for (std::size_t k = 0; k < 6; ++k) {
        for (std::size_t p = 0; p < 10; ++p) EXPECT_EQ(ens.states(0)[p * 6 + k], 0.0);
        const auto m = mode_summary(ens, 64, k);
        EXPECT_LT(std::abs(m.z_score(0.0)), 3.5);
        std::vector<double> sq(ens.n_paths());
        for (std::size_t p = 0; p < sq.size(); ++p) sq[p] = std::pow(ens.states(64)[p * 6 + k], 2);
        EXPECT_LT(std::abs(summarize(sq).z_score(ou_variance(op, k, 0.25, 0.5))), 3.5) << "mode " << k;
    }
}

TEST(Forward, DriftZeroMean) {
    const auto op = interval_op(4);
    const GalerkinState x0({1.0, -0.5, 0.25, 2.0});
    const TimeGrid g(0.0, 0.3, 30);
    const auto ens = simulate_forward(op, DriftSpec::zero(), x0, g, 20000, 3);
    for (std::size_t k = 0; k < 4; ++k)
        EXPECT_LT(std::abs(mode_summary(ens, 30, k).z_score(std::exp(-op.eigenvalue(k) * 0.3) * x0[k])), 3.5);
}

TEST(Forward, LinearDriftDecayRate) {
    const auto op = interval_op(2);
    const GalerkinState x0(std::vector<double>{1.0, 1.0});
    const TimeGrid g(0.0, 1.0, 1024);
    const auto ens = simulate_forward(op, DriftSpec::linear(1.0), x0, g, 20000, 4);
    for (std::size_t k = 0; k < 2; ++k) {
        const auto m = mode_summary(ens, 1024, k);
        const double exact = std::exp(-(op.eigenvalue(k) + 1.0));
        EXPECT_LT(std::abs(m.mean - exact), 3 * m.se + 2e-3 * exact);
    }
}

TEST(Forward, CubicDriftStaysBounded) {
    const auto op = interval_op(8);
    const TimeGrid g(0.0, 1.0, 128);
    const GalerkinState x0 = 3.0 * GalerkinState::unit(8, 0);
    const auto ens = simulate_forward(op, DriftSpec::cubic_truncated(3.0), x0, g, 10000, 5);
    const auto sup = sup_h_norm(ens);
    double worst = 0.0;
    for (double s : sup) worst = std::max(worst, s);
    EXPECT_TRUE(std::isfinite(worst));
    EXPECT_LT(worst, 10.0);
}

TEST(Forward, NonFiniteDriftAborts) {
    const auto op = interval_op(2);
    auto bad = DriftSpec::custom([](std::span<const double>, std::span<double> out) {
        out[0] = NAN;
        out[1] = 0.0;
    });
    EXPECT_THROW(simulate_forward(op, bad, GalerkinState(2), TimeGrid(0, 1, 4), 3, 1), std::runtime_error);
}

TEST(Forward, DeterministicReplay) {
    const auto op = interval_op(5);
    const TimeGrid g(0.0, 1.0, 40);
    const auto a = simulate_forward(op, DriftSpec::cubic_truncated(2.0), GalerkinState(5, 0.3), g, 200, 99);
    const auto b = simulate_forward(op, DriftSpec::cubic_truncated(2.0), GalerkinState(5, 0.3), g, 200, 99);
    for (std::size_t j = 0; j <= 40; ++j) {
        const auto xa = a.states(j), xb = b.states(j);
        for (std::size_t i = 0; i < xa.size(); ++i) ASSERT_EQ(xa[i], xb[i]);
    }
}

TEST(Forward, CheckpointedStorageMatchesFullCache) {
    const auto op = interval_op(4);
    const TimeGrid g(0.0, 1.0, 37);
    SimulationOptions tight;
    tight.stride = 5;
    EnsembleSpec s{op, g, DriftSpec::cubic_truncated(2.0), GalerkinState(4, 0.5), 50, 8};
    s.direction = GalerkinState::unit(4, 1);
    const PathEnsemble full(s);
    s.options = tight;
    const PathEnsemble ck(s);
    EXPECT_EQ(full.stride(), 37u);
    EXPECT_EQ(ck.stride(), 5u);
    // Alternate forward and backward traversal to exercise regeneration.
    for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t i = 0; i <= 37; ++i) {
            const std::size_t j = pass == 0 ? i : 37 - i;
            const auto xf = full.states(j), xc = ck.states(j);
            const auto vf = full.variation(j), vc = ck.variation(j);
            for (std::size_t q = 0; q < xf.size(); ++q) {
                ASSERT_EQ(xf[q], xc[q]);
                ASSERT_EQ(vf[q], vc[q]);
            }
            if (j < 37) {
                const auto df = full.increments(j), dc = ck.increments(j);
                for (std::size_t q = 0; q < df.size(); ++q) ASSERT_EQ(df[q], dc[q]);
            }
        }
    }
    EXPECT_GT(ck.regenerations(), 0u);
}

TEST(Forward, IncrementsHaveBrownianLaw) {
    const auto op = interval_op(3);
    const TimeGrid g(0.0, 1.0, 16);
    const auto ens = simulate_convolution(op, 0.25, g, 20000, 12);
    const double h = g.h();
    for (std::size_t k = 0; k < 3; ++k) {
        std::vector<double> sq, cross;
        const auto dw = ens.increments(5);
        const auto x5 = ens.states(5), x6 = ens.states(6);
        for (std::size_t p = 0; p < ens.n_paths(); ++p) {
            sq.push_back(dw[p * 3 + k] * dw[p * 3 + k]);
            // noise part of X_6 given X_5
            const double xi = x6[p * 3 + k] - std::exp(-op.eigenvalue(k) * h) * x5[p * 3 + k];
            cross.push_back(xi * dw[p * 3 + k]);
        }
        EXPECT_LT(std::abs(summarize(sq).z_score(h)), 3.5);
        const double lam = op.eigenvalue(k);
        EXPECT_LT(std::abs(summarize(cross).z_score(std::pow(lam, -0.25) * -std::expm1(-lam * h) / lam)), 3.5);
    }
}

TEST(Dissipativity, ProbeSignConditions) {
    const auto op = interval_op(8);
    EXPECT_TRUE(dissipativity_probe(op, DriftSpec::zero(), 500, 1).passed());
    EXPECT_TRUE(dissipativity_probe(op, DriftSpec::linear(2.0), 500, 1).passed());
    EXPECT_TRUE(dissipativity_probe(op, DriftSpec::cubic_truncated(1.5), 2000, 1, 2.0).passed());
    auto expanding = DriftSpec::custom([](std::span<const double> x, std::span<double> out) {
        for (std::size_t k = 0; k < x.size(); ++k) out[k] = x[k];
    });
    EXPECT_FALSE(dissipativity_probe(op, expanding, 100, 1).passed());
}

TEST(FirstVariation, DriftZeroIsSemigroup) {
    const auto op = interval_op(4);
    const TimeGrid g(0.0, 1.0, 50);
    const auto base = simulate_forward(op, DriftSpec::zero(), GalerkinState(4), g, 20, 1);
    const auto ens = simulate_first_variation(base, DriftSpec::zero(), GalerkinState::unit(4, 0));
    const auto v = ens.variation(50);
    for (std::size_t p = 0; p < 20; ++p) {
        EXPECT_NEAR(v[p * 4], std::exp(-1.0), 1e-14);
        for (std::size_t k = 1; k < 4; ++k) EXPECT_EQ(v[p * 4 + k], 0.0);
    }
    const auto xb = base.states(50), xv = ens.states(50);
    for (std::size_t i = 0; i < xb.size(); ++i) EXPECT_EQ(xb[i], xv[i]);
}

TEST(FirstVariation, ContractionForDissipativeDrifts) {
    const auto op = interval_op(8);
    const TimeGrid g(0.0, 1.0, 100);
    std::mt19937_64 gen(1);
    std::normal_distribution<double> n;
    GalerkinState h(8);
    for (std::size_t k = 0; k < 8; ++k) h[k] = n(gen);
    for (const auto& drift : {DriftSpec::zero(), DriftSpec::linear(1.0), DriftSpec::cubic_truncated(2.0)}) {
        EnsembleSpec s{op, g, drift, GalerkinState(8, 0.5), 2000, 21};
        s.direction = h;
        const PathEnsemble ens(s);
        const auto sup = sup_h_norm(ens, true);
        std::size_t violations = 0;
        for (double v : sup) violations += v > h_norm(h) * (1 + 1e-12);
        EXPECT_EQ(violations, 0u) << drift.name();
    }
}

TEST(FirstVariation, LinearInDirection) {
    const auto op = interval_op(6);
    const TimeGrid g(0.0, 0.5, 40);
    const auto base = simulate_forward(op, DriftSpec::cubic_truncated(2.0), GalerkinState(6, 0.2), g, 30, 2);
    GalerkinState h({0.3, -1.0, 0.2, 0.0, 0.5, 1.0});
    const auto a = simulate_first_variation(base, DriftSpec::cubic_truncated(2.0), h);
    const auto b = simulate_first_variation(base, DriftSpec::cubic_truncated(2.0), 2.5 * h);
    for (std::size_t j = 0; j <= 40; j += 8) {
        const auto va = a.variation(j), vb = b.variation(j);
        for (std::size_t i = 0; i < va.size(); ++i) EXPECT_NEAR(vb[i], 2.5 * va[i], 1e-13);
    }
    const auto zero = simulate_first_variation(base, DriftSpec::cubic_truncated(2.0), GalerkinState(6));
    for (double v : zero.variation(40)) EXPECT_EQ(v, 0.0);
}

TEST(FirstVariation, CustomDriftWithoutJacobianRejected) {
    const auto op = interval_op(2);
    auto f = DriftSpec::custom([](std::span<const double> x, std::span<double> out) {
        out[0] = -x[0];
        out[1] = -x[1];
    });
    const auto base = simulate_forward(op, f, GalerkinState(2), TimeGrid(0, 1, 4), 3, 1);
    EXPECT_THROW(simulate_first_variation(base, f, GalerkinState::unit(2, 0)), std::invalid_argument);
}

TEST(FirstVariation, PointwiseFractionalBlowUpExponent) {
    const std::size_t d = 256;
    const auto op = interval_op(d, 0.25);
    const TimeGrid g(0.0, 0.2, 2000);
    GalerkinState h(d);
    for (std::size_t k = 0; k < d; ++k) h[k] = 1.0 / std::sqrt(static_cast<double>(k + 1));
    EnsembleSpec s{op, g, DriftSpec::zero(), GalerkinState(d), 1, 1};
    s.direction = h;
    const PathEnsemble ens(s);
    std::vector<ScalingPoint> pts;
    for (std::size_t j : {10, 20, 40, 80, 160, 320}) {
        const auto v = ens.variation(j);
        double s2 = 0.0;
        for (std::size_t k = 0; k < d; ++k) s2 += std::pow(op.power(k, 0.25) * v[k], 2);
        pts.push_back({g.node(j), std::sqrt(s2)});
    }
    EXPECT_NEAR(fit_scaling_exponent(pts).slope, -0.25, 0.1);
}

TEST(WeightedIntegral, ClosedFormAtFiveTwelveSteps) {
    const auto op = interval_op(8, 0.25);
    const TimeGrid g(0.0, 1.0, 512);
    GalerkinState h(8);
    for (std::size_t k = 0; k < 8; ++k) h[k] = 1.0 / (k + 1.0);
    EnsembleSpec s{op, g, DriftSpec::zero(), GalerkinState(8), 4, 1};
    s.direction = h;
    const PathEnsemble ens(s);
    for (double eps : {0.0, 0.25, 0.5}) {
        double exact = 0.0;
        for (std::size_t k = 0; k < 8; ++k) {
            const double lam = op.eigenvalue(k);
            exact += h[k] * h[k] * std::pow(lam, 2 * eps - 1) * (-std::expm1(-2 * lam)) / 2;
        }
        const auto I = weighted_derivative_integral(ens, eps);
        EXPECT_NEAR(I[0], exact, 0.01 * exact) << eps;
    }
    EXPECT_THROW(weighted_derivative_integral(ens, 0.6), std::invalid_argument);
}

TEST(WeightedIntegral, LongHorizonLimit) {
    const auto op = interval_op(3, 0.25);
    const TimeGrid g(0.0, 20.0, 20000);
    EnsembleSpec s{op, g, DriftSpec::zero(), GalerkinState(3), 1, 1};
    s.direction = GalerkinState({1.0, 1.0, 1.0});
    const PathEnsemble ens(s);
    double limit = 0.0;
    for (std::size_t k = 0; k < 3; ++k) limit += 1.0 / (2 * op.eigenvalue(k));
    EXPECT_NEAR(weighted_derivative_integral(ens, 0.0)[0], limit, 1e-3 * limit);
}

TEST(Controlled, ZeroControlIsBitwiseUncontrolled) {
    const auto op = interval_op(5);
    const TimeGrid g(0.0, 1.0, 32);
    const GalerkinState x0(5, 0.4);
    const auto a = simulate_forward(op, DriftSpec::cubic_truncated(2.0), x0, g, 100, 7);
    for (auto ch : {ControlChannel::identity, ControlChannel::fractional}) {
        const auto b = simulate_controlled(op, DriftSpec::cubic_truncated(2.0), ch, ControlPath::zero(32, 5), x0, g, 100, 7);
        for (std::size_t j = 0; j <= 32; ++j) {
            const auto xa = a.states(j), xb = b.states(j);
            for (std::size_t i = 0; i < xa.size(); ++i) ASSERT_EQ(xa[i], xb[i]);
        }
    }
    EXPECT_THROW(simulate_controlled(op, DriftSpec::zero(), ControlChannel::identity, ControlPath::zero(31, 5), x0, g, 10, 1),
                 std::invalid_argument);
}

TEST(Controlled, ConstantControlMeanShift) {
    const auto op = interval_op(3);
    const TimeGrid g(0.0, 0.7, 70);
    const std::vector<double> u{1.5, 0.0, 0.0};
    const auto a = simulate_forward(op, DriftSpec::zero(), GalerkinState(3), g, 50, 3);
    const auto b = simulate_controlled(op, DriftSpec::zero(), ControlChannel::identity, ControlPath::constant(70, u),
                                       GalerkinState(3), g, 50, 3);
    const double shift = -std::expm1(-0.7) * 1.5;
    for (std::size_t p = 0; p < 50; ++p) EXPECT_NEAR(b.state(p, 70)[0] - a.state(p, 70)[0], shift, 1e-12);
}

TEST(Controlled, LipschitzInControl) {
    const auto op = interval_op(6);
    const TimeGrid g(0.0, 1.0, 64);
    std::mt19937_64 gen(4);
    std::normal_distribution<double> n;
    for (int trial = 0; trial < 5; ++trial) {
        ControlPath u = ControlPath::zero(64, 6), v = ControlPath::zero(64, 6);
        for (auto& x : u.values) x = 2 * n(gen);
        for (auto& x : v.values) x = 2 * n(gen);
        double l2 = 0.0;
        for (std::size_t i = 0; i < u.values.size(); ++i) l2 += g.h() * std::pow(u.values[i] - v.values[i], 2);
        for (auto ch : {ControlChannel::identity, ControlChannel::fractional}) {
            const auto a = simulate_controlled(op, DriftSpec::cubic_truncated(2.0), ch, u, GalerkinState(6), g, 200, 9);
            const auto b = simulate_controlled(op, DriftSpec::cubic_truncated(2.0), ch, v, GalerkinState(6), g, 200, 9);
            for (std::size_t j = 0; j <= 64; ++j)
                for (std::size_t p = 0; p < 200; ++p) {
                    const auto xa = a.state(p, j), xb = b.state(p, j);
                    double d2 = 0.0;
                    for (std::size_t k = 0; k < 6; ++k) d2 += std::pow(xa[k] - xb[k], 2);
                    ASSERT_LE(d2, l2 * (1 + 1e-12));
                }
        }
    }
}

TEST(Controlled, ConvolutionSupNormBound) {
    const auto op = interval_op(12);
    const TimeGrid g(0.0, 1.0, 100);
    const auto grid = sup_norm_grid(op, 97);
    double c2 = 0.0;
    for (std::size_t k = 0; k < 12; ++k) c2 += 1.0 / (2 * op.eigenvalue(k));
    const double c = std::sqrt(2.0 / std::numbers::pi) * std::sqrt(c2);
    std::mt19937_64 gen(6);
    std::normal_distribution<double> n;
    const auto base = simulate_forward(op, DriftSpec::zero(), GalerkinState(12), g, 4, 1);
    for (int trial = 0; trial < 10; ++trial) {
        ControlPath u = ControlPath::zero(100, 12);
        for (auto& x : u.values) x = n(gen) * (trial + 1);
        double norm2 = 0.0;
        for (double x : u.values) norm2 += g.h() * x * x;
        for (auto ch : {ControlChannel::identity, ControlChannel::fractional}) {
            const auto ctl = simulate_controlled(op, DriftSpec::zero(), ch, u, GalerkinState(12), g, 4, 1);
            for (std::size_t j = 0; j <= 100; ++j) {
                std::vector<double> iu(12);
                for (std::size_t k = 0; k < 12; ++k) iu[k] = ctl.state(0, j)[k] - base.state(0, j)[k];
                EXPECT_LE(sup_norm(grid, iu), c * std::sqrt(norm2) * (1 + 1e-10));
            }
        }
    }
}
