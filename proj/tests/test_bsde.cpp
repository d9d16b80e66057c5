#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "bsdelab/bsde.hpp"
#include "oracles.hpp"

using namespace bsdelab;

namespace {
const double kAlpha = 0.25;

SpectralOperator op4() { return build_operator(Geometry::interval(), 4, kAlpha); }

std::vector<double> e0(std::size_t d) {
    std::vector<double> w(d, 0.0);
    w[0] = 1.0;
    return w;
}
} // namespace

TEST(RegressionBasis, FeatureCounts) {
    std::vector<double> X;
    for (int p = 0; p < 100; ++p)
        for (int k = 0; k < 5; ++k) X.push_back(std::sin(p * 1.3 + k * 0.7) + 0.01 * p * k);
    EXPECT_EQ(FeatureMap(RegressionBasis::polynomial(2), X, 100, 5).size(), 21u);
    EXPECT_EQ(FeatureMap(RegressionBasis::polynomial(3, 2), X, 100, 5).size(), 10u + 3u);
    EXPECT_EQ(FeatureMap(RegressionBasis::modewise(3), X, 100, 5).size(), 16u);
    EXPECT_EQ(FeatureMap(RegressionBasis::radial(7), X, 100, 5).size(), 13u);
    // A constant column is dropped.
    for (int p = 0; p < 100; ++p) X[p * 5 + 2] = 3.0;
    EXPECT_EQ(FeatureMap(RegressionBasis::polynomial(1), X, 100, 5).size(), 5u);
    EXPECT_THROW(check_overfit(10, 100), std::invalid_argument);
    EXPECT_NO_THROW(check_overfit(9, 100));
}

TEST(RegressionBasis, RidgeEscalatesOnCollinearDesign) {
    Eigen::MatrixXd Phi(50, 3);
    for (int i = 0; i < 50; ++i) Phi(i, 0) = 1.0, Phi(i, 1) = i, Phi(i, 2) = 2.0 * i;
    std::vector<std::string> warnings;
    const SliceSolver s(Phi, 0.0, &warnings);
    EXPECT_GE(s.escalations(), 1);
    EXPECT_FALSE(warnings.empty());
    Eigen::VectorXd y(50);
    for (int i = 0; i < 50; ++i) y[i] = 1.0 + 5.0 * i;
    const Eigen::VectorXd fit = Phi * s.solve(y);
    EXPECT_LT((fit - y).cwiseAbs().maxCoeff(), 1e-4);
}

TEST(Lsmc, LinearTerminalZeroDriver) {
    const auto op = op4();
    const TimeGrid grid(0.0, 1.0, 16);
    GalerkinState x0(std::vector<double>{0.5, -0.2, 0.1, 0.0});
    const auto ens = simulate_forward(op, DriftSpec::zero(), x0, grid, 20000, 3);
    const auto sol = solve_bsde_lsmc(ens, Driver::zero(), TerminalCondition::linear(e0(4)),
                                     {.basis = RegressionBasis::polynomial(1)});
    const double l1 = op.eigenvalue(0);
    EXPECT_NEAR(sol.value.mean, std::exp(-l1) * 0.5, 4 * sol.value.se);
    for (std::size_t j : {4u, 8u, 12u, 15u}) {
        const double decay = std::exp(-l1 * (1.0 - grid.node(j)));
        for (std::size_t p = 0; p < 20; ++p) {
            const auto x = ens.state(p, j);
            EXPECT_NEAR(sol.y(j, x), decay * x[0], 0.04);
        }
        // One-step increment regression: lambda^{-alpha} e^{-lambda(T - t_{j+1})} (1 - e^{-lambda h}) / (lambda h).
        const double h = grid.h();
        const double zexact = std::pow(l1, -kAlpha) * std::exp(-l1 * (1.0 - grid.node(j + 1))) * (1 - std::exp(-l1 * h)) / (l1 * h);
        EXPECT_NEAR(sol.z_mean[j][0], zexact, 0.03);
        EXPECT_NEAR(sol.z_mean[j][0], std::pow(l1, -kAlpha) * decay, 0.03 + l1 * h);
        EXPECT_NEAR(sol.z_mean[j][1], 0.0, 0.03);
    }
    // Terminal consistency is exact.
    for (std::size_t p = 0; p < 50; ++p) EXPECT_EQ(sol.y(16, ens.state(p, 16)), ens.state(p, 16)[0]);
}

TEST(Lsmc, ConstantDriverShiftsValue) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 8);
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(std::vector<double>{0.3, 0, 0, 0}), grid, 5000, 4);
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, e0(4));
    const auto a = solve_bsde_lsmc(ens, Driver::zero(), phi);
    const auto b = solve_bsde_lsmc(ens, Driver::constant(0.7), phi);
    EXPECT_NEAR(b.value.mean - a.value.mean, 0.7 * 0.5, 1e-10);
    std::vector<double> za(4), zb(4);
    a.z(3, ens.state(1, 3), za);
    b.z(3, ens.state(1, 3), zb);
    for (std::size_t k = 0; k < 4; ++k) EXPECT_NEAR(za[k], zb[k], 1e-6);
}

TEST(Lsmc, QuadraticDriverMatchesColeHopf) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 16);
    const std::vector<double> w{1.0, 0.5, 0.0, 0.0};
    const std::vector<double> x0{0.4, -0.3, 0.0, 0.0};
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, w);
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(x0), grid, 40000, 5);
    const auto sol = solve_bsde_lsmc(ens, Driver::quadratic(1.0), phi, {.basis = RegressionBasis::polynomial(4, 2)});
    const double exact = oracle::log_cosine_value(op, kAlpha, 1.0, 0.5, w, 0.0, x0, 0.5);
    const auto ch = cole_hopf_value(ens, 1.0, phi);
    EXPECT_NEAR(ch.value, exact, 4 * ch.se);
    EXPECT_NEAR(sol.value.mean, exact, std::max(4 * sol.value.se, 0.01 * std::abs(exact)));
    EXPECT_EQ(sol.bound_violations, 0u);
    EXPECT_EQ(sol.clipped, 0u);
}

TEST(Lsmc, PicardAgreesWithMultiStep) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 8);
    const std::vector<double> w{1.0, 0.5, 0.0, 0.0};
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, w);
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(std::vector<double>{0.4, 0, 0, 0}), grid, 10000, 6);
    const auto ms = solve_bsde_lsmc(ens, Driver::quadratic(1.0), phi, {.basis = RegressionBasis::polynomial(3)});
    const auto pc = solve_bsde_lsmc(ens, Driver::quadratic(1.0), phi,
                                    {.basis = RegressionBasis::polynomial(3), .scheme = BsdeScheme::picard});
    EXPECT_EQ(pc.picard_values.size(), 9u);
    EXPECT_NEAR(pc.value.mean, ms.value.mean, 2e-3);
    EXPECT_NEAR(pc.picard_values[8], pc.picard_values[7], 1e-4);
    const auto os = solve_bsde_lsmc(ens, Driver::quadratic(1.0), phi,
                                    {.basis = RegressionBasis::polynomial(3), .scheme = BsdeScheme::one_step});
    EXPECT_NEAR(os.value.mean, ms.value.mean, 5e-3);
}

TEST(Lsmc, LipschitzBoundHolds) {
    const auto op = op4();
    const TimeGrid grid(0.0, 1.0, 10);
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(4), grid, 4000, 7);
    const auto phi = TerminalCondition::tanh_ridge(point_evaluation(op, 1.0), 0.3);
    const auto sol = solve_bsde_lsmc(ens, Driver::affine(0.5, {0.3, 0.1, 0, 0}, 0.2), phi);
    EXPECT_EQ(sol.bound_violations, 0u);
    EXPECT_TRUE(std::isfinite(sol.bound));
}

TEST(Lsmc, ReplayIsBitwise) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 8);
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, e0(4));
    auto run = [&] {
        const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(4), grid, 3000, 8);
        return solve_bsde_lsmc(ens, Driver::quadratic(1.0), phi).value.mean;
    };
    EXPECT_EQ(run(), run());
}

TEST(Lsmc, ExplosionAborts) {
    const auto op = op4();
    const TimeGrid grid(0.0, 1.0, 4);
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(4), grid, 1000, 9);
    // Declares zero constants while growing linearly in y.
    Driver d = Driver::constant(0.0);
    d.psi = [](double, std::span<const double>, double y, std::span<const double>) { return 1e3 * (1.0 + std::abs(y)); };
    EXPECT_THROW(solve_bsde_lsmc(ens, d, TerminalCondition::constant(0.0)), std::runtime_error);
    EXPECT_THROW(solve_bsde_lsmc(ens, Driver::zero(), TerminalCondition::constant(0.0),
                                 {.basis = RegressionBasis::polynomial(6)}),
                 std::invalid_argument);
}

TEST(ColeHopf, Examples) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 8);
    const std::vector<double> x0{0.3, 0.0, 0.2, 0.0};
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(x0), grid, 50000, 10);
    for (double g : {-2.0, 0.5, 3.0}) EXPECT_NEAR(cole_hopf_value(ens, g, TerminalCondition::constant(0.8)).value, 0.8, 1e-14);
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, {1.0, 0.5, 0, 0});
    double mean = 0.0;
    const auto XN = ens.states(8);
    for (std::size_t p = 0; p < 50000; ++p) mean += phi(XN.subspan(p * 4, 4));
    mean /= 50000;
    EXPECT_NEAR(cole_hopf_value(ens, 1e-7, phi).value, mean, 1e-6);
    const auto lin = TerminalCondition::linear(e0(4));
    const double l1 = op.eigenvalue(0);
    for (double g : {0.5, 1.0}) {
        const auto r = cole_hopf_value(ens, g, lin);
        const double exact = std::exp(-l1 * 0.5) * 0.3 + 0.5 * g * oracle::ou_var(l1, kAlpha, 0.5);
        EXPECT_NEAR(r.value, exact, 4 * r.se);
    }
    EXPECT_THROW(cole_hopf_value(ens, 0.0, phi), std::invalid_argument);
    EXPECT_THROW(cole_hopf_value(ens, 1.0, phi, 3), std::invalid_argument);
}

TEST(Variational, LinearTerminal) {
    const auto op = op4();
    const TimeGrid grid(0.0, 1.0, 16);
    const auto base = simulate_forward(op, DriftSpec::zero(), GalerkinState(4), grid, 5000, 11);
    const auto ens = simulate_first_variation(base, DriftSpec::zero(), GalerkinState::unit(4, 0));
    const auto sol = solve_bsde_lsmc(ens, Driver::zero(), TerminalCondition::linear(e0(4)));
    const auto var = solve_variational_bsde(sol, ens);
    const double l1 = op.eigenvalue(0);
    // Along the flow from t0: grad_x v(s, X_s) grad X_s h = e^{-l(T-s)} e^{-l s}.
    for (std::size_t j : {0u, 5u, 10u, 16u}) EXPECT_NEAR(var.grad_y[j].mean, std::exp(-l1), 1e-7);
    EXPECT_NEAR(var.value.mean, std::exp(-l1 * (1.0 - grid.t0)), 1e-7);
    const auto zero_dir = simulate_first_variation(base, DriftSpec::zero(), GalerkinState(4));
    const auto v0 = solve_variational_bsde(sol, zero_dir);
    EXPECT_EQ(v0.value.mean, 0.0);
    EXPECT_EQ(v0.mean_energy().mean, 0.0);
}

TEST(Variational, EnergyQuadraticInDirection) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 8);
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, {1.0, 0.5, 0, 0});
    const auto base = simulate_forward(op, DriftSpec::cubic_truncated(2.0), GalerkinState(4), grid, 8000, 12);
    const auto sol = solve_bsde_lsmc(base, Driver::quadratic(1.0), phi, {.basis = RegressionBasis::polynomial(3)});
    std::vector<double> ratio;
    for (double s : {0.5, 1.0, 2.0}) {
        const auto h = GalerkinState(std::vector<double>{s, 0.5 * s, 0, 0});
        const auto ens = simulate_first_variation(base, DriftSpec::cubic_truncated(2.0), h);
        const auto v = solve_variational_bsde(sol, ens, {.basis = RegressionBasis::polynomial(2)});
        ratio.push_back(v.mean_energy().mean / inner(h, h));
    }
    EXPECT_NEAR(ratio[0], ratio[1], 1e-6 * ratio[1]);
    EXPECT_NEAR(ratio[2], ratio[1], 1e-6 * ratio[1]);
}

TEST(ZIdentification, LinearOracle) {
    const auto op = op4();
    const TimeGrid grid(0.0, 0.5, 16);
    EnsembleSpec spec{op, grid, DriftSpec::zero(), GalerkinState(4), 20000, 13};
    const PathEnsemble ens(spec);
    const auto phi = TerminalCondition::linear(e0(4));
    const auto sol = solve_bsde_lsmc(ens, Driver::zero(), phi, {.basis = RegressionBasis::polynomial(1)});
    const auto h = GalerkinState::unit(4, 0);
    const auto rep = check_z_identification(sol, spec, h, 0.1, lsmc_value(Driver::zero(), phi, {.basis = RegressionBasis::polynomial(1)}));
    const double exact = std::pow(op.eigenvalue(0), -kAlpha) * std::exp(-op.eigenvalue(0) * 0.5);
    EXPECT_NEAR(rep.fd_side, exact, 1e-9);
    EXPECT_LT(std::abs(rep.z_side - exact), 3 * rep.z_se + 0.02 * exact);
    const auto c = TerminalCondition::constant(1.0);
    const auto solc = solve_bsde_lsmc(ens, Driver::zero(), c);
    const auto repc = check_z_identification(solc, spec, h, 0.1, lsmc_value(Driver::zero(), c));
    EXPECT_EQ(repc.fd_side, 0.0);
    EXPECT_NEAR(repc.z_side, 0.0, 1e-8);
}

TEST(Stability, MollifiedSolutionsApproachReference) {
    const std::size_t dim = 8;
    const auto op = build_operator(Geometry::interval(), dim, kAlpha);
    const TimeGrid grid(0.0, 0.25, 8);
    std::vector<double> w(dim, 0.0);
    w[0] = 1.0, w[1] = 0.5, w[3] = 0.3, w[6] = 0.2;
    const auto phi = TerminalCondition::log_cosine(1.0, 0.5, w);
    const auto ens = simulate_forward(op, DriftSpec::zero(), GalerkinState(dim), grid, 3000, 14);
    const auto rows = bsde_stability_sweep(ens, Driver::quadratic(1.0), phi, {2, 4, 8},
                                           {.basis = RegressionBasis::polynomial(1)}, {.tensor_max_points = 512, .qmc_pairs = 64});
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_GT(rows[0].sup_y, rows[1].sup_y);
    EXPECT_GT(rows[1].sup_y, rows[2].sup_y);
    EXPECT_GT(rows[0].l2_z, rows[2].l2_z);
}
