#pragma once

// Controlled heat equation: cost functionals, Hamiltonian feedback, the
// fundamental relation, Yosida-smoothed controls and penalized values.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsdelab/bsde.hpp"
#include "bsdelab/forward.hpp"
#include "bsdelab/generators.hpp"
#include "bsdelab/stats.hpp"

namespace bsdelab {

enum class AdmissibleClass { U2, U2_alpha };

struct ControlProblem {
    SpectralOperator op;
    DriftSpec drift;
    RunningCost cost;
    TerminalCondition terminal;
    ControlChannel channel = ControlChannel::fractional;
    TimeGrid grid;
    GalerkinState x0;
    AdmissibleClass admissible = AdmissibleClass::U2;

    /// Q = (-A)^{-alpha}, H-cost.
    static ControlProblem structure(SpectralOperator op, DriftSpec drift, RunningCost cost, TerminalCondition phi,
                                    TimeGrid grid, GalerkinState x0) {
        ControlProblem p{std::move(op), std::move(drift), std::move(cost), std::move(phi), ControlChannel::fractional,
                         grid, std::move(x0), AdmissibleClass::U2};
        p.validate();
        return p;
    }
    /// Q = I, alpha-cost, controls in U2_alpha.
    static ControlProblem alpha(SpectralOperator op, DriftSpec drift, RunningCost cost, TerminalCondition phi,
                                TimeGrid grid, GalerkinState x0) {
        ControlProblem p{std::move(op), std::move(drift), std::move(cost), std::move(phi), ControlChannel::identity,
                         grid, std::move(x0), AdmissibleClass::U2_alpha};
        p.validate();
        return p;
    }
    /// Q = I, controls in U2; approached through the penalized problems.
    static ControlProblem general(SpectralOperator op, DriftSpec drift, RunningCost cost, TerminalCondition phi,
                                  TimeGrid grid, GalerkinState x0) {
        ControlProblem p{std::move(op), std::move(drift), std::move(cost), std::move(phi), ControlChannel::identity,
                         grid, std::move(x0), AdmissibleClass::U2};
        p.validate();
        return p;
    }

    void validate() const {
        check_dim(op, x0.dim(), "ControlProblem");
        if (!cost.ell) throw std::invalid_argument("ControlProblem: running cost missing");
        if (!terminal.phi) throw std::invalid_argument("ControlProblem: terminal condition missing");
        if (channel == ControlChannel::fractional && cost.mode != CostMode::h_cost)
            throw std::invalid_argument("ControlProblem: fractional channel pairs with an H-cost");
        if (admissible == AdmissibleClass::U2_alpha &&
            (channel != ControlChannel::identity || cost.mode != CostMode::alpha_cost))
            throw std::invalid_argument("ControlProblem: U2_alpha pairs the identity channel with an alpha-cost");
        if (channel == ControlChannel::fractional && admissible != AdmissibleClass::U2)
            throw std::invalid_argument("ControlProblem: structure case uses U2");
    }

    [[nodiscard]] HamiltonianRegime regime() const {
        if (channel == ControlChannel::fractional) return HamiltonianRegime::structure;
        if (admissible == AdmissibleClass::U2_alpha) return HamiltonianRegime::alpha;
        return HamiltonianRegime::penalized;
    }

    /// psi for the problem itself (penalized problems take n).
    [[nodiscard]] Driver hamiltonian(double n = 0.0) const {
        const auto r = regime();
        if (r == HamiltonianRegime::penalized) {
            if (n >= 1.0) return hamiltonian_driver(cost, op, r, n);
            // limit problem: inf l + <z, (-A)^alpha u>
            RunningCost c = cost;
            c.mode = CostMode::alpha_cost;
            return hamiltonian_driver(c, op, HamiltonianRegime::alpha);
        }
        return hamiltonian_driver(cost, op, r);
    }

    [[nodiscard]] EnsembleSpec ensemble(std::size_t n_paths, std::uint64_t seed, ControlPolicy policy = {},
                                        SimulationOptions options = {}) const {
        EnsembleSpec s{op, grid, drift, x0, n_paths, seed};
        s.channel = channel;
        s.control = std::move(policy);
        s.options = std::move(options);
        return s;
    }

    /// Pairing of Z with the control channel: <z, u> (structure) or <z, (-A)^alpha u>.
    [[nodiscard]] double pairing(std::span<const double> z, std::span<const double> u) const {
        if (channel == ControlChannel::fractional) return inner(z, u);
        double s = 0.0;
        for (std::size_t k = 0; k < z.size(); ++k) s += z[k] * op.power(k, op.alpha()) * u[k];
        return s;
    }
};

// ---------------------------------------------------------------------------

struct CostEvaluation {
    McSummary J;                   // E[int l + phi]
    McSummary J_penalized;         // J + (1/n) E int |(-A)^alpha u|^2 (equals J when n = 0)
    std::vector<double> samples;   // per path int l + phi
    std::vector<double> penalized; // per path with the penalty
    double running = 0.0;          // E int l
    double terminal = 0.0;         // E phi(X_T)
    double control_norm = 0.0;     // (E int |u|_H^2)^{1/2}
    double alpha_norm = 0.0;       // (E int |(-A)^alpha u|^2)^{1/2}
};

namespace detail {
struct PathTotals {
    std::vector<double> running, u2, ua2;
    void resize(std::size_t n) { running.assign(n, 0.0), u2.assign(n, 0.0), ua2.assign(n, 0.0); }
};

/// Observer adding the trapezoid running cost (u constant on each step) and control norms.
inline StepObserver cost_observer(const ControlProblem& pb, std::shared_ptr<PathTotals> tot,
                                  StepObserver chained = {}) {
    std::vector<double> la(pb.op.dim());
    for (std::size_t k = 0; k < la.size(); ++k) la[k] = pb.op.power(k, 2.0 * pb.op.alpha());
    const double h = pb.grid.h();
    const auto grid = pb.grid;
    const auto cost = pb.cost;
    return [=](std::size_t p, std::size_t j, std::span<const double> x, std::span<const double> u,
               std::span<const double> xn) {
        tot->running[p] += 0.5 * h * (cost(grid.node(j), x, u) + cost(grid.node(j + 1), xn, u));
        double a = 0.0, b = 0.0;
        for (std::size_t k = 0; k < u.size(); ++k) a += u[k] * u[k], b += la[k] * u[k] * u[k];
        tot->u2[p] += h * a;
        tot->ua2[p] += h * b;
        if (chained) chained(p, j, x, u, xn);
    };
}

inline CostEvaluation finish_cost(const ControlProblem& pb, const PathEnsemble& ens, const PathTotals& tot,
                                  double penalty_n, double level) {
    const std::size_t n = ens.n_paths(), d = ens.dim();
    const auto XN = ens.states(ens.steps());
    CostEvaluation c;
    c.samples.resize(n), c.penalized.resize(n);
    CompensatedSum run, term, u2, ua2;
    for (std::size_t p = 0; p < n; ++p) {
        const double f = pb.terminal({XN.data() + p * d, d});
        c.samples[p] = tot.running[p] + f;
        c.penalized[p] = c.samples[p] + (penalty_n > 0 ? tot.ua2[p] / penalty_n : 0.0);
        run.add(tot.running[p]), term.add(f), u2.add(tot.u2[p]), ua2.add(tot.ua2[p]);
    }
    const double nn = static_cast<double>(n);
    c.J = summarize(c.samples, level);
    c.J_penalized = summarize(c.penalized, level);
    c.running = run.value() / nn;
    c.terminal = term.value() / nn;
    c.control_norm = std::sqrt(u2.value() / nn);
    c.alpha_norm = std::sqrt(ua2.value() / nn);
    return c;
}
} // namespace detail

/// J(t0, x0, u) for a deterministic policy (open-loop path, recorded or feedback).
inline CostEvaluation evaluate_cost(const ControlProblem& pb, const ControlPolicy& policy, std::size_t n_paths,
                                    std::uint64_t seed, double level = 0.95) {
    auto tot = std::make_shared<detail::PathTotals>();
    tot->resize(n_paths);
    SimulationOptions opt;
    opt.observer = detail::cost_observer(pb, tot);
    const PathEnsemble ens(pb.ensemble(n_paths, seed, policy, opt));
    return detail::finish_cost(pb, ens, *tot, 0.0, level);
}

/// J_n: adds (1/n) int |(-A)^alpha u|^2.
inline CostEvaluation evaluate_penalized_cost(const ControlProblem& pb, double n, const ControlPolicy& policy,
                                              std::size_t n_paths, std::uint64_t seed, double level = 0.95) {
    if (!(n > 0.0)) throw std::invalid_argument("evaluate_penalized_cost: n must be positive");
    auto tot = std::make_shared<detail::PathTotals>();
    tot->resize(n_paths);
    SimulationOptions opt;
    opt.observer = detail::cost_observer(pb, tot);
    const PathEnsemble ens(pb.ensemble(n_paths, seed, policy, opt));
    return detail::finish_cost(pb, ens, *tot, n, level);
}

// ---------------------------------------------------------------------------

using ZProvider = std::function<void(double s, std::span<const double> x, std::span<double> z)>;

/// Frozen Markov regression of Z from a BSDE solve, evaluated at the nearest node.
inline ZProvider regression_z_provider(const BsdeSolution& sol) {
    auto sp = std::make_shared<const BsdeSolution>(sol);
    return [sp](double s, std::span<const double> x, std::span<double> z) { sp->z_clipped(sp->grid.nearest(s), x, z); };
}

struct FeedbackMap {
    std::function<void(double s, std::span<const double> x, std::span<const double> z, std::span<double> u)> selector;
    HamiltonianRegime regime = HamiltonianRegime::structure;
    double n = 0.0;
};

/// Argmin of the Hamiltonian as a feedback law.
inline FeedbackMap make_feedback(const ControlProblem& pb, double n = 0.0, HamiltonianOptions hopt = {}) {
    FeedbackMap f;
    f.regime = pb.regime();
    f.n = n;
    auto cost = std::make_shared<const RunningCost>(pb.cost);
    auto op = std::make_shared<const SpectralOperator>(pb.op);
    const auto regime = f.regime;
    if (regime == HamiltonianRegime::penalized && !(n >= 1.0))
        throw std::invalid_argument("make_feedback: penalized feedback needs n >= 1");
    f.selector = [=](double s, std::span<const double> x, std::span<const double> z, std::span<double> u) {
        HamiltonianResult r;
        switch (regime) {
        case HamiltonianRegime::structure: r = hamiltonian_structure(*cost, s, x, z, hopt); break;
        case HamiltonianRegime::alpha: r = hamiltonian_alpha(*cost, *op, s, x, z, hopt); break;
        case HamiltonianRegime::penalized: r = hamiltonian_penalized(*cost, *op, n, s, x, z, hopt); break;
        }
        std::copy(r.argmin.begin(), r.argmin.end(), u.begin());
    };
    return f;
}

/// max over samples of |selector|/(1 + |z|), norms in H (structure) or with (-A)^alpha.
inline double feedback_growth(const ControlProblem& pb, const FeedbackMap& fb, std::size_t samples, std::uint64_t seed,
                              double scale = 3.0) {
    const std::size_t d = pb.op.dim();
    NoiseStream rng(seed);
    std::vector<double> x(d), z(d), u(d);
    double worst = 0.0;
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t k = 0; k < d; ++k) {
            const auto q = rng.pair(s, static_cast<std::uint32_t>(k), 0, NoiseDomain::auxiliary);
            x[k] = scale * q[0];
            z[k] = scale * (1 + s % 7) * q[1];
        }
        fb.selector(pb.grid.t0, x, z, u);
        double nu = 0.0;
        for (std::size_t k = 0; k < d; ++k) {
            const double m = pb.channel == ControlChannel::fractional ? 1.0 : pb.op.power(k, pb.op.alpha());
            nu += m * m * u[k] * u[k];
        }
        worst = std::max(worst, std::sqrt(nu) / (1.0 + h_norm(z)));
    }
    return worst;
}

/// u_s = selector(s, X_s, z(s, X_s)); the provider must be pure.
inline ControlPolicy feedback_policy(const FeedbackMap& fb, const ZProvider& z, std::size_t dim) {
    return [fb, z, dim](std::size_t p, std::size_t j, double t, std::span<const double> x, std::span<double> u) {
        thread_local std::vector<double> zz;
        zz.resize(dim);
        try {
            z(t, x, zz);
            fb.selector(t, x, zz, u);
        } catch (const std::exception& e) {
            std::ostringstream os;
            os << "feedback: evaluation failed on path " << p << " at step " << j << ": " << e.what();
            throw std::runtime_error(os.str());
        }
        for (double v : u)
            if (!std::isfinite(v)) {
                std::ostringstream os;
                os << "feedback: non-finite control on path " << p << " at step " << j;
                throw std::runtime_error(os.str());
            }
    };
}

struct ClosedLoop {
    CostEvaluation cost;
    RecordedControl control;
    std::shared_ptr<const PathEnsemble> ensemble;
};

inline ClosedLoop synthesize_feedback(const ControlProblem& pb, const FeedbackMap& fb, const ZProvider& z,
                                      std::size_t n_paths, std::uint64_t seed, double penalty_n = 0.0,
                                      double level = 0.95) {
    const std::size_t d = pb.op.dim(), N = pb.grid.steps;
    auto tot = std::make_shared<detail::PathTotals>();
    tot->resize(n_paths);
    auto rec = std::make_shared<RecordedControl>(n_paths, N, d);
    SimulationOptions opt;
    opt.observer = detail::cost_observer(pb, tot, [rec](std::size_t p, std::size_t j, std::span<const double>,
                                                        std::span<const double> u, std::span<const double>) {
        std::copy(u.begin(), u.end(), rec->at(p, j).begin());
    });
    ClosedLoop c;
    auto ens = std::make_shared<const PathEnsemble>(pb.ensemble(n_paths, seed, feedback_policy(fb, z, d), opt));
    c.cost = detail::finish_cost(pb, *ens, *tot, penalty_n, level);
    c.control = std::move(*rec);
    c.ensemble = std::move(ens);
    return c;
}

// ---------------------------------------------------------------------------

struct RelationGap {
    double gap = 0.0;           // v - J - E int (psi - l - <Z, Qu>)
    double se = 0.0;
    double integrand = 0.0;     // E int (psi - l - <Z, Qu>) ds, <= 0
    double integrand_se = 0.0;
    double integrand_max = 0.0; // max over paths and left nodes of |psi - l - <Z, Qu>|
    double integrand_sup = 0.0; // max over paths and nodes of psi - l - <Z, Qu> (should be <= 0)
    McSummary J;
    [[nodiscard]] double z_score() const { return se > 0 ? gap / se : (gap == 0 ? 0.0 : INFINITY); }
};

/// Fundamental relation along the controlled dynamics with v(t0, x0) = v (standard error v_se).
inline RelationGap fundamental_relation_gap(const ControlProblem& pb, const ControlPolicy& policy, double v, double v_se,
                                            const ZProvider& z, std::size_t n_paths, std::uint64_t seed,
                                            double penalty_n = 0.0) {
    const std::size_t d = pb.op.dim();
    const Driver psi = pb.hamiltonian(penalty_n);
    const double h = pb.grid.h();
    auto tot = std::make_shared<detail::PathTotals>();
    tot->resize(n_paths);
    auto integ = std::make_shared<std::vector<double>>(n_paths, 0.0);
    auto mx = std::make_shared<double>(0.0);
    auto sup = std::make_shared<double>(-INFINITY);
    // penalized regimes carry the penalty inside the running cost
    std::vector<double> pen(d, 0.0);
    if (penalty_n >= 1.0)
        for (std::size_t k = 0; k < d; ++k) pen[k] = pb.op.power(k, 2.0 * pb.op.alpha()) / penalty_n;
    const auto grid = pb.grid;
    const ControlProblem* pp = &pb;
    auto integrand = [=](double t, std::span<const double> x, std::span<const double> u) {
        thread_local std::vector<double> zz;
        zz.resize(d);
        z(t, x, zz);
        double l = pp->cost(t, x, u);
        for (std::size_t k = 0; k < d; ++k) l += pen[k] * u[k] * u[k];
        return psi(t, x, 0.0, zz) - l - pp->pairing(zz, u);
    };
    SimulationOptions opt;
    opt.observer = detail::cost_observer(pb, tot, [=](std::size_t p, std::size_t j, std::span<const double> x,
                                                      std::span<const double> u, std::span<const double> xn) {
        const double a = integrand(grid.node(j), x, u), b = integrand(grid.node(j + 1), xn, u);
        (*integ)[p] += 0.5 * h * (a + b);
        // the control is selected at the left node
        *mx = std::max(*mx, std::abs(a));
        *sup = std::max({*sup, a, b});
    });
    const PathEnsemble ens(pb.ensemble(n_paths, seed, policy, opt));
    const auto c = detail::finish_cost(pb, ens, *tot, penalty_n, 0.95);
    std::vector<double> g(n_paths);
    const auto& base = penalty_n >= 1.0 ? c.penalized : c.samples;
    for (std::size_t p = 0; p < n_paths; ++p) g[p] = base[p] + (*integ)[p];
    const auto m = summarize(g);
    const auto im = summarize(*integ);
    RelationGap r;
    r.gap = v - m.mean;
    r.se = combined_se(m.se, v_se);
    r.integrand = im.mean;
    r.integrand_se = im.se;
    r.integrand_max = *mx;
    r.integrand_sup = *sup;
    r.J = penalty_n >= 1.0 ? c.J_penalized : c.J;
    return r;
}

// ---------------------------------------------------------------------------
// Yosida approximation: mode j scaled by k/(k + lambda_j).

inline double yosida_factor(double lambda, double k) { return k / (k + lambda); }

inline RecordedControl yosida_approximate(const SpectralOperator& op, const RecordedControl& u, double k) {
    if (!(k > 0.0)) throw std::invalid_argument("yosida_approximate: k must be positive");
    check_dim(op, u.dim, "yosida_approximate");
    RecordedControl r = u;
    for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] *= yosida_factor(op.eigenvalue(i % u.dim), k);
    return r;
}

inline ControlPath yosida_approximate(const SpectralOperator& op, const ControlPath& u, double k) {
    if (!(k > 0.0)) throw std::invalid_argument("yosida_approximate: k must be positive");
    check_dim(op, u.dim, "yosida_approximate");
    ControlPath r = u;
    for (std::size_t i = 0; i < r.values.size(); ++i) r.values[i] *= yosida_factor(op.eigenvalue(i % u.dim), k);
    return r;
}

/// sup_{mu > 0} mu^delta / (1 + mu).
inline double yosida_constant(double delta) {
    if (!(delta >= 0.0 && delta < 1.0)) throw std::invalid_argument("yosida_constant: delta must lie in [0, 1)");
    if (delta == 0.0) return 1.0;
    return std::pow(delta, delta) * std::pow(1.0 - delta, 1.0 - delta);
}

struct YosidaBoundReport {
    double max_factor = 0.0;   // sup k/(k+lambda), must be <= 1
    double max_weighted = 0.0; // sup lambda^delta k/(k+lambda) / (c_delta k^delta), must be <= 1
    std::size_t checked = 0;
    std::size_t violations = 0;
};

inline YosidaBoundReport yosida_bound_check(std::span<const double> lambdas, std::span<const double> ks, double delta) {
    YosidaBoundReport r;
    const double c = yosida_constant(delta);
    for (double k : ks) {
        for (double l : lambdas) {
            if (!(l > 0.0)) throw std::invalid_argument("yosida_bound_check: eigenvalues must be positive");
            const double f = yosida_factor(l, k);
            const double w = std::pow(l, delta) * f / (c * std::pow(k, delta));
            r.max_factor = std::max(r.max_factor, f);
            r.max_weighted = std::max(r.max_weighted, w);
            r.violations += (f > 1.0) + (w > 1.0 + 1e-12);
            ++r.checked;
        }
    }
    return r;
}

struct CostApproximationRow {
    double k = 0.0;
    McSummary J_k;       // J_k(u_{eps,k})
    McSummary deviation; // paired J_k(u_{eps,k}) - J(u_eps)
};

struct CostApproximation {
    McSummary J; // J(u_eps)
    std::vector<CostApproximationRow> rows;
    /// |deviation| nonincreasing along k up to `sigmas` paired standard errors.
    [[nodiscard]] bool monotone(double sigmas = 3.0) const {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const double a = std::abs(rows[i - 1].deviation.mean), b = std::abs(rows[i].deviation.mean);
            if (b > a + sigmas * combined_se(rows[i - 1].deviation.se, rows[i].deviation.se)) return false;
        }
        return true;
    }
};

/// J_k(Yosida_k(u_eps)) against J(u_eps) on common noise; u_eps replayed open-loop.
inline CostApproximation cost_approximation_check(const ControlProblem& pb, const RecordedControl& u_eps,
                                                  const std::vector<double>& ks, std::uint64_t seed) {
    CostApproximation out;
    const auto base = evaluate_cost(pb, u_eps.policy(), u_eps.n_paths, seed);
    out.J = base.J;
    for (double k : ks) {
        const auto uk = yosida_approximate(pb.op, u_eps, k);
        const auto ck = evaluate_penalized_cost(pb, k, uk.policy(), uk.n_paths, seed);
        out.rows.push_back({k, ck.J_penalized, paired_difference(ck.penalized, base.samples)});
    }
    return out;
}

// ---------------------------------------------------------------------------

struct ValueSequenceOptions {
    std::size_t n_paths = 20000;
    std::size_t closed_loop_paths = 20000;
    std::uint64_t seed = 1;
    std::uint64_t closed_loop_seed = 2;
    BsdeOptions bsde;
};

struct ValueSequenceRow {
    double n = 0.0;
    McSummary V_n;          // v_n(t0, x0) from the penalized BSDE
    McSummary J;            // closed-loop J(ubar^n)
    McSummary J_n;          // closed-loop J_n(ubar^n)
    double control_norm = 0.0; // |ubar^n|_{U2}
    double reference = NAN;    // exponential-transform value when psi_n is isotropic quadratic
    std::vector<double> samples; // per-path terminal values of the BSDE (for paired comparisons)
};

struct ValueSequence {
    std::vector<ValueSequenceRow> rows;
    double reference = NAN; // limit value V when available
    McSummary reference_summary;
    /// d log|u^n| / d log n between the two largest n.
    [[nodiscard]] double control_norm_tail_slope() const {
        if (rows.size() < 2) throw std::logic_error("ValueSequence: need two rows for a trend");
        const auto& a = rows[rows.size() - 2];
        const auto& b = rows.back();
        return std::log(b.control_norm / a.control_norm) / std::log(b.n / a.n);
    }
    /// V_n nonincreasing along n up to `sigmas` paired standard errors.
    [[nodiscard]] bool nonincreasing(double sigmas = 3.0) const {
        for (std::size_t i = 1; i < rows.size(); ++i) {
            const auto d = paired_difference(rows[i].samples, rows[i - 1].samples);
            if (d.mean > sigmas * d.se + 1e-12) return false;
        }
        return true;
    }
};

/// Penalized problems n: BSDE with driver psi_n on one ensemble (common noise),
/// feedback from its frozen Z regression, closed loop on a fresh seed.
inline ValueSequence approximate_value_sequence(const ControlProblem& pb, const std::vector<double>& ns,
                                                const ValueSequenceOptions& opt = {}) {
    if (pb.regime() != HamiltonianRegime::penalized)
        throw std::invalid_argument("approximate_value_sequence: needs the identity channel with U2 controls");
    const PathEnsemble ens(pb.ensemble(opt.n_paths, opt.seed));
    ValueSequence out;
    {
        const Driver lim = pb.hamiltonian();
        if (std::isfinite(lim.quadratic_gamma)) {
            const auto ch = cole_hopf_value(ens, lim.quadratic_gamma, pb.terminal);
            out.reference = ch.value;
            out.reference_summary = {ch.value, ch.se, ch.n, 0.95};
        }
    }
    for (double n : ns) {
        const Driver psi = pb.hamiltonian(n);
        const auto sol = solve_bsde_lsmc(ens, psi, pb.terminal, opt.bsde);
        ValueSequenceRow row;
        row.n = n;
        row.V_n = sol.value;
        row.samples = sol.value_samples;
        if (std::isfinite(psi.quadratic_gamma)) row.reference = cole_hopf_value(ens, psi.quadratic_gamma, pb.terminal).value;
        const auto cl = synthesize_feedback(pb, make_feedback(pb, n), regression_z_provider(sol), opt.closed_loop_paths,
                                            opt.closed_loop_seed, n);
        row.J = cl.cost.J;
        row.J_n = cl.cost.J_penalized;
        row.control_norm = cl.cost.control_norm;
        out.rows.push_back(std::move(row));
    }
    return out;
}

/// Sup-distance between two controlled paths against int |Q(u1 - u2)| ds, per path.
struct ControlStabilityReport {
    double worst_ratio = 0.0;
    std::size_t violations = 0;
    std::size_t paths = 0;
};

inline ControlStabilityReport control_stability(const ControlProblem& pb, const ControlPolicy& u1, const ControlPolicy& u2,
                                                std::size_t n_paths, std::uint64_t seed) {
    const std::size_t d = pb.op.dim(), N = pb.grid.steps;
    const double h = pb.grid.h();
    auto rec = [&](const ControlPolicy& u, RecordedControl& out) {
        SimulationOptions o;
        auto r = std::make_shared<RecordedControl>(n_paths, N, d);
        o.observer = [r](std::size_t p, std::size_t j, std::span<const double>, std::span<const double> uu,
                         std::span<const double>) { std::copy(uu.begin(), uu.end(), r->at(p, j).begin()); };
        auto e = std::make_shared<PathEnsemble>(pb.ensemble(n_paths, seed, u, o));
        out = std::move(*r);
        return e;
    };
    RecordedControl r1, r2;
    const auto e1 = rec(u1, r1);
    const auto e2 = rec(u2, r2);
    std::vector<double> q(d);
    for (std::size_t k = 0; k < d; ++k)
        q[k] = pb.channel == ControlChannel::fractional ? pb.op.power(k, -pb.op.alpha()) : 1.0;
    ControlStabilityReport rep;
    rep.paths = n_paths;
    std::vector<double> bound(n_paths, 0.0), dist(n_paths, 0.0);
    for (std::size_t j = 0; j <= N; ++j) {
        const auto X1 = e1->states(j);
        const auto X2 = e2->states(j);
        for (std::size_t p = 0; p < n_paths; ++p) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) s += (X1[p * d + k] - X2[p * d + k]) * (X1[p * d + k] - X2[p * d + k]);
            dist[p] = std::sqrt(s);
            if (dist[p] > bound[p] * (1 + 1e-10) + 1e-13) ++rep.violations;
            if (bound[p] > 0) rep.worst_ratio = std::max(rep.worst_ratio, dist[p] / bound[p]);
            if (j < N) {
                double b = 0.0;
                const auto a1 = r1.at(p, j), a2 = r2.at(p, j);
                for (std::size_t k = 0; k < d; ++k) b += q[k] * q[k] * (a1[k] - a2[k]) * (a1[k] - a2[k]);
                bound[p] += h * std::sqrt(b);
            }
        }
    }
    return rep;
}

} // namespace bsdelab
