#pragma once

// Config-driven experiment runs: each subcommand produces CSV tables, a JSON
// summary and a list of pass/fail checks.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "bsdelab/bismut.hpp"
#include "bsdelab/bsde.hpp"
#include "bsdelab/config.hpp"
#include "bsdelab/control.hpp"
#include "bsdelab/forward.hpp"
#include "bsdelab/io.hpp"

namespace bsdelab {

struct CheckResult {
    std::string name;
    bool passed = false;
    double value = 0.0;
    double tolerance = 0.0;
    std::string detail;
};

struct ExperimentReport {
    std::string subcommand;
    std::vector<CheckResult> checks;
    std::map<std::string, CsvTable> tables;
    Json summary = Json::object();
    [[nodiscard]] bool passed() const {
        for (const auto& c : checks)
            if (!c.passed) return false;
        return true;
    }
};

inline const std::vector<std::string>& experiment_subcommands() {
    static const std::vector<std::string> s{"simulate", "bsde", "bismut", "control", "scaling", "all"};
    return s;
}

namespace detail {

inline CheckResult check_le(std::string name, double value, double tolerance, std::string detail = {}) {
    return {std::move(name), std::isfinite(value) && value <= tolerance, value, tolerance, std::move(detail)};
}

inline std::vector<std::size_t> dyadic_nodes(std::size_t steps, std::size_t first = 1) {
    std::vector<std::size_t> v;
    for (std::size_t j = first; j <= steps; j *= 2) v.push_back(j);
    return v;
}

inline Json fit_json(const ScalingFit& f) {
    return Json{{"slope", f.slope}, {"slope_se", f.slope_se}, {"intercept", f.intercept}, {"r_squared", f.r_squared},
                {"curvature_trimmed", f.curvature_trimmed}};
}

inline void run_simulate(const Config& c, ExperimentReport& r) {
    const auto spec = make_ensemble_spec(c);
    const PathEnsemble ens(spec);
    const std::size_t d = ens.dim(), N = ens.steps();
    const double T = ens.grid().T - ens.grid().t0;
    const bool ou = spec.drift.kind == DriftKind::zero;
    CsvTable t({"mode", "lambda", "mean", "mean_se", "mean_exact", "var", "var_se", "var_exact"});
    double worst = 0.0;
    const auto X = ens.states(N);
    for (std::size_t k = 0; k < d; ++k) {
        std::vector<double> xs(ens.n_paths()), sq(ens.n_paths());
        for (std::size_t p = 0; p < xs.size(); ++p) xs[p] = X[p * d + k];
        const auto m = summarize(xs);
        for (std::size_t p = 0; p < sq.size(); ++p) sq[p] = (X[p * d + k] - m.mean) * (X[p * d + k] - m.mean);
        const auto v = summarize(sq);
        const double lam = ens.op().eigenvalue(k);
        const double me = ou ? std::exp(-lam * T) * spec.x0[k] : NAN;
        const double ve = ou ? ou_variance(ens.op(), k, ens.noise_alpha(), T) : NAN;
        t.add({static_cast<long long>(k), lam, m.mean, m.se, me, v.mean, v.se, ve});
        if (ou) worst = std::max({worst, std::abs(m.mean - me) / m.se, std::abs(v.mean - ve) / v.se});
    }
    r.tables["moments"] = std::move(t);
    if (ou) r.checks.push_back(check_le("ou_moments_z", worst, 3.0, "max |z| over modes, mean and variance"));

    auto vspec = make_ensemble_spec(c, true);
    vspec.n_paths = std::min<std::size_t>(spec.n_paths, c.count("run", "scan_paths", 10000));
    const auto vs = sup_h_norm(PathEnsemble(vspec), true);
    const double hn = h_norm(vspec.direction->coords());
    std::size_t viol = 0;
    for (double s : vs) viol += s > hn * (1.0 + 1e-12);
    r.checks.push_back(check_le("variation_contraction", static_cast<double>(viol), 0.0, "paths with sup|grad X h| > |h|"));
    r.summary["sup_variation"] = summary_json(summarize(vs));

    if (const auto n = c.count("run", "export_paths", 0)) {
        r.summary["export_paths"] = n;
        r.summary["_export"] = true;
    }
}

inline void run_bsde(const Config& c, ExperimentReport& r, const std::filesystem::path& out) {
    const auto spec = make_ensemble_spec(c);
    const PathEnsemble ens(spec);
    const auto drv = make_driver(c, spec.op);
    const auto phi = make_terminal(c, spec.op.dim());
    const auto sol = solve_bsde_lsmc(ens, drv, phi, make_bsde_options(c));
    CsvTable t({"node", "t", "y_mean", "z_rms", "z_sup"});
    for (std::size_t j = 0; j < sol.y_mean.size(); ++j)
        t.add({static_cast<long long>(j), ens.grid().node(j), sol.y_mean[j], j < sol.z_rms.size() ? sol.z_rms[j] : NAN,
               j < sol.z_sup.size() ? sol.z_sup[j] : NAN});
    r.tables["profile"] = std::move(t);
    r.summary["value"] = summary_json(sol.value);
    r.summary["clip"] = sol.z_clip;
    r.summary["clipped"] = sol.clipped;
    r.summary["bound_violations"] = sol.bound_violations;
    r.summary["warnings"] = sol.warnings;
    if (std::isfinite(drv.quadratic_gamma) && drv.quadratic_gamma != 0.0) {
        const auto ch = cole_hopf_value(ens, drv.quadratic_gamma, phi);
        const auto d = paired_difference(sol.value_samples, ch.influence);
        // the influence samples are centred; the paired SE is that of Y - CH
        const double se = d.se;
        const double gap = std::abs(sol.value.mean - ch.value);
        r.summary["cole_hopf"] = Json{{"value", ch.value}, {"se", ch.se}};
        r.checks.push_back(check_le("cole_hopf_gap", gap, std::max(3.0 * se, 0.01 * std::abs(ch.value)),
                                    "|Y0 - CH| vs max(3 paired SE, 1%)"));
    }
    if (drv.growth == DriverGrowth::lipschitz)
        r.checks.push_back(check_le("y_bound", static_cast<double>(sol.bound_violations), 0.0, "|Y| above the a priori bound"));
    if (c.count("run", "export_paths", 0))
        write_solution(sol, ens, out / "bsde_paths.csv", out / "bsde_solution.json", c.hash(), c.count("run", "export_paths", 0));
}

inline void run_bismut(const Config& c, ExperimentReport& r) {
    auto spec = make_ensemble_spec(c, true);
    const double alpha = spec.op.alpha();
    const std::size_t N = spec.grid.steps;

    auto wspec = spec;
    wspec.n_paths = std::min<std::size_t>(spec.n_paths, c.count("run", "scan_paths", 4000));
    const auto rows = weight_operator_norm(wspec, dyadic_nodes(N));
    CsvTable wt({"s", "norm", "se", "mode"});
    std::vector<ScalingPoint> pts;
    for (const auto& w : rows) {
        wt.add({w.s, w.norm, w.se, static_cast<long long>(w.mode)});
        pts.push_back({w.s, w.norm});
    }
    r.tables["weight_norm"] = std::move(wt);
    if (pts.size() >= 4) {
        const auto fit = fit_scaling_exponent(pts);
        r.summary["weight_fit"] = fit_json(fit);
        r.checks.push_back(check_le("weight_exponent", std::abs(fit.slope + 0.5 + alpha), 0.1, "slope vs -(1/2 + alpha)"));
    }

    const PathEnsemble ens(spec);
    const auto drv = make_driver(c, spec.op);
    const auto phi = make_terminal(c, spec.op.dim());
    const auto opts = make_bsde_options(c);
    const auto sol = solve_bsde_lsmc(ens, drv, phi, opts);
    const auto g = nonlinear_bismut_gradient(sol, ens, 0);
    const bool ch = std::isfinite(drv.quadratic_gamma) && drv.quadratic_gamma != 0.0;
    const auto value = ch ? cole_hopf_functional(drv.quadratic_gamma, phi) : lsmc_value(drv, phi, opts);
    auto fresh = spec;
    fresh.seed = spec.seed + 1000;
    const auto fd = fd_directional(fresh, *spec.direction, c.num("run", "fd_step", 0.05), value);
    const double se = combined_se(g.se(), fd.se);
    r.summary["gradient"] = Json{{"bismut", g.mean()}, {"bismut_se", g.se()}, {"fd", fd.mean}, {"fd_se", fd.se}};
    r.checks.push_back(check_le("bismut_vs_fd", std::abs(g.mean() - fd.mean), std::max(3.0 * se, 0.05 * std::abs(fd.mean)),
                                "max(3 combined SE, 5%)"));
}

inline void run_control(const Config& c, ExperimentReport& r) {
    const auto pb = make_problem(c);
    const std::size_t paths = c.count("run", "paths", 10000);
    const auto seed = static_cast<std::uint64_t>(c.count("run", "seed", 1));
    const auto cl_paths = c.count("run", "closed_loop_paths", paths);
    const auto cl_seed = static_cast<std::uint64_t>(c.count("run", "closed_loop_seed", seed + 1));
    const auto opts = make_bsde_options(c);
    const char* regimes[] = {"structure", "alpha", "penalized"};
    r.summary["regime"] = regimes[static_cast<int>(pb.regime())];

    std::vector<double> lambdas(pb.op.eigenvalues().begin(), pb.op.eigenvalues().end());
    for (std::size_t i = 1; i <= 64; ++i) lambdas.push_back(std::pow(10.0, -3.0 + 9.0 * static_cast<double>(i) / 64.0));
    const auto ks = c.list("run", "k_list", {1, 10, 100, 1000, 10000});
    for (double delta : c.list("run", "delta_list", {0.0, 0.25, 0.5, 0.75})) {
        const auto y = yosida_bound_check(lambdas, ks, delta);
        r.checks.push_back(check_le("yosida_bound_delta_" + format_double(delta), static_cast<double>(y.violations), 0.0,
                                    "factor and weighted bound violations"));
    }

    if (pb.regime() == HamiltonianRegime::penalized) {
        ValueSequenceOptions o;
        o.n_paths = paths, o.closed_loop_paths = cl_paths, o.seed = seed, o.closed_loop_seed = cl_seed, o.bsde = opts;
        const auto seq = approximate_value_sequence(pb, c.list("run", "n_list", {1, 10, 100, 1000}), o);
        CsvTable t({"n", "V_n", "V_n_se", "J", "J_se", "J_n", "J_n_se", "control_norm", "reference"});
        for (const auto& row : seq.rows) {
            t.add({row.n, row.V_n.mean, row.V_n.se, row.J.mean, row.J.se, row.J_n.mean, row.J_n.se, row.control_norm,
                   row.reference});
        }
        r.tables["value_sequence"] = std::move(t);
        r.checks.push_back({"value_nonincreasing", seq.nonincreasing(), 0.0, 0.0, "paired 3 SE"});
        if (std::isfinite(seq.reference) && !seq.rows.empty()) {
            const auto& last = seq.rows.back();
            r.summary["reference"] = summary_json(seq.reference_summary);
            r.checks.push_back(check_le("value_limit", std::abs(last.V_n.mean - seq.reference), 0.02 * std::abs(seq.reference),
                                        "|V_n - V| at the largest n vs 2%"));
        }
        if (seq.rows.size() >= 2) {
            const double slope = seq.control_norm_tail_slope();
            r.summary["control_norm_tail_slope"] = slope;
            r.checks.push_back(check_le("control_norm_trend", slope, 0.05, "log-log slope of |u^n| over the two largest n"));
        }
    }

    // closed loop of the (limit or given-n) Hamiltonian feedback
    const double n_fb = pb.regime() == HamiltonianRegime::penalized ? c.list("run", "n_list", {1000}).back() : 0.0;
    const Driver psi = pb.hamiltonian(n_fb);
    const auto sol = solve_bsde_lsmc(PathEnsemble(pb.ensemble(paths, seed)), psi, pb.terminal, opts);
    const auto z = regression_z_provider(sol);
    const auto fb = make_feedback(pb, n_fb);
    const auto cl = synthesize_feedback(pb, fb, z, cl_paths, cl_seed, n_fb);
    const auto& J = n_fb > 0 ? cl.cost.J_penalized : cl.cost.J;
    r.summary["value"] = summary_json(sol.value);
    r.summary["closed_loop"] = summary_json(J);
    const double se = combined_se(J.se, sol.value.se);
    r.checks.push_back(check_le("closed_loop_cost", std::abs(J.mean - sol.value.mean), std::max(3.0 * se, 0.02 * std::abs(sol.value.mean)),
                                "|J(feedback) - v| vs max(3 SE, 2%)"));

    const auto gap = fundamental_relation_gap(pb, feedback_policy(fb, z, pb.op.dim()), sol.value.mean, sol.value.se, z,
                                              cl_paths, cl_seed, n_fb);
    r.summary["relation_gap"] = Json{{"gap", gap.gap}, {"se", gap.se}, {"integrand", gap.integrand}};
    r.checks.push_back(check_le("relation_gap", std::abs(gap.gap), 3.0 * gap.se + 2.0 * pb.grid.h() * std::abs(sol.value.mean),
                                "3 SE + 2h|v|"));

    CsvTable adm({"u_scale", "J", "J_se", "J_minus_v_over_se"});
    double worst = INFINITY;
    NoiseStream rng(seed ^ 0x5bd1e995u);
    for (std::uint32_t i = 0; i < 4; ++i) {
        std::vector<double> u(pb.op.dim());
        for (std::size_t k = 0; k < u.size(); ++k) u[k] = (i == 0 ? 0.0 : 0.5) * rng.pair(i, static_cast<std::uint32_t>(k), 0)[0];
        const auto e = n_fb > 0 ? evaluate_penalized_cost(pb, n_fb, ControlPath::constant(pb.grid.steps, u).policy(), cl_paths, cl_seed + 1 + i)
                                : evaluate_cost(pb, ControlPath::constant(pb.grid.steps, u).policy(), cl_paths, cl_seed + 1 + i);
        const auto& Ju = n_fb > 0 ? e.J_penalized : e.J;
        const double zsc = (Ju.mean - sol.value.mean) / combined_se(Ju.se, sol.value.se);
        worst = std::min(worst, zsc);
        adm.add({i == 0 ? 0.0 : 0.5, Ju.mean, Ju.se, zsc});
    }
    r.tables["admissible"] = std::move(adm);
    r.checks.push_back(check_le("admissible_above_value", -worst, 3.0, "J(u) >= v - 3 SE for constant controls"));

    if (pb.channel == ControlChannel::identity) {
        RecordedControl ueps = cl.control;
        const double pert = c.num("cost", "perturbation", 0.2);
        for (double& v : ueps.values) v += pert;
        const auto ca = cost_approximation_check(pb, ueps, ks, cl_seed);
        CsvTable t({"k", "J_k", "J_k_se", "deviation", "deviation_se"});
        for (const auto& row : ca.rows) t.add({row.k, row.J_k.mean, row.J_k.se, row.deviation.mean, row.deviation.se});
        r.tables["yosida_cost"] = std::move(t);
        r.checks.push_back({"yosida_cost_monotone", ca.monotone(), 0.0, 0.0, "|J_k - J| nonincreasing in k within 3 SE"});
    }
}

inline void run_scaling(const Config& c, ExperimentReport& r) {
    auto spec = make_ensemble_spec(c, true);
    const double alpha = spec.op.alpha();
    const auto horizons = c.list("run", "horizons", {0.0078125, 0.015625, 0.03125, 0.0625, 0.125, 0.25, 0.5});
    const std::size_t steps = c.count("run", "scan_steps", 16);
    spec.n_paths = std::min<std::size_t>(spec.n_paths, c.count("run", "scan_paths", spec.n_paths));

    // fractional energy: one ensemble on [0, max horizon], horizons snapped to nodes
    {
        const double Tmax = *std::max_element(horizons.begin(), horizons.end());
        const std::size_t NE = std::max<std::size_t>(spec.grid.steps, 64);
        auto es = spec;
        es.grid = TimeGrid(0.0, Tmax, NE);
        std::vector<std::size_t> nodes;
        for (double h : horizons) nodes.push_back(std::max<std::size_t>(1, es.grid.nearest(h)));
        const auto I = fractional_energy_norm(es, alpha, nodes);
        CsvTable t({"horizon", "energy"});
        std::vector<ScalingPoint> pts;
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            t.add({es.grid.node(nodes[i]), I[i]});
            pts.push_back({es.grid.node(nodes[i]), I[i]});
        }
        r.tables["fractional_energy"] = std::move(t);
        const auto fit = fit_scaling_exponent(pts);
        r.summary["energy_fit"] = fit_json(fit);
        r.checks.push_back(check_le("fractional_energy_exponent", std::abs(fit.slope - (1.0 - 2.0 * alpha)), 0.1,
                                    "slope vs 1 - 2 alpha"));
    }

    const auto drv = make_driver(c, spec.op);
    const auto phi = make_terminal(c, spec.op.dim());
    const auto opts = make_bsde_options(c);
    {
        const auto chk = gradient_energy_check(bismut_gradient_profile(spec, steps, drv, phi, opts), horizons, alpha);
        CsvTable t({"horizon", "gradient_energy"});
        for (const auto& p : chk.points) t.add({p.x, p.y});
        r.tables["gradient_energy"] = std::move(t);
        r.summary["gradient_energy_fit"] = fit_json(chk.fit);
        r.checks.push_back(check_le("gradient_energy_exponent", chk.threshold - chk.fit.slope, 0.0, "slope >= -2 alpha - 0.15"));
    }
    if (phi.bounded && std::isfinite(drv.quadratic_gamma)) {
        const auto scan = gradient_blowup_scan(spec, horizons, steps, drv, phi, opts);
        CsvTable t({"tau", "z_norm", "grad_norm", "value", "value_se"});
        for (const auto& row : scan.rows) t.add({row.tau, row.z_norm, row.grad_norm, row.value.mean, row.value.se});
        r.tables["blowup"] = std::move(t);
        r.summary["z_fit"] = fit_json(scan.z_fit);
        r.summary["grad_fit"] = fit_json(scan.grad_fit);
        r.checks.push_back(check_le("z_blowup_exponent", std::abs(scan.z_fit.slope + 0.5), 0.15, "slope in [-0.65, -0.35]"));
        r.checks.push_back(check_le("grad_blowup_exponent", std::abs(scan.grad_fit.slope + 0.5 + alpha), 0.15,
                                    "slope within 0.15 of -(1/2 + alpha)"));
    }
}

inline void write_report(const ExperimentReport& r, const Config& c, const std::filesystem::path& out) {
    std::filesystem::create_directories(out);
    for (const auto& [name, t] : r.tables) t.write(out / (r.subcommand + "_" + name + ".csv"));
    Json j = r.summary;
    j["subcommand"] = r.subcommand;
    j["config_hash"] = c.hash();
    j["seed"] = c.count("run", "seed", 1);
    j["passed"] = r.passed();
    Json checks = Json::array();
    for (const auto& ch : r.checks)
        checks.push_back({{"name", ch.name}, {"passed", ch.passed}, {"value", ch.value}, {"tolerance", ch.tolerance},
                          {"detail", ch.detail}});
    j["checks"] = checks;
    write_json(j, out / (r.subcommand + "_summary.json"));
}

} // namespace detail

/// Runs one subcommand ("all" runs the others in order) and writes its
/// artifacts under `out`.
inline ExperimentReport run_experiment(const Config& c, const std::string& sub, const std::filesystem::path& out) {
    ExperimentReport r;
    r.subcommand = sub;
    const auto start = std::chrono::steady_clock::now();
    std::filesystem::create_directories(out);
    if (sub == "simulate") {
        detail::run_simulate(c, r);
        if (r.summary.contains("_export")) {
            r.summary.erase("_export");
            const PathEnsemble ens(make_ensemble_spec(c));
            write_ensemble(ens, out / "simulate_paths.csv", out / "simulate_manifest.json", c.hash(),
                           c.count("run", "export_paths", 0));
        }
    } else if (sub == "bsde") detail::run_bsde(c, r, out);
    else if (sub == "bismut") detail::run_bismut(c, r);
    else if (sub == "control") detail::run_control(c, r);
    else if (sub == "scaling") detail::run_scaling(c, r);
    else if (sub == "all") {
        for (const auto& s : experiment_subcommands()) {
            if (s == "all") continue;
            auto part = run_experiment(c, s, out);
            for (auto& ch : part.checks) ch.name = s + "." + ch.name, r.checks.push_back(std::move(ch));
            r.summary[s] = Json{{"passed", part.passed()}};
        }
    } else throw std::invalid_argument("run_experiment: unknown subcommand " + sub);
    r.summary["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    detail::write_report(r, c, out);
    return r;
}

} // namespace bsdelab
