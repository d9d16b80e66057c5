#pragma once

// Forward SPDE on the spectral Galerkin space: exact Ornstein-Uhlenbeck
// convolution per mode, exponential Euler for drift and control, and the
// pathwise first variation. Ensembles keep checkpoints every B steps and
// regenerate the intermediate nodes on demand from the counter-based noise.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <utility>
#include <vector>

#include "bsdelab/rng.hpp"
#include "bsdelab/spectral.hpp"
#include "bsdelab/stats.hpp"

namespace bsdelab {

struct TimeGrid {
    double t0 = 0.0;
    double T = 1.0;
    std::size_t steps = 1;

    TimeGrid() = default;
    TimeGrid(double t0_, double T_, std::size_t steps_) : t0(t0_), T(T_), steps(steps_) {
        if (!(T > t0)) throw std::invalid_argument("TimeGrid: need t0 < T");
        if (steps == 0) throw std::invalid_argument("TimeGrid: steps must be positive");
    }
    [[nodiscard]] double h() const noexcept { return (T - t0) / static_cast<double>(steps); }
    [[nodiscard]] double node(std::size_t j) const noexcept {
        return j == steps ? T : t0 + static_cast<double>(j) * h();
    }
    [[nodiscard]] std::size_t node_count() const noexcept { return steps + 1; }
    /// Index of the node nearest to t (t clamped to [t0, T]).
    [[nodiscard]] std::size_t nearest(double t) const {
        const double r = std::round((std::clamp(t, t0, T) - t0) / h());
        return std::min(steps, static_cast<std::size_t>(r));
    }
};

enum class DriftKind { zero, linear, cubic_truncated, custom };

using VectorMap = std::function<void(std::span<const double> x, std::span<double> out)>;
using JacobianMap = std::function<void(std::span<const double> x, std::span<const double> v, std::span<double> out)>;

/// Dissipative drift F. cubic_truncated evaluates f(r) = -sign(r) min(|r|, cap)^3
/// on the spatial reconstruction and projects back.
struct DriftSpec {
    DriftKind kind = DriftKind::zero;
    double rate = 0.0;
    double cap = 1.0;
    int degree = 0;
    VectorMap evaluator;
    JacobianMap jacobian;

    static DriftSpec zero() { return {}; }
    static DriftSpec linear(double rate) {
        if (!(rate >= 0.0)) throw std::invalid_argument("DriftSpec::linear: rate must be nonnegative");
        DriftSpec d;
        d.kind = DriftKind::linear;
        d.rate = rate;
        d.degree = 1;
        return d;
    }
    static DriftSpec cubic_truncated(double cap) {
        if (!(cap > 0.0)) throw std::invalid_argument("DriftSpec::cubic_truncated: cap must be positive");
        DriftSpec d;
        d.kind = DriftKind::cubic_truncated;
        d.cap = cap;
        d.degree = 3;
        return d;
    }
    static DriftSpec custom(VectorMap f, JacobianMap jac = {}, int degree = 0) {
        DriftSpec d;
        d.kind = DriftKind::custom;
        d.evaluator = std::move(f);
        d.jacobian = std::move(jac);
        d.degree = degree;
        return d;
    }
    [[nodiscard]] bool has_jacobian() const { return kind != DriftKind::custom || static_cast<bool>(jacobian); }
    [[nodiscard]] const char* name() const {
        switch (kind) {
        case DriftKind::zero: return "zero";
        case DriftKind::linear: return "linear";
        case DriftKind::cubic_truncated: return "cubic_truncated";
        default: return "custom";
        }
    }
};

/// Drift bound to an operator; holds scratch space, so one instance per thread.
class DriftEvaluator {
public:
    DriftEvaluator(const SpectralOperator& op, DriftSpec spec) : spec_(std::move(spec)) {
        if (spec_.kind == DriftKind::cubic_truncated) {
            grid_ = quadrature_grid(op);
            vals_.resize(grid_.points);
            slope_.resize(grid_.points);
        }
        if (spec_.kind == DriftKind::custom && !spec_.evaluator)
            throw std::invalid_argument("DriftEvaluator: custom drift without evaluator");
    }

    [[nodiscard]] const DriftSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] bool is_zero() const noexcept { return spec_.kind == DriftKind::zero; }

    void apply(std::span<const double> x, std::span<double> out) {
        switch (spec_.kind) {
        case DriftKind::zero: std::fill(out.begin(), out.end(), 0.0); break;
        case DriftKind::linear:
            for (std::size_t k = 0; k < x.size(); ++k) out[k] = -spec_.rate * x[k];
            break;
        case DriftKind::cubic_truncated: {
            grid_.reconstruct(x, vals_);
            const double cap = spec_.cap;
            for (double& r : vals_) {
                const double a = std::min(std::abs(r), cap);
                r = -std::copysign(a * a * a, r);
            }
            grid_.project(vals_, out);
            break;
        }
        case DriftKind::custom: spec_.evaluator(x, out); break;
        }
    }

    /// out = DF(x) v
    void jacobian(std::span<const double> x, std::span<const double> v, std::span<double> out) {
        switch (spec_.kind) {
        case DriftKind::zero: std::fill(out.begin(), out.end(), 0.0); break;
        case DriftKind::linear:
            for (std::size_t k = 0; k < x.size(); ++k) out[k] = -spec_.rate * v[k];
            break;
        case DriftKind::cubic_truncated: {
            grid_.reconstruct(x, vals_);
            for (std::size_t g = 0; g < grid_.points; ++g) {
                const double r = vals_[g];
                slope_[g] = std::abs(r) < spec_.cap ? -3.0 * r * r : 0.0;
            }
            grid_.reconstruct(v, vals_);
            for (std::size_t g = 0; g < grid_.points; ++g) vals_[g] *= slope_[g];
            grid_.project(vals_, out);
            break;
        }
        case DriftKind::custom:
            if (!spec_.jacobian) throw std::invalid_argument("DriftEvaluator: custom drift has no Jacobian");
            spec_.jacobian(x, v, out);
            break;
        }
    }

    /// Upper bound on h for which x -> x + h F(x) is nonexpansive.
    [[nodiscard]] double max_stable_step() const {
        switch (spec_.kind) {
        case DriftKind::linear: return spec_.rate > 0 ? 2.0 / spec_.rate : std::numeric_limits<double>::infinity();
        case DriftKind::cubic_truncated: return 2.0 / (3.0 * spec_.cap * spec_.cap);
        default: return std::numeric_limits<double>::infinity();
        }
    }

private:
    DriftSpec spec_;
    CollocationGrid grid_;
    std::vector<double> vals_;
    std::vector<double> slope_;
};

struct DissipativityReport {
    std::size_t samples = 0;
    std::size_t violations = 0;
    double max_inner = -std::numeric_limits<double>::infinity();
    [[nodiscard]] bool passed() const { return violations == 0; }
};

/// Samples Gaussian pairs (x, x+z) and checks <F(x+z) - F(x), z> <= tol.
inline DissipativityReport dissipativity_probe(const SpectralOperator& op, const DriftSpec& drift, std::size_t samples,
                                               std::uint64_t seed, double scale = 1.0, double tol = 1e-12) {
    DriftEvaluator F(op, drift);
    NoiseStream rng(seed);
    const std::size_t d = op.dim();
    std::vector<double> x(d), xz(d), z(d), f1(d), f2(d);
    DissipativityReport rep;
    for (std::size_t s = 0; s < samples; ++s) {
        for (std::size_t k = 0; k < d; ++k) {
            const auto q = rng.quad(s, static_cast<std::uint32_t>(k), 0, NoiseDomain::auxiliary);
            x[k] = scale * q.z[0];
            z[k] = scale * q.z[1];
            xz[k] = x[k] + z[k];
        }
        F.apply(x, f1);
        F.apply(xz, f2);
        double ip = 0.0;
        for (std::size_t k = 0; k < d; ++k) ip += (f2[k] - f1[k]) * z[k];
        rep.max_inner = std::max(rep.max_inner, ip);
        if (ip > tol * (1.0 + inner(z, z))) ++rep.violations;
        ++rep.samples;
    }
    return rep;
}

enum class ControlChannel { identity, fractional };

/// u_j on [t_j, t_{j+1}) for a given path; must be deterministic because nodes
/// are regenerated on demand.
using ControlPolicy =
    std::function<void(std::size_t path, std::size_t step, double t, std::span<const double> x, std::span<double> u)>;

/// Called once per (path, step) during the initial generation pass only.
using StepObserver = std::function<void(std::size_t path, std::size_t step, std::span<const double> x,
                                        std::span<const double> u, std::span<const double> x_next)>;

/// Deterministic open-loop control, one vector per step.
struct ControlPath {
    std::size_t steps = 0;
    std::size_t dim = 0;
    std::vector<double> values; // steps x dim

    static ControlPath zero(std::size_t steps, std::size_t dim) { return {steps, dim, std::vector<double>(steps * dim)}; }
    static ControlPath constant(std::size_t steps, std::span<const double> u) {
        ControlPath c{steps, u.size(), {}};
        for (std::size_t j = 0; j < steps; ++j) c.values.insert(c.values.end(), u.begin(), u.end());
        return c;
    }
    [[nodiscard]] std::span<const double> at(std::size_t j) const { return {values.data() + j * dim, dim}; }
    [[nodiscard]] std::span<double> at(std::size_t j) { return {values.data() + j * dim, dim}; }
    [[nodiscard]] ControlPolicy policy() const {
        auto self = std::make_shared<ControlPath>(*this);
        return [self](std::size_t, std::size_t j, double, std::span<const double>, std::span<double> u) {
            const auto src = self->at(j);
            std::copy(src.begin(), src.end(), u.begin());
        };
    }
};

/// Adapted control recorded per path (e.g. a closed-loop feedback), replayable open-loop.
struct RecordedControl {
    std::size_t n_paths = 0;
    std::size_t steps = 0;
    std::size_t dim = 0;
    std::vector<double> values; // path x step x dim

    RecordedControl() = default;
    RecordedControl(std::size_t n, std::size_t s, std::size_t d) : n_paths(n), steps(s), dim(d), values(n * s * d) {}
    [[nodiscard]] std::span<const double> at(std::size_t p, std::size_t j) const {
        return {values.data() + (p * steps + j) * dim, dim};
    }
    [[nodiscard]] std::span<double> at(std::size_t p, std::size_t j) {
        return {values.data() + (p * steps + j) * dim, dim};
    }
    [[nodiscard]] ControlPolicy policy() const {
        auto self = std::make_shared<RecordedControl>(*this);
        return [self](std::size_t p, std::size_t j, double, std::span<const double>, std::span<double> u) {
            const auto src = self->at(p, j);
            std::copy(src.begin(), src.end(), u.begin());
        };
    }
};

struct SimulationOptions {
    std::size_t memory_budget = std::size_t{1} << 30; // bytes for stored nodes
    std::size_t stride = 0;                           // checkpoint spacing; 0 = choose from budget
    StepObserver observer;
};

struct EnsembleSpec {
    SpectralOperator op;
    TimeGrid grid;
    DriftSpec drift;
    GalerkinState x0;
    std::size_t n_paths = 0;
    std::uint64_t seed = 0;
    double noise_alpha = std::numeric_limits<double>::quiet_NaN(); // NaN: use op.alpha()
    ControlChannel channel = ControlChannel::identity;
    ControlPolicy control;
    std::optional<GalerkinState> direction; // first-variation direction
    SimulationOptions options;
};

class PathEnsemble {
public:
    explicit PathEnsemble(EnsembleSpec spec) : spec_(std::move(spec)), eval_(spec_.op, spec_.drift) {
        const std::size_t d = spec_.op.dim();
        check_dim(spec_.op, spec_.x0.dim(), "PathEnsemble");
        if (spec_.direction) check_dim(spec_.op, spec_.direction->dim(), "PathEnsemble(direction)");
        if (spec_.n_paths == 0) throw std::invalid_argument("PathEnsemble: n_paths must be positive");
        if (spec_.direction && !spec_.drift.has_jacobian())
            throw std::invalid_argument("PathEnsemble: first variation needs a drift Jacobian");
        if (std::isnan(spec_.noise_alpha)) spec_.noise_alpha = spec_.op.alpha();
        const double h = spec_.grid.h();
        e_.resize(d), phi1_.resize(d), noise_.resize(d), rho_.resize(d), rhoc_.resize(d), q_.resize(d);
        for (std::size_t k = 0; k < d; ++k) {
            const double lam = spec_.op.eigenvalue(k);
            e_[k] = std::exp(-lam * h);
            phi1_[k] = -std::expm1(-lam * h) / lam;
            const double s = std::sqrt(-std::expm1(-2.0 * lam * h) / (2.0 * lam));
            noise_[k] = std::pow(lam, -spec_.noise_alpha) * s;
            rho_[k] = std::min(1.0, phi1_[k] / (s * std::sqrt(h)));
            rhoc_[k] = std::sqrt(std::max(0.0, 1.0 - rho_[k] * rho_[k]));
            q_[k] = spec_.channel == ControlChannel::fractional ? std::pow(lam, -spec_.op.alpha()) : 1.0;
        }
        sqrt_h_ = std::sqrt(h);
        choose_stride();
        generate();
    }

    [[nodiscard]] const SpectralOperator& op() const noexcept { return spec_.op; }
    [[nodiscard]] const TimeGrid& grid() const noexcept { return spec_.grid; }
    [[nodiscard]] const EnsembleSpec& spec() const noexcept { return spec_; }
    [[nodiscard]] std::size_t dim() const noexcept { return spec_.op.dim(); }
    [[nodiscard]] std::size_t n_paths() const noexcept { return spec_.n_paths; }
    [[nodiscard]] std::size_t steps() const noexcept { return spec_.grid.steps; }
    [[nodiscard]] std::uint64_t seed() const noexcept { return spec_.seed; }
    [[nodiscard]] const GalerkinState& x0() const noexcept { return spec_.x0; }
    [[nodiscard]] bool has_variation() const noexcept { return spec_.direction.has_value(); }
    [[nodiscard]] const GalerkinState& direction() const { return spec_.direction.value(); }
    [[nodiscard]] std::size_t stride() const noexcept { return stride_; }
    [[nodiscard]] double noise_alpha() const noexcept { return spec_.noise_alpha; }

    /// Path-major (n_paths x dim) states at a node. Views stay valid until a node
    /// outside the current block is requested; X_j, X_{j+1} and dW_j are always
    /// jointly valid.
    [[nodiscard]] std::span<const double> states(std::size_t node) const { return fetch(node, false); }
    [[nodiscard]] std::span<const double> variation(std::size_t node) const {
        if (!has_variation()) throw std::logic_error("PathEnsemble: no first-variation trajectories");
        return fetch(node, true);
    }
    /// Cylindrical Wiener increments W_{t_{j+1}} - W_{t_j}, path-major.
    [[nodiscard]] std::span<const double> increments(std::size_t step) const {
        if (step >= steps()) throw std::out_of_range("PathEnsemble::increments: step out of range");
        load_block(step / stride_ * stride_);
        return {bdw_.data() + (step - block_) * slab(), slab()};
    }
    [[nodiscard]] std::span<const double> state(std::size_t path, std::size_t node) const {
        return states(node).subspan(path * dim(), dim());
    }

    /// Block regenerations performed since construction.
    [[nodiscard]] std::size_t regenerations() const noexcept { return regenerations_; }

private:
    [[nodiscard]] std::size_t slab() const noexcept { return spec_.n_paths * spec_.op.dim(); }

    void choose_stride() {
        const std::size_t N = steps();
        if (spec_.options.stride > 0) {
            stride_ = std::min(spec_.options.stride, N);
            return;
        }
        const double a = static_cast<double>(slab()) * sizeof(double) * (has_variation() ? 2.0 : 1.0);
        const double b = static_cast<double>(slab()) * sizeof(double);
        auto cost = [&](std::size_t B) {
            const double ck = static_cast<double>((N + B - 1) / B + 1);
            return ck * a + static_cast<double>(B + 1) * a + static_cast<double>(B) * b;
        };
        if (cost(N) <= static_cast<double>(spec_.options.memory_budget)) {
            stride_ = N;
            return;
        }
        std::size_t best = 1;
        for (std::size_t B = 1; B <= N; ++B)
            if (cost(B) < cost(best)) best = B;
        stride_ = best;
    }

    [[nodiscard]] bool is_checkpoint(std::size_t node) const { return node % stride_ == 0 || node == steps(); }
    [[nodiscard]] std::size_t checkpoint_index(std::size_t node) const {
        return node == steps() ? ckpt_x_.size() - 1 : node / stride_;
    }

    std::span<const double> fetch(std::size_t node, bool var) const {
        if (node > steps()) throw std::out_of_range("PathEnsemble: node out of range");
        if (is_checkpoint(node)) {
            const auto& v = var ? ckpt_v_[checkpoint_index(node)] : ckpt_x_[checkpoint_index(node)];
            return {v.data(), v.size()};
        }
        load_block(node / stride_ * stride_);
        const auto& buf = var ? bv_ : bx_;
        return {buf.data() + (node - block_) * slab(), slab()};
    }

    struct Work {
        std::vector<double> x, v, f, jv, u, xn, quad0, quad1, raw;
        std::size_t pair = std::numeric_limits<std::size_t>::max();
        bool full = false;
    };

    // One step of one path. Writes X_{j+1} (and V_{j+1}, dW_j if requested) into w.
    void step(std::size_t p, std::size_t j, Work& w, bool need_dw, double* dw_out) const {
        const std::size_t d = dim();
        const std::size_t pr = j >> 1;
        if (pr != w.pair || (need_dw && !w.full)) {
            if (need_dw) {
                w.raw.resize(4 * d);
                rng_.quad_modes(p, static_cast<std::uint32_t>(pr), d, w.raw.data());
                for (std::size_t k = 0; k < d; ++k) {
                    w.quad0[2 * k] = w.raw[4 * k], w.quad0[2 * k + 1] = w.raw[4 * k + 1];
                    w.quad1[2 * k] = w.raw[4 * k + 2], w.quad1[2 * k + 1] = w.raw[4 * k + 3];
                }
            } else {
                rng_.primary_modes(p, static_cast<std::uint32_t>(pr), d, w.quad0.data());
            }
            w.pair = pr;
            w.full = need_dw;
        }
        const unsigned odd = j & 1u;
        const double h = spec_.grid.h();
        const bool ctrl = static_cast<bool>(spec_.control);
        if (ctrl) spec_.control(p, j, spec_.grid.node(j), w.x, w.u);
        const bool drift = !eval_.is_zero();
        if (drift) eval_.apply(w.x, w.f);
        if (has_variation() && drift) eval_.jacobian(w.x, w.v, w.jv);
        for (std::size_t k = 0; k < d; ++k) {
            const double n0 = w.quad0[2 * k + odd];
            double y = drift ? e_[k] * (w.x[k] + h * w.f[k]) : e_[k] * w.x[k];
            if (ctrl) y += phi1_[k] * q_[k] * w.u[k];
            y += noise_[k] * n0;
            w.xn[k] = y;
            if (has_variation()) w.v[k] = drift ? e_[k] * (w.v[k] + h * w.jv[k]) : e_[k] * w.v[k];
            if (need_dw) dw_out[k] = sqrt_h_ * (rho_[k] * n0 + rhoc_[k] * w.quad1[2 * k + odd]);
        }
        for (std::size_t k = 0; k < d; ++k) {
            if (!std::isfinite(w.xn[k])) {
                std::ostringstream os;
                os << "simulate: non-finite state on path " << p << " at step " << j << " (mode " << k
                   << ", drift " << spec_.drift.name() << ")";
                throw std::runtime_error(os.str());
            }
        }
    }

    Work make_work() const {
        const std::size_t d = dim();
        Work w;
        for (auto* v : {&w.x, &w.v, &w.f, &w.jv, &w.u, &w.xn}) v->assign(d, 0.0);
        w.quad0.assign(2 * d, 0.0);
        w.quad1.assign(2 * d, 0.0);
        return w;
    }

    void generate() {
        const std::size_t N = steps(), d = dim(), n = spec_.n_paths;
        const std::size_t nck = (N + stride_ - 1) / stride_ + 1;
        ckpt_x_.assign(nck, std::vector<double>(slab()));
        if (has_variation()) ckpt_v_.assign(nck, std::vector<double>(slab()));
        block_ = (N - 1) / stride_ * stride_;
        bx_.assign((stride_ + 1) * slab(), 0.0);
        if (has_variation()) bv_.assign((stride_ + 1) * slab(), 0.0);
        bdw_.assign(stride_ * slab(), 0.0);

        Work w = make_work();
        const auto& obs = spec_.options.observer;
        for (std::size_t p = 0; p < n; ++p) {
            std::copy(spec_.x0.coords().begin(), spec_.x0.coords().end(), w.x.begin());
            if (has_variation()) std::copy(spec_.direction->coords().begin(), spec_.direction->coords().end(), w.v.begin());
            w.pair = std::numeric_limits<std::size_t>::max();
            write_node(p, 0, w);
            for (std::size_t j = 0; j < N; ++j) {
                const bool in_block = j >= block_;
                step(p, j, w, in_block, in_block ? &bdw_[(j - block_) * slab() + p * d] : nullptr);
                if (obs) obs(p, j, w.x, w.u, w.xn);
                std::swap(w.x, w.xn);
                write_node(p, j + 1, w);
            }
        }
    }

    void write_node(std::size_t p, std::size_t node, const Work& w) {
        const std::size_t d = dim();
        if (is_checkpoint(node)) {
            std::copy(w.x.begin(), w.x.end(), ckpt_x_[checkpoint_index(node)].begin() + p * d);
            if (has_variation()) std::copy(w.v.begin(), w.v.end(), ckpt_v_[checkpoint_index(node)].begin() + p * d);
        }
        if (node >= block_ && node <= block_ + stride_) {
            std::copy(w.x.begin(), w.x.end(), bx_.begin() + (node - block_) * slab() + p * d);
            if (has_variation()) std::copy(w.v.begin(), w.v.end(), bv_.begin() + (node - block_) * slab() + p * d);
        }
    }

    void load_block(std::size_t start) const {
        if (start != block_) fill_block(start);
    }

    void fill_block(std::size_t start) const {
        const std::size_t N = steps(), d = dim(), n = spec_.n_paths;
        const std::size_t end = std::min(N, start + stride_);
        const std::size_t ci = checkpoint_index(start);
        Work w = make_work();
        block_ = start;
        for (std::size_t p = 0; p < n; ++p) {
            std::copy_n(ckpt_x_[ci].begin() + p * d, d, w.x.begin());
            if (has_variation()) std::copy_n(ckpt_v_[ci].begin() + p * d, d, w.v.begin());
            w.pair = std::numeric_limits<std::size_t>::max();
            std::copy(w.x.begin(), w.x.end(), bx_.begin() + p * d);
            if (has_variation()) std::copy(w.v.begin(), w.v.end(), bv_.begin() + p * d);
            for (std::size_t j = start; j < end; ++j) {
                step(p, j, w, true, &bdw_[(j - start) * slab() + p * d]);
                std::swap(w.x, w.xn);
                std::copy(w.x.begin(), w.x.end(), bx_.begin() + (j + 1 - start) * slab() + p * d);
                if (has_variation()) std::copy(w.v.begin(), w.v.end(), bv_.begin() + (j + 1 - start) * slab() + p * d);
            }
        }
        ++regenerations_;
    }

    EnsembleSpec spec_;
    mutable DriftEvaluator eval_;
    NoiseStream rng_{spec_.seed};
    std::vector<double> e_, phi1_, noise_, rho_, rhoc_, q_;
    double sqrt_h_ = 0.0;
    std::size_t stride_ = 1;
    std::vector<std::vector<double>> ckpt_x_, ckpt_v_;
    mutable std::size_t block_ = 0;
    mutable std::vector<double> bx_, bv_, bdw_;
    mutable std::size_t regenerations_ = 0;
};

inline PathEnsemble simulate_forward(const SpectralOperator& op, const DriftSpec& drift, const GalerkinState& x0,
                                     const TimeGrid& grid, std::size_t n_paths, std::uint64_t seed,
                                     SimulationOptions options = {}) {
    EnsembleSpec s{op, grid, drift, x0, n_paths, seed};
    s.options = std::move(options);
    return PathEnsemble(std::move(s));
}

/// w^A with noise exponent alpha: drift zero started at the origin.
inline PathEnsemble simulate_convolution(const SpectralOperator& op, double alpha, const TimeGrid& grid,
                                         std::size_t n_paths, std::uint64_t seed, SimulationOptions options = {}) {
    if (!(alpha > 0.0 && alpha < 0.5)) throw std::invalid_argument("simulate_convolution: alpha must lie in (0, 1/2)");
    EnsembleSpec s{op, grid, DriftSpec::zero(), GalerkinState(op.dim()), n_paths, seed};
    s.noise_alpha = alpha;
    s.options = std::move(options);
    return PathEnsemble(std::move(s));
}

/// Same noise and states as `ensemble`, augmented with grad_x X h.
inline PathEnsemble simulate_first_variation(const PathEnsemble& ensemble, const DriftSpec& drift,
                                             const GalerkinState& h, SimulationOptions options = {}) {
    if (drift.kind != ensemble.spec().drift.kind)
        throw std::invalid_argument("simulate_first_variation: drift differs from the ensemble drift");
    if (!drift.has_jacobian()) throw std::invalid_argument("simulate_first_variation: missing Jacobian for custom drift");
    EnsembleSpec s = ensemble.spec();
    s.drift = drift;
    s.direction = h;
    s.options = std::move(options);
    return PathEnsemble(std::move(s));
}

inline PathEnsemble simulate_controlled(const SpectralOperator& op, const DriftSpec& drift, ControlChannel channel,
                                        ControlPolicy u, const GalerkinState& x0, const TimeGrid& grid,
                                        std::size_t n_paths, std::uint64_t seed, SimulationOptions options = {}) {
    EnsembleSpec s{op, grid, drift, x0, n_paths, seed};
    s.channel = channel;
    s.control = std::move(u);
    s.options = std::move(options);
    return PathEnsemble(std::move(s));
}

inline PathEnsemble simulate_controlled(const SpectralOperator& op, const DriftSpec& drift, ControlChannel channel,
                                        const ControlPath& u, const GalerkinState& x0, const TimeGrid& grid,
                                        std::size_t n_paths, std::uint64_t seed, SimulationOptions options = {}) {
    if (u.steps != grid.steps || u.dim != op.dim())
        throw std::invalid_argument("simulate_controlled: control path does not match grid/operator");
    return simulate_controlled(op, drift, channel, u.policy(), x0, grid, n_paths, seed, std::move(options));
}

/// Per-path trapezoid integrals of |(-A)^eps grad X_s h|^2 from t0 to each node in `nodes`.
inline std::vector<std::vector<double>> weighted_derivative_integrals(const PathEnsemble& ens, double epsilon,
                                                                      const std::vector<std::size_t>& nodes) {
    if (!(epsilon >= 0.0 && epsilon <= 0.5))
        throw std::invalid_argument("weighted_derivative_integral: epsilon must lie in [0, 1/2]");
    if (!ens.has_variation()) throw std::invalid_argument("weighted_derivative_integral: no first variation");
    const std::size_t n = ens.n_paths(), d = ens.dim();
    std::vector<double> wgt(d);
    for (std::size_t k = 0; k < d; ++k) wgt[k] = ens.op().power(k, 2.0 * epsilon);
    std::size_t last = 0;
    for (auto s : nodes) {
        if (s > ens.steps()) throw std::out_of_range("weighted_derivative_integral: node out of range");
        last = std::max(last, s);
    }
    std::vector<std::vector<double>> out(nodes.size(), std::vector<double>(n, 0.0));
    std::vector<double> acc(n, 0.0), prev(n, 0.0);
    const double h = ens.grid().h();
    auto sq = [&](std::span<const double> v, std::size_t p) {
        double s = 0.0;
        for (std::size_t k = 0; k < d; ++k) s += wgt[k] * v[p * d + k] * v[p * d + k];
        return s;
    };
    {
        const auto v0 = ens.variation(0);
        for (std::size_t p = 0; p < n; ++p) prev[p] = sq(v0, p);
    }
    for (std::size_t j = 0; j <= last; ++j) {
        if (j > 0) {
            const auto v = ens.variation(j);
            for (std::size_t p = 0; p < n; ++p) {
                const double cur = sq(v, p);
                acc[p] += 0.5 * h * (prev[p] + cur);
                prev[p] = cur;
            }
        }
        for (std::size_t i = 0; i < nodes.size(); ++i)
            if (nodes[i] == j) out[i] = acc;
    }
    return out;
}

inline std::vector<double> weighted_derivative_integral(const PathEnsemble& ens, double epsilon) {
    return weighted_derivative_integrals(ens, epsilon, {ens.steps()})[0];
}

/// max over unit directions e_k of E int_0^tau |(-A)^eps grad X_s e_k|^2 ds at each
/// node in `nodes` (one ensemble per mode, same seed).
inline std::vector<double> fractional_energy_norm(const EnsembleSpec& base, double epsilon,
                                                  const std::vector<std::size_t>& nodes) {
    const std::size_t d = base.op.dim();
    std::vector<double> out(nodes.size(), 0.0);
    for (std::size_t k = 0; k < d; ++k) {
        EnsembleSpec s = base;
        s.direction = GalerkinState::unit(d, k);
        const PathEnsemble ens(s);
        const auto I = weighted_derivative_integrals(ens, epsilon, nodes);
        for (std::size_t i = 0; i < nodes.size(); ++i) {
            double m = 0.0;
            for (double v : I[i]) m += v;
            out[i] = std::max(out[i], m / static_cast<double>(I[i].size()));
        }
    }
    return out;
}

/// Per-path sup over grid nodes of |X_t|_H.
inline std::vector<double> sup_h_norm(const PathEnsemble& ens, bool of_variation = false) {
    const std::size_t n = ens.n_paths(), d = ens.dim();
    std::vector<double> sup(n, 0.0);
    for (std::size_t j = 0; j <= ens.steps(); ++j) {
        const auto x = of_variation ? ens.variation(j) : ens.states(j);
        for (std::size_t p = 0; p < n; ++p) sup[p] = std::max(sup[p], h_norm(x.subspan(p * d, d)));
    }
    return sup;
}

/// Ensemble summary of one mode at a node.
inline McSummary mode_summary(const PathEnsemble& ens, std::size_t node, std::size_t mode) {
    const auto x = ens.states(node);
    std::vector<double> v(ens.n_paths());
    for (std::size_t p = 0; p < v.size(); ++p) v[p] = x[p * ens.dim() + mode];
    return summarize(v);
}

/// Closed-form variance of the OU convolution of mode k after time tau.
inline double ou_variance(const SpectralOperator& op, std::size_t k, double alpha, double tau) {
    const double lam = op.eigenvalue(k);
    return std::pow(lam, -2.0 * alpha) * (-std::expm1(-2.0 * lam * tau)) / (2.0 * lam);
}

} // namespace bsdelab
