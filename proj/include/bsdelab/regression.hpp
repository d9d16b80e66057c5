#pragma once

// Cross-sectional least squares on one time slice: feature maps over
// standardized states and ridge-regularized normal equations.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace bsdelab {

enum class BasisFamily { polynomial, modewise, radial };

struct RegressionBasis {
    BasisFamily family = BasisFamily::polynomial;
    int degree = 2;
    /// polynomial: full total degree on the first `leading_modes` active
    /// coordinates, linear terms on the rest (0 = all coordinates).
    std::size_t leading_modes = 0;
    std::size_t centers = 0; // radial
    double width = 1.0;      // radial, in standardized units
    double ridge = 1e-8;     // relative to trace(G)/p

    static RegressionBasis polynomial(int degree, std::size_t leading = 0) {
        return {BasisFamily::polynomial, degree, leading};
    }
    static RegressionBasis modewise(int degree) { return {BasisFamily::modewise, degree}; }
    static RegressionBasis radial(std::size_t centers, double width = 1.0) {
        return {BasisFamily::radial, 1, 0, centers, width};
    }
    [[nodiscard]] std::string describe() const {
        std::ostringstream os;
        switch (family) {
        case BasisFamily::polynomial: os << "polynomial(degree=" << degree << ",leading=" << leading_modes << ")"; break;
        case BasisFamily::modewise: os << "modewise(degree=" << degree << ")"; break;
        case BasisFamily::radial: os << "radial(centers=" << centers << ",width=" << width << ")"; break;
        }
        os << ",ridge=" << ridge;
        return os.str();
    }
};

/// Feature map frozen on one slice (standardization and centers included).
class FeatureMap {
public:
    FeatureMap() = default;

    FeatureMap(const RegressionBasis& basis, std::span<const double> X, std::size_t n, std::size_t d)
        : basis_(basis), dim_(d) {
        if (n == 0 || X.size() != n * d) throw std::invalid_argument("FeatureMap: slice shape mismatch");
        if (basis.degree < 1) throw std::invalid_argument("FeatureMap: degree must be >= 1");
        mu_.assign(d, 0.0), sd_.assign(d, 0.0);
        for (std::size_t k = 0; k < d; ++k) {
            double m = 0.0;
            for (std::size_t p = 0; p < n; ++p) m += X[p * d + k];
            m /= static_cast<double>(n);
            double v = 0.0;
            for (std::size_t p = 0; p < n; ++p) v += (X[p * d + k] - m) * (X[p * d + k] - m);
            v /= static_cast<double>(n);
            mu_[k] = m;
            sd_[k] = std::sqrt(v);
            if (sd_[k] > 1e-12 * (1.0 + std::abs(m))) active_.push_back(k);
        }
        const std::size_t a = active_.size();
        switch (basis.family) {
        case BasisFamily::polynomial: {
            lead_ = basis.leading_modes == 0 ? a : std::min(a, basis.leading_modes);
            std::vector<std::uint8_t> e(lead_, 0);
            enumerate(e, 0, basis.degree);
            count_ = exps_.size() / std::max<std::size_t>(lead_, 1) + (a - lead_);
            if (lead_ == 0) count_ = 1 + a;
            break;
        }
        case BasisFamily::modewise: count_ = 1 + a * static_cast<std::size_t>(basis.degree); break;
        case BasisFamily::radial: {
            const std::size_t m = std::min(basis.centers, n);
            for (std::size_t c = 0; c < m; ++c)
                for (std::size_t i : active_) centers_.push_back((X[c * d + i] - mu_[i]) / sd_[i]);
            count_ = 1 + a + m;
            break;
        }
        }
    }

    [[nodiscard]] std::size_t size() const noexcept { return count_; }
    [[nodiscard]] std::size_t input_dim() const noexcept { return dim_; }
    [[nodiscard]] const std::vector<std::size_t>& active() const noexcept { return active_; }
    [[nodiscard]] const RegressionBasis& basis() const noexcept { return basis_; }

    void eval(std::span<const double> x, double* out) const {
        const std::size_t a = active_.size();
        thread_local std::vector<double> z;
        z.resize(a);
        for (std::size_t i = 0; i < a; ++i) z[i] = (x[active_[i]] - mu_[active_[i]]) / sd_[active_[i]];
        std::size_t f = 0;
        switch (basis_.family) {
        case BasisFamily::polynomial: {
            const int D = basis_.degree;
            thread_local std::vector<double> pw;
            pw.assign(lead_ * static_cast<std::size_t>(D + 1), 1.0);
            for (std::size_t i = 0; i < lead_; ++i)
                for (int q = 1; q <= D; ++q) pw[i * (D + 1) + q] = pw[i * (D + 1) + q - 1] * z[i];
            if (lead_ == 0) {
                out[f++] = 1.0;
            } else {
                const std::size_t terms = exps_.size() / lead_;
                for (std::size_t t = 0; t < terms; ++t) {
                    double v = 1.0;
                    const std::uint8_t* e = &exps_[t * lead_];
                    for (std::size_t i = 0; i < lead_; ++i)
                        if (e[i]) v *= pw[i * (D + 1) + e[i]];
                    out[f++] = v;
                }
            }
            for (std::size_t i = lead_; i < a; ++i) out[f++] = z[i];
            break;
        }
        case BasisFamily::modewise:
            out[f++] = 1.0;
            for (std::size_t i = 0; i < a; ++i) {
                double v = 1.0;
                for (int q = 1; q <= basis_.degree; ++q) out[f++] = (v *= z[i]);
            }
            break;
        case BasisFamily::radial: {
            out[f++] = 1.0;
            for (std::size_t i = 0; i < a; ++i) out[f++] = z[i];
            const std::size_t m = a ? centers_.size() / a : 0;
            const double s2 = 2.0 * basis_.width * basis_.width;
            for (std::size_t c = 0; c < m; ++c) {
                double r2 = 0.0;
                for (std::size_t i = 0; i < a; ++i) r2 += (z[i] - centers_[c * a + i]) * (z[i] - centers_[c * a + i]);
                out[f++] = std::exp(-r2 / s2);
            }
            break;
        }
        }
    }

    [[nodiscard]] Eigen::MatrixXd design(std::span<const double> X, std::size_t n) const {
        const auto rows = static_cast<Eigen::Index>(n);
        Eigen::MatrixXd M(rows, static_cast<Eigen::Index>(count_));
        if (basis_.family != BasisFamily::polynomial || lead_ == 0) {
            std::vector<double> row(count_);
            for (std::size_t p = 0; p < n; ++p) {
                eval(X.subspan(p * dim_, dim_), row.data());
                for (std::size_t f = 0; f < count_; ++f) M(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(f)) = row[f];
            }
            return M;
        }
        // column-wise, same multiplication order as eval
        const std::size_t a = active_.size();
        const int D = basis_.degree;
        Eigen::MatrixXd Zs(rows, static_cast<Eigen::Index>(a));
        for (std::size_t i = 0; i < a; ++i) {
            const std::size_t k = active_[i];
            for (std::size_t p = 0; p < n; ++p) Zs(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = (X[p * dim_ + k] - mu_[k]) / sd_[k];
        }
        Eigen::MatrixXd P(rows, static_cast<Eigen::Index>(lead_ * static_cast<std::size_t>(D)));
        for (std::size_t i = 0; i < lead_; ++i) {
            const auto c0 = static_cast<Eigen::Index>(i * static_cast<std::size_t>(D));
            P.col(c0) = Zs.col(static_cast<Eigen::Index>(i));
            for (int q = 1; q < D; ++q) P.col(c0 + q) = P.col(c0 + q - 1).cwiseProduct(Zs.col(static_cast<Eigen::Index>(i)));
        }
        const std::size_t terms = exps_.size() / lead_;
        Eigen::Index f = 0;
        for (std::size_t t = 0; t < terms; ++t, ++f) {
            const std::uint8_t* e = &exps_[t * lead_];
            auto col = M.col(f);
            col.setOnes();
            for (std::size_t i = 0; i < lead_; ++i)
                if (e[i]) col = col.cwiseProduct(P.col(static_cast<Eigen::Index>(i * static_cast<std::size_t>(D)) + e[i] - 1));
        }
        for (std::size_t i = lead_; i < a; ++i, ++f) M.col(f) = Zs.col(static_cast<Eigen::Index>(i));
        return M;
    }

private:
    void enumerate(std::vector<std::uint8_t>& e, std::size_t i, int left) {
        if (i == e.size()) {
            exps_.insert(exps_.end(), e.begin(), e.end());
            return;
        }
        for (int q = 0; q <= left; ++q) {
            e[i] = static_cast<std::uint8_t>(q);
            enumerate(e, i + 1, left - q);
        }
        e[i] = 0;
    }

    RegressionBasis basis_;
    std::size_t dim_ = 0, lead_ = 0, count_ = 1;
    std::vector<std::size_t> active_;
    std::vector<double> mu_, sd_, centers_;
    std::vector<std::uint8_t> exps_;
};

/// Factorized ridge normal equations for one design matrix; solves many
/// right-hand sides against the same slice.
class SliceSolver {
public:
    SliceSolver(const Eigen::MatrixXd& design, double ridge, std::vector<std::string>* warnings = nullptr)
        : phi_(&design) {
        const auto p = design.cols();
        Eigen::MatrixXd G = Eigen::MatrixXd::Zero(p, p);
        G.selfadjointView<Eigen::Lower>().rankUpdate(design.transpose());
        G = G.selfadjointView<Eigen::Lower>();
        const double scale = std::max(G.trace() / static_cast<double>(p), 1e-300);
        ridge_ = ridge * scale;
        for (int attempt = 0;; ++attempt) {
            Eigen::MatrixXd A = G;
            A.diagonal().array() += ridge_;
            ldlt_.compute(A);
            rcond_ = ldlt_.rcond();
            if (ldlt_.info() == Eigen::Success && rcond_ >= 1e-12) break;
            if (attempt >= 8) throw std::runtime_error("regression: normal equations singular after ridge escalation");
            ridge_ = std::max(ridge_ * 100.0, 1e-14 * scale);
            ++escalations_;
            if (warnings) {
                std::ostringstream os;
                os << "regression: rank deficiency (rcond " << rcond_ << "), ridge escalated to " << ridge_ / scale;
                warnings->push_back(os.str());
            }
        }
    }

    [[nodiscard]] Eigen::MatrixXd solve(const Eigen::MatrixXd& targets) const {
        return ldlt_.solve(phi_->transpose() * targets);
    }
    [[nodiscard]] Eigen::VectorXd solve(const Eigen::VectorXd& target) const {
        return ldlt_.solve(phi_->transpose() * target);
    }
    [[nodiscard]] double ridge() const noexcept { return ridge_; }
    [[nodiscard]] double rcond() const noexcept { return rcond_; }
    [[nodiscard]] int escalations() const noexcept { return escalations_; }

private:
    const Eigen::MatrixXd* phi_;
    Eigen::LDLT<Eigen::MatrixXd> ldlt_;
    double ridge_ = 0.0, rcond_ = 0.0;
    int escalations_ = 0;
};

inline void check_overfit(std::size_t features, std::size_t n_paths) {
    if (features * 10 >= n_paths) {
        std::ostringstream os;
        os << "regression: " << features << " features needs more than " << 10 * features << " paths (have " << n_paths
           << ")";
        throw std::invalid_argument(os.str());
    }
}

/// Frozen regression function x -> coef^T features(x).
struct SliceFit {
    FeatureMap features;
    Eigen::MatrixXd coef; // features x outputs

    [[nodiscard]] std::size_t outputs() const { return static_cast<std::size_t>(coef.cols()); }
    void eval(std::span<const double> x, std::span<double> out) const {
        thread_local std::vector<double> f;
        f.resize(features.size());
        features.eval(x, f.data());
        for (std::size_t o = 0; o < out.size(); ++o) {
            double s = 0.0;
            for (std::size_t i = 0; i < f.size(); ++i) s += coef(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(o)) * f[i];
            out[o] = s;
        }
    }
    [[nodiscard]] double eval(std::span<const double> x) const {
        double v = 0.0;
        eval(x, {&v, 1});
        return v;
    }
};

/// One-shot fit of targets (n x m) on the features of X (n x d).
inline SliceFit fit_slice(const RegressionBasis& basis, std::span<const double> X, std::size_t n, std::size_t d,
                          const Eigen::MatrixXd& targets, std::vector<std::string>* warnings = nullptr) {
    SliceFit fit{FeatureMap(basis, X, n, d), {}};
    check_overfit(fit.features.size(), n);
    const Eigen::MatrixXd Phi = fit.features.design(X, n);
    const SliceSolver solver(Phi, basis.ridge, warnings);
    fit.coef = solver.solve(targets);
    return fit;
}

} // namespace bsdelab
