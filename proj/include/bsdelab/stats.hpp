#pragma once

// Monte-Carlo summaries, paired comparisons and log-log scaling fits.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <span>
#include <stdexcept>
#include <vector>

namespace bsdelab {

/// Neumaier-compensated accumulator; result independent of summation order to
/// within a few ulps of the exact sum.
class CompensatedSum {
public:
    void add(double x) noexcept {
        const double t = sum_ + x;
        if (std::abs(sum_) >= std::abs(x))
            comp_ += (sum_ - t) + x;
        else
            comp_ += (x - t) + sum_;
        sum_ = t;
    }
    [[nodiscard]] double value() const noexcept { return sum_ + comp_; }

private:
    double sum_ = 0.0;
    double comp_ = 0.0;
};

inline double compensated_sum(std::span<const double> xs) {
    CompensatedSum s;
    for (double x : xs) s.add(x);
    return s.value();
}

/// Standard normal quantile (Acklam's rational approximation refined by one
/// Halley step).
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("normal_quantile: p must lie in (0,1)");
    static constexpr double a[] = {-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
                                   1.383577518672690e+02,  -3.066479806614716e+01, 2.506628277459239e+00};
    static constexpr double b[] = {-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
                                   6.680131188771972e+01,  -1.328068155288572e+01};
    static constexpr double c[] = {-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
                                   -2.549732539343734e+00, 4.374664141464968e+00,  2.938163982698783e+00};
    static constexpr double d[] = {7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
                                   3.754408661907416e+00};
    const double plow = 0.02425;
    double x;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        x = (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    } else if (p <= 1.0 - plow) {
        const double q = p - 0.5, r = q * q;
        x = (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
            (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
    } else {
        const double q = std::sqrt(-2.0 * std::log(1.0 - p));
        x = -(((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
            ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    const double e = 0.5 * std::erfc(-x / std::numbers::sqrt2) - p;
    const double u = e * std::sqrt(2.0 * std::numbers::pi) * std::exp(x * x / 2.0);
    return x - u / (1.0 + x * u / 2.0);
}

struct McSummary {
    double mean = 0.0;
    double se = 0.0;
    std::size_t n = 0;
    double level = 0.95;

    [[nodiscard]] double half_width() const { return normal_quantile(0.5 + level / 2.0) * se; }
    [[nodiscard]] double lower() const { return mean - half_width(); }
    [[nodiscard]] double upper() const { return mean + half_width(); }
    /// |mean - reference| / se; infinite when se == 0 and the values differ.
    [[nodiscard]] double z_score(double reference) const {
        const double d = mean - reference;
        if (se > 0.0) return d / se;
        return d == 0.0 ? 0.0 : std::copysign(std::numeric_limits<double>::infinity(), d);
    }
};

inline McSummary summarize(std::span<const double> xs, double level = 0.95) {
    if (xs.size() < 2) throw std::invalid_argument("summarize: need at least two samples");
    const double n = static_cast<double>(xs.size());
    const double mean = compensated_sum(xs) / n;
    CompensatedSum ss;
    for (double x : xs) ss.add((x - mean) * (x - mean));
    const double var = std::max(0.0, ss.value() / (n - 1.0));
    return {mean, std::sqrt(var / n), xs.size(), level};
}

inline McSummary paired_difference(std::span<const double> a, std::span<const double> b, double level = 0.95) {
    if (a.size() != b.size()) throw std::invalid_argument("paired_difference: sample sizes differ");
    std::vector<double> d(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) d[i] = a[i] - b[i];
    return summarize(d, level);
}

/// Combined standard error of a difference of independent estimates.
inline double combined_se(double se_a, double se_b) { return std::hypot(se_a, se_b); }

struct ScalingPoint {
    double x;
    double y;
};

struct ScalingFit {
    std::vector<double> abscissae;
    std::vector<double> ordinates;
    double slope = 0.0;
    double intercept = 0.0;
    double slope_se = 0.0;
    double r_squared = 0.0;
    bool curvature_trimmed = false;
};

namespace detail {
struct LineFit {
    double slope, intercept, slope_se, r2;
};
inline LineFit ols_line(std::span<const double> u, std::span<const double> v) {
    const double n = static_cast<double>(u.size());
    double mu = 0, mv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) mu += u[i], mv += v[i];
    mu /= n, mv /= n;
    double suu = 0, suv = 0, svv = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        suu += (u[i] - mu) * (u[i] - mu);
        suv += (u[i] - mu) * (v[i] - mv);
        svv += (v[i] - mv) * (v[i] - mv);
    }
    const double slope = suv / suu;
    const double intercept = mv - slope * mu;
    double rss = 0;
    for (std::size_t i = 0; i < u.size(); ++i) {
        const double r = v[i] - intercept - slope * u[i];
        rss += r * r;
    }
    const double se = u.size() > 2 ? std::sqrt(rss / (n - 2.0) / suu) : 0.0;
    const double r2 = svv > 0 ? 1.0 - rss / svv : 1.0;
    return {slope, intercept, se, r2};
}

/// z-score of the quadratic coefficient in a least-squares quadratic fit.
inline double curvature_z(std::span<const double> u, std::span<const double> v) {
    const std::size_t n = u.size();
    if (n < 4) return 0.0;
    double mu = 0;
    for (double x : u) mu += x;
    mu /= static_cast<double>(n);
    // Normal equations for v = c0 + c1 (u-mu) + c2 (u-mu)^2.
    double S[3][3] = {}, r[3] = {};
    for (std::size_t i = 0; i < n; ++i) {
        const double d = u[i] - mu;
        const double f[3] = {1.0, d, d * d};
        for (int a = 0; a < 3; ++a) {
            r[a] += f[a] * v[i];
            for (int b = 0; b < 3; ++b) S[a][b] += f[a] * f[b];
        }
    }
    // Invert the 3x3 system by cofactors.
    const double det = S[0][0] * (S[1][1] * S[2][2] - S[1][2] * S[2][1]) -
                       S[0][1] * (S[1][0] * S[2][2] - S[1][2] * S[2][0]) +
                       S[0][2] * (S[1][0] * S[2][1] - S[1][1] * S[2][0]);
    if (det == 0.0) return 0.0;
    double inv[3][3];
    inv[0][0] = (S[1][1] * S[2][2] - S[1][2] * S[2][1]) / det;
    inv[0][1] = (S[0][2] * S[2][1] - S[0][1] * S[2][2]) / det;
    inv[0][2] = (S[0][1] * S[1][2] - S[0][2] * S[1][1]) / det;
    inv[1][0] = (S[1][2] * S[2][0] - S[1][0] * S[2][2]) / det;
    inv[1][1] = (S[0][0] * S[2][2] - S[0][2] * S[2][0]) / det;
    inv[1][2] = (S[0][2] * S[1][0] - S[0][0] * S[1][2]) / det;
    inv[2][0] = (S[1][0] * S[2][1] - S[1][1] * S[2][0]) / det;
    inv[2][1] = (S[0][1] * S[2][0] - S[0][0] * S[2][1]) / det;
    inv[2][2] = (S[0][0] * S[1][1] - S[0][1] * S[1][0]) / det;
    double c[3];
    for (int a = 0; a < 3; ++a) c[a] = inv[a][0] * r[0] + inv[a][1] * r[1] + inv[a][2] * r[2];
    double rss = 0;
    double scale = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = u[i] - mu;
        const double e = v[i] - (c[0] + c[1] * d + c[2] * d * d);
        rss += e * e;
        scale = std::max(scale, std::abs(v[i]));
    }
    // Residuals at rounding level carry no curvature information.
    if (std::abs(c[2]) <= 1e-10 * std::max(1.0, scale)) return 0.0;
    const double sigma2 = n > 3 ? rss / static_cast<double>(n - 3) : 0.0;
    const double se = std::sqrt(sigma2 * inv[2][2]);
    return se > 0 ? c[2] / se : std::numeric_limits<double>::infinity();
}
} // namespace detail

/// OLS on (log x, log y). When the log-log data curve significantly
/// (quadratic-term z-score > 3) the two largest abscissae are dropped, provided
/// at least four points spanning a decade remain.
inline ScalingFit fit_scaling_exponent(std::vector<ScalingPoint> points) {
    if (points.size() < 4) throw std::invalid_argument("fit_scaling_exponent: need at least 4 points");
    for (const auto& p : points) {
        if (!(p.y > 0.0) || !std::isfinite(p.y)) throw std::invalid_argument("fit_scaling_exponent: nonpositive ordinate");
        if (!(p.x > 0.0) || !std::isfinite(p.x)) throw std::invalid_argument("fit_scaling_exponent: nonpositive abscissa");
    }
    std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.x < b.x; });
    if (points.back().x < 10.0 * points.front().x)
        throw std::invalid_argument("fit_scaling_exponent: abscissae must span at least one decade");
    if (points.front().x == points.back().x) throw std::invalid_argument("fit_scaling_exponent: degenerate abscissae");

    auto logs = [](const std::vector<ScalingPoint>& ps, std::vector<double>& u, std::vector<double>& v) {
        u.clear(), v.clear();
        for (const auto& p : ps) u.push_back(std::log(p.x)), v.push_back(std::log(p.y));
    };
    std::vector<double> u, v;
    logs(points, u, v);
    ScalingFit fit;
    if (std::abs(detail::curvature_z(u, v)) > 3.0 && points.size() >= 6 &&
        points[points.size() - 3].x >= 10.0 * points.front().x) {
        points.resize(points.size() - 2);
        logs(points, u, v);
        fit.curvature_trimmed = true;
    }
    const auto line = detail::ols_line(u, v);
    for (const auto& p : points) fit.abscissae.push_back(p.x), fit.ordinates.push_back(p.y);
    fit.slope = line.slope;
    fit.intercept = line.intercept;
    fit.slope_se = line.slope_se;
    fit.r_squared = line.r2;
    return fit;
}

} // namespace bsdelab
