#ifndef ODSMI_NUMKIT_BVN_HPP
#define ODSMI_NUMKIT_BVN_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <utility>

#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"
#include "odsmi/numkit/normal.hpp"

namespace odsmi::numkit {

namespace detail {

struct GaussLegendre {
    const double* x;
    const double* w;
    int n;
};

// Half rules on [-1, 1] (positive nodes); used mirrored as 1 - x and 1 + x.
inline constexpr double gl6_x[] = {0.9324695142031522, 0.6612093864662647, 0.2386191860831970};
inline constexpr double gl6_w[] = {0.1713244923791705, 0.3607615730481384, 0.4679139345726904};
inline constexpr double gl12_x[] = {0.9815606342467191, 0.9041172563704750, 0.7699026741943050,
                                    0.5873179542866171, 0.3678314989981802, 0.1252334085114692};
inline constexpr double gl12_w[] = {0.04717533638651177, 0.1069393259953183, 0.1600783285433464,
                                    0.2031674267230659,  0.2334925365383547, 0.2491470458134029};
inline constexpr double gl20_x[] = {0.9931285991850949, 0.9639719272779138, 0.9122344282513259,
                                    0.8391169718222188, 0.7463319064601508, 0.6360536807265150,
                                    0.5108670019508271, 0.3737060887154196, 0.2277858511416451,
                                    0.07652652113349733};
inline constexpr double gl20_w[] = {0.01761400713915212, 0.04060142980038694, 0.06267204833410906,
                                    0.08327674157670475, 0.1019301198172404,  0.1181945319615184,
                                    0.1316886384491766,  0.1420961093183821,  0.1491729864726037,
                                    0.1527533871307259};

inline GaussLegendre rule_for(double abs_r) {
    if (abs_r < 0.3) {
        return {gl6_x, gl6_w, 3};
    }
    if (abs_r < 0.75) {
        return {gl12_x, gl12_w, 6};
    }
    return {gl20_x, gl20_w, 10};
}

} // namespace detail

// Upper orthant P(X > h, Y > k) of the standard bivariate normal with
// correlation r (Drezner-Wesolowsky / Genz series with Gauss-Legendre rules,
// double-precision accurate). Bounds may be infinite.
inline double bvn_upper(double h, double k, double r) {
    constexpr double inf = std::numeric_limits<double>::infinity();
    if (h == inf || k == inf) {
        return 0.0;
    }
    if (h == -inf) {
        return k == -inf ? 1.0 : std_normal_cdf(-k);
    }
    if (k == -inf) {
        return std_normal_cdf(-h);
    }
    if (r == 0.0) {
        return std_normal_cdf(-h) * std_normal_cdf(-k);
    }
    constexpr double two_pi = 2.0 * std::numbers::pi;
    const auto rule = detail::rule_for(std::abs(r));
    double hk = h * k;
    double bvn = 0.0;

    if (std::abs(r) < 0.925) {
        const double hs = 0.5 * (h * h + k * k);
        const double asr = 0.5 * std::asin(r);
        for (int i = 0; i < rule.n; ++i) {
            for (double node : {1.0 - rule.x[i], 1.0 + rule.x[i]}) {
                const double sn = std::sin(asr * node);
                bvn += rule.w[i] * std::exp((sn * hk - hs) / (1.0 - sn * sn));
            }
        }
        bvn = bvn * asr / two_pi + std_normal_cdf(-h) * std_normal_cdf(-k);
        return std::clamp(bvn, 0.0, 1.0);
    }

    if (r < 0.0) {
        k = -k;
        hk = -hk;
    }
    if (std::abs(r) < 1.0) {
        const double as = 1.0 - r * r;
        double a = std::sqrt(as);
        const double bs = (h - k) * (h - k);
        double asr = -0.5 * (bs / as + hk);
        const double c = (4.0 - hk) / 8.0;
        const double d = (12.0 - hk) / 80.0;
        if (asr > -100.0) {
            bvn = a * std::exp(asr) * (1.0 - c * (bs - as) * (1.0 - d * bs) / 3.0 + c * d * as * as);
        }
        if (hk > -100.0) {
            const double b = std::sqrt(bs);
            const double sp = std::sqrt(two_pi) * std_normal_cdf(-b / a);
            bvn -= std::exp(-0.5 * hk) * sp * b * (1.0 - c * bs * (1.0 - d * bs) / 3.0);
        }
        a *= 0.5;
        double sum = 0.0;
        for (int i = 0; i < rule.n; ++i) {
            for (double node : {1.0 - rule.x[i], 1.0 + rule.x[i]}) {
                const double xs = (a * node) * (a * node);
                const double asr_i = -0.5 * (bs / xs + hk);
                if (asr_i > -100.0) {
                    const double sp = 1.0 + c * xs * (1.0 + 5.0 * d * xs);
                    const double rs = std::sqrt(1.0 - xs);
                    const double ep = std::exp(-0.5 * hk * xs / ((1.0 + rs) * (1.0 + rs))) / rs;
                    sum += rule.w[i] * std::exp(asr_i) * (sp - ep);
                }
            }
        }
        bvn = (a * sum - bvn) / two_pi;
    }
    if (r > 0.0) {
        bvn += std_normal_cdf(-std::max(h, k));
    } else if (h >= k) {
        bvn = -bvn;
    } else {
        const double span = h < 0.0 ? std_normal_cdf(k) - std_normal_cdf(h)
                                    : std_normal_cdf(-h) - std_normal_cdf(-k);
        bvn = span - bvn;
    }
    return std::clamp(bvn, 0.0, 1.0);
}

// Lower orthant P(X <= h, Y <= k) for the standard bivariate normal.
inline double bvn_cdf(double h, double k, double r) { return bvn_upper(-h, -k, r); }

inline double bvn_density(double x, double y, double r) {
    if (std::isinf(x) || std::isinf(y)) {
        return 0.0;
    }
    const double s = 1.0 - r * r;
    return std::exp(-(x * x - 2.0 * r * x * y + y * y) / (2.0 * s)) / (2.0 * std::numbers::pi * std::sqrt(s));
}

using Pair = std::array<double, 2>;

// Rectangle probability and its derivatives with respect to the mean and the
// three distinct covariance entries.
struct RectProb {
    double prob = 0.0;
    Pair d_mean{0.0, 0.0};
    double d_var1 = 0.0;
    double d_cov12 = 0.0;
    double d_var2 = 0.0;
};

namespace detail {

struct Standardized {
    double s1, s2, r;
};

inline Standardized standardize(const SymMatrix& cov) {
    if (cov.dim() != 2) {
        throw SpecError("bivariate normal: covariance must be 2x2");
    }
    const double v1 = cov(0, 0);
    const double v2 = cov(1, 1);
    if (!(v1 > 0.0) || !(v2 > 0.0)) {
        throw FactorizationError("bivariate normal: singular covariance (non-positive variance)");
    }
    const double s1 = std::sqrt(v1);
    const double s2 = std::sqrt(v2);
    const double r = cov(0, 1) / (s1 * s2);
    if (!(std::abs(r) < 1.0 - 1e-12)) {
        throw FactorizationError("bivariate normal: singular covariance (|rho| = " + std::to_string(std::abs(r)) + ")");
    }
    return {s1, s2, r};
}

inline double scaled(double bound, double mean, double sd) {
    if (std::isinf(bound)) {
        return bound;
    }
    return (bound - mean) / sd;
}

} // namespace detail

inline double bvn_rect_prob(const Pair& lo, const Pair& hi, const Pair& mean, const SymMatrix& cov) {
    if (!(lo[0] <= hi[0]) || !(lo[1] <= hi[1])) {
        throw SpecError("bvn_rect_prob: lower bound exceeds upper bound");
    }
    const auto st = detail::standardize(cov);
    const double l1 = detail::scaled(lo[0], mean[0], st.s1);
    const double h1 = detail::scaled(hi[0], mean[0], st.s1);
    const double l2 = detail::scaled(lo[1], mean[1], st.s2);
    const double h2 = detail::scaled(hi[1], mean[1], st.s2);
    const double p = bvn_upper(l1, l2, st.r) - bvn_upper(h1, l2, st.r) - bvn_upper(l1, h2, st.r) +
                     bvn_upper(h1, h2, st.r);
    return std::clamp(p, 0.0, 1.0);
}

inline RectProb bvn_rect_prob_grad(const Pair& lo, const Pair& hi, const Pair& mean, const SymMatrix& cov) {
    RectProb out;
    out.prob = bvn_rect_prob(lo, hi, mean, cov);
    const auto st = detail::standardize(cov);
    const double r = st.r;
    const double rc = std::sqrt(1.0 - r * r);
    const double v1 = cov(0, 0);
    const double v2 = cov(1, 1);

    // Lower-orthant corners of the rectangle with inclusion-exclusion signs.
    const std::array<std::pair<Pair, double>, 4> corners = {{
        {{hi[0], hi[1]}, 1.0},
        {{lo[0], hi[1]}, -1.0},
        {{hi[0], lo[1]}, -1.0},
        {{lo[0], lo[1]}, 1.0},
    }};
    for (const auto& [corner, sign] : corners) {
        const double x = detail::scaled(corner[0], mean[0], st.s1);
        const double y = detail::scaled(corner[1], mean[1], st.s2);
        if (x == -std::numeric_limits<double>::infinity() || y == -std::numeric_limits<double>::infinity()) {
            continue; // corner contributes the constant 0
        }
        double fx = 0.0;
        double fy = 0.0;
        if (!std::isinf(x)) {
            fx = std_normal_pdf(x) * (std::isinf(y) ? 1.0 : std_normal_cdf((y - r * x) / rc));
        }
        if (!std::isinf(y)) {
            fy = std_normal_pdf(y) * (std::isinf(x) ? 1.0 : std_normal_cdf((x - r * y) / rc));
        }
        const double fr = bvn_density(x, y, r);
        out.d_mean[0] += sign * fx * (-1.0 / st.s1);
        out.d_mean[1] += sign * fy * (-1.0 / st.s2);
        const double xs = std::isinf(x) ? 0.0 : x;
        const double ys = std::isinf(y) ? 0.0 : y;
        out.d_var1 += sign * (fx * (-xs / (2.0 * v1)) + fr * (-r / (2.0 * v1)));
        out.d_var2 += sign * (fy * (-ys / (2.0 * v2)) + fr * (-r / (2.0 * v2)));
        out.d_cov12 += sign * fr / (st.s1 * st.s2);
    }
    return out;
}

} // namespace odsmi::numkit

#endif
