#ifndef ODSMI_NUMKIT_NORMAL_HPP
#define ODSMI_NUMKIT_NORMAL_HPP

#include <cmath>
#include <numbers>

#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"

namespace odsmi::numkit {

inline constexpr double log_2pi = 1.8378770664093454836;

inline double std_normal_pdf(double x) {
    if (std::isinf(x)) {
        return 0.0;
    }
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

// Phi(x). erfc keeps full relative accuracy in the lower tail.
inline double std_normal_cdf(double x) {
    if (std::isnan(x)) {
        throw DomainError("std_normal_cdf: NaN argument");
    }
    return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

// log N(y; mean, cov) through the Cholesky factor of cov.
inline double mvn_logpdf(const Vector& y, const Vector& mean, const SymMatrix& cov) {
    const auto n = y.size();
    if (mean.size() != n || cov.dim() != n) {
        throw SpecError("mvn_logpdf: dimension mismatch (y " + std::to_string(n) + ", mean " +
                        std::to_string(mean.size()) + ", cov " + std::to_string(cov.dim()) + ")");
    }
    const auto llt = cov.cholesky();
    const Vector z = llt.matrixL().solve(y - mean);
    return -0.5 * (static_cast<double>(n) * log_2pi + log_det(llt) + z.squaredNorm());
}

// P(lo < Q <= hi) for Q ~ N(mean, var) together with its derivatives with
// respect to mean and var.
struct IntervalProb {
    double prob = 0.0;
    double d_mean = 0.0;
    double d_var = 0.0;
};

inline IntervalProb interval_prob(double lo, double hi, double mean, double var) {
    if (!(var > 0.0)) {
        throw FactorizationError("interval_prob: variance must be positive");
    }
    const double sd = std::sqrt(var);
    const double zl = (lo - mean) / sd;
    const double zh = (hi - mean) / sd;
    IntervalProb out;
    // Upper-tail form avoids cancellation when both bounds lie far right.
    if (zl > 0.0) {
        out.prob = std_normal_cdf(-zl) - std_normal_cdf(-zh);
    } else {
        out.prob = std_normal_cdf(zh) - std_normal_cdf(zl);
    }
    const double ph = std_normal_pdf(zh);
    const double pl = std_normal_pdf(zl);
    out.d_mean = -(ph - pl) / sd;
    const double zph = std::isinf(zh) ? 0.0 : zh * ph;
    const double zpl = std::isinf(zl) ? 0.0 : zl * pl;
    out.d_var = -(zph - zpl) / (2.0 * var);
    return out;
}

} // namespace odsmi::numkit

#endif
