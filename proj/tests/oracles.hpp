// Reference computations shared by the unit tests and the acceptance binary.
// Each avoids the code path of the function it is used to check.
#ifndef ODSMI_TESTS_ORACLES_HPP
#define ODSMI_TESTS_ORACLES_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <random>

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include "odsmi/design.hpp"
#include "odsmi/lmm.hpp"

namespace oracle {

using odsmi::Matrix;
using odsmi::Vector;

// Nested adaptive Gauss-Kronrod over the standardized density; bounds
// clipped at +-12 standard deviations.
inline double quad_bvn_rect(std::array<double, 2> lo, std::array<double, 2> hi, std::array<double, 2> mean, double v1,
                            double c12, double v2) {
    using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
    const double s1 = std::sqrt(v1), s2 = std::sqrt(v2), r = c12 / (s1 * s2);
    auto clip = [](double z) { return std::clamp(z, -12.0, 12.0); };
    const double a1 = clip((lo[0] - mean[0]) / s1), b1 = clip((hi[0] - mean[0]) / s1);
    const double a2 = clip((lo[1] - mean[1]) / s2), b2 = clip((hi[1] - mean[1]) / s2);
    if (a1 >= b1 || a2 >= b2) {
        return 0.0;
    }
    const double det = 1.0 - r * r;
    auto inner = [&](double x) {
        auto dens = [&](double y) {
            return std::exp(-(x * x - 2 * r * x * y + y * y) / (2 * det)) / (2 * std::numbers::pi * std::sqrt(det));
        };
        // split at the conditional mean where the integrand peaks
        const double m = std::clamp(r * x, a2, b2);
        double v = 0.0;
        if (m > a2) v += GK::integrate(dens, a2, m, 12, 1e-13);
        if (b2 > m) v += GK::integrate(dens, m, b2, 12, 1e-13);
        return v;
    };
    double v = 0.0;
    const double mid = std::clamp(0.0, a1, b1);
    if (mid > a1) v += GK::integrate(inner, a1, mid, 12, 1e-12);
    if (b1 > mid) v += GK::integrate(inner, mid, b1, 12, 1e-12);
    return v;
}

// Monte Carlo P(sampled | X) from simulated outcome vectors.
inline double mc_sampling_prob(const odsmi::lmm::Theta& th, const odsmi::lmm::Subject& prof,
                               const odsmi::lmm::ModelSpec& spec, const odsmi::design::DesignSpec& d, int n,
                               std::mt19937_64& rng, double* se) {
    const Matrix x = odsmi::lmm::design_matrix(prof, spec, *prof.exposure);
    const Vector mu = x * th.beta;
    const Matrix l = odsmi::lmm::marginal_cov(th, prof.times).matrix().llt().matrixL();
    std::normal_distribution<double> z;
    double sum = 0.0, sum2 = 0.0;
    odsmi::lmm::Subject s = prof;
    Vector e(mu.size());
    for (int i = 0; i < n; ++i) {
        for (auto& v : e) v = z(rng);
        s.outcomes = mu + l * e;
        const double p = d.probability_of(odsmi::design::compute_summary(s, d.summary));
        sum += p;
        sum2 += p * p;
    }
    const double m = sum / n;
    *se = std::sqrt((sum2 / n - m * m) / n);
    return m;
}

// Balanced-data discriminant terms for the exposure log density ratio with
// mean mu0 + w under exposure and mu0 without:
// (a) = sum_jk nu_jk y_j w_k, (b) = 2 sum_jk nu_jk mu0_j w_k + sum_jk nu_jk w_j w_k,
// where nu = V^-1. The ratio is (a) - (b)/2.
struct DiscriminantTerms {
    double a = 0.0;
    double b = 0.0;
    double b_matrix = 0.0; // mu1' V^-1 mu1 - mu0' V^-1 mu0, for cross-checking (b)
};

inline DiscriminantTerms discriminant_terms(const Matrix& vinv, const Vector& y, const Vector& mu0, const Vector& w) {
    DiscriminantTerms d;
    double cross = 0.0, quad = 0.0;
    const auto n = y.size();
    for (Eigen::Index j = 0; j < n; ++j) {
        for (Eigen::Index k = 0; k < n; ++k) {
            d.a += vinv(j, k) * y[j] * w[k];
            cross += vinv(j, k) * mu0[j] * w[k];
            quad += vinv(j, k) * w[j] * w[k];
        }
    }
    d.b = 2 * cross + quad;
    const Vector mu1 = mu0 + w;
    d.b_matrix = mu1.dot(vinv * mu1) - mu0.dot(vinv * mu0);
    return d;
}

} // namespace oracle

#endif
