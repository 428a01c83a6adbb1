#ifndef ODSMI_ACL_HPP
#define ODSMI_ACL_HPP

#include <cmath>
#include <limits>
#include <optional>
#include <string>

#include "odsmi/design.hpp"
#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/numkit/bvn.hpp"
#include "odsmi/numkit/normal.hpp"
#include "odsmi/numkit/optimize.hpp"

namespace odsmi::acl {

using design::DesignSpec;
using design::SummarySpec;
using lmm::Theta;

// Q_i | X_i ~ N(mean, cov)
struct QMoments {
    Vector mean;
    SymMatrix cov;
};

inline QMoments q_moments(const Theta& theta, const Vector& times, const Matrix& x, const SummarySpec& spec) {
    const Matrix w = spec.select(design::ols_weights(times));
    const Matrix v = lmm::marginal_cov(theta, times).matrix();
    return {w * (x * theta.beta), SymMatrix(w * v * w.transpose(), "summary covariance V_q")};
}

inline QMoments q_moments(const Theta& theta, const lmm::Subject& subject, const lmm::ModelSpec& model,
                          int exposure_value, const SummarySpec& spec) {
    return q_moments(theta, subject.times, lmm::design_matrix(subject, model, exposure_value), spec);
}

// Smallest ascertainment probability treated as nonzero.
inline constexpr double min_ascertainment = 1e-300;

// log sum_k pi_k P(Q in R_k | X; theta). The complement region (if any)
// takes 1 - sum of the rectangles, so A = pi_c + sum_{k != c} (pi_k - pi_c) P_k.
// `gradient`, when given, receives d log A / d theta on the transformed scale.
inline double log_ascertainment(const Theta& theta, const Vector& times, const Matrix& x, const DesignSpec& design,
                                Vector* gradient = nullptr) {
    const auto& spec = design.summary;
    const int dim = spec.dim();
    const Matrix w = spec.select(design::ols_weights(times));
    const Matrix v = lmm::marginal_cov(theta, times).matrix();
    const Matrix wx = w * x;
    const Vector mq = wx * theta.beta;
    const Matrix vq = w * v * w.transpose();

    double base = 0.0;
    for (std::size_t k = 0; k < design.regions.size(); ++k) {
        if (design.regions[k].complement) base = design.probabilities[k];
    }

    const auto p = theta.beta.size();
    double a = base;
    Vector d_mean = Vector::Zero(dim);
    Matrix d_cov = Matrix::Zero(dim, dim); // d A / d Vq entries, off-diagonal counted once
    for (std::size_t k = 0; k < design.regions.size(); ++k) {
        const auto& r = design.regions[k];
        if (r.complement) continue;
        const double weight = design.probabilities[k] - base;
        if (weight == 0.0) continue;
        if (dim == 1) {
            const auto ip = numkit::interval_prob(r.bounds[0].lo, r.bounds[0].hi, mq[0], vq(0, 0));
            a += weight * ip.prob;
            d_mean[0] += weight * ip.d_mean;
            d_cov(0, 0) += weight * ip.d_var;
        } else {
            const SymMatrix cov(vq, "summary covariance V_q");
            const numkit::Pair lo{r.bounds[0].lo, r.bounds[1].lo}, hi{r.bounds[0].hi, r.bounds[1].hi};
            const numkit::Pair m{mq[0], mq[1]};
            if (gradient) {
                const auto rp = numkit::bvn_rect_prob_grad(lo, hi, m, cov);
                a += weight * rp.prob;
                d_mean[0] += weight * rp.d_mean[0];
                d_mean[1] += weight * rp.d_mean[1];
                d_cov(0, 0) += weight * rp.d_var1;
                d_cov(0, 1) += weight * rp.d_cov12;
                d_cov(1, 1) += weight * rp.d_var2;
            } else {
                a += weight * numkit::bvn_rect_prob(lo, hi, m, cov);
            }
        }
    }
    if (!(a > min_ascertainment)) {
        throw DomainError("ascertainment probability underflow (log A < log 1e-300)");
    }
    if (gradient) {
        gradient->setZero(theta.size());
        gradient->head(p) = wx.transpose() * d_mean / a;
        const auto dv = lmm::marginal_cov_derivatives(theta, times);
        for (Eigen::Index j = 0; j < lmm::n_variance_params; ++j) {
            const Matrix dvq = w * dv[j] * w.transpose();
            double s = d_cov(0, 0) * dvq(0, 0);
            if (dim == 2) s += d_cov(0, 1) * dvq(0, 1) + d_cov(1, 1) * dvq(1, 1);
            (*gradient)[p + j] = s / a;
        }
    }
    return std::log(a);
}

inline double log_ascertainment(const Theta& theta, const lmm::Subject& subject, const lmm::ModelSpec& model,
                                int exposure_value, const DesignSpec& design) {
    return log_ascertainment(theta, subject.times, lmm::design_matrix(subject, model, exposure_value), design);
}

inline void require_some_sampling(const DesignSpec& design) {
    design.validate();
    for (double p : design.probabilities) {
        if (p > 0.0) return;
    }
    throw DesignError("design: every sampling probability is zero (ascertainment correction is -inf)");
}

// Sum over pattern groups of count * [log f - log A]; the parameter-free
// log pi(q_i) is omitted, so values are defined up to a constant.
inline double acl_loglik(const Theta& theta, const lmm::PatternStats& stats, const DesignSpec& design,
                         Vector* gradient = nullptr) {
    double ll = lmm::loglik(theta, stats, gradient);
    Vector g;
    for (const auto& grp : stats.groups) {
        ll -= grp.count * log_ascertainment(theta, grp.times, grp.x, design, gradient ? &g : nullptr);
        if (gradient) *gradient -= grp.count * g;
    }
    return ll;
}

inline double acl_loglik(const Theta& theta, const lmm::Cohort& cohort, const DesignSpec& design) {
    return acl_loglik(theta, lmm::pattern_stats(cohort, lmm::Subset::sampled), design);
}

inline numkit::Objective acl_objective(const lmm::PatternStats& stats, const DesignSpec& design) {
    numkit::Objective obj;
    obj.value = [&stats, &design](const Vector& v) {
        try {
            return acl_loglik(Theta::from_vector(v), stats, design);
        } catch (const FactorizationError&) {
            return -std::numeric_limits<double>::infinity();
        } catch (const DomainError&) {
            return -std::numeric_limits<double>::infinity();
        }
    };
    obj.gradient = [&stats, &design](const Vector& v) {
        Vector g;
        acl_loglik(Theta::from_vector(v), stats, design, &g);
        return g;
    };
    return obj;
}

// CD analysis: maximize the corrected likelihood over sampled subjects,
// starting from plain ML on the same subjects unless `init` is given.
inline lmm::FitResult fit_cd(const lmm::PatternStats& stats, const DesignSpec& design,
                             const std::optional<Theta>& init = std::nullopt, const numkit::OptimOptions& opts = {}) {
    require_some_sampling(design);
    if (stats.n_subjects == 0) throw SpecError("fit_cd: no sampled subjects");
    Theta start;
    if (init) {
        start = *init;
    } else {
        const auto ml = lmm::fit_ml(stats, std::nullopt, {opts.gradient_tol, opts.step_tol, opts.max_iterations, false});
        start = ml.theta_hat;
    }
    auto fit = lmm::fit_objective(acl_objective(stats, design), start, stats.n_subjects, opts);
    fit.message += " (log-likelihood up to an additive constant)";
    return fit;
}

inline lmm::FitResult fit_cd(const lmm::Cohort& cohort, const DesignSpec& design,
                             const std::optional<Theta>& init = std::nullopt, const numkit::OptimOptions& opts = {}) {
    return fit_cd(lmm::pattern_stats(cohort, lmm::Subset::sampled), design, init, opts);
}

} // namespace odsmi::acl

#endif
