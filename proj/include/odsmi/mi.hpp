#ifndef ODSMI_MI_HPP
#define ODSMI_MI_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "odsmi/acl.hpp"
#include "odsmi/design.hpp"
#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/numkit/logistic.hpp"
#include "odsmi/rng.hpp"

namespace odsmi::mi {

using design::DesignSpec;
using lmm::Cohort;
using lmm::Subject;
using lmm::Theta;

// ---------------------------------------------------------------------------
// Imputation-model building blocks

// log f(y | Xe=1, xo) - log f(y | Xe=0, xo). Both branches share V.
inline double response_density_log_ratio(const Theta& theta, const Subject& subject, const lmm::ModelSpec& model,
                                         const Eigen::LLT<Matrix>& v_llt) {
    const Vector r1 = subject.outcomes - lmm::design_matrix(subject, model, 1) * theta.beta;
    const Vector r0 = subject.outcomes - lmm::design_matrix(subject, model, 0) * theta.beta;
    const Eigen::Index n = r1.size();
    Matrix both(n, 2);
    both << r1, r0;
    v_llt.matrixL().solveInPlace(both);
    return -0.5 * (both.col(0).squaredNorm() - both.col(1).squaredNorm());
}

inline double response_density_log_ratio(const Theta& theta, const Subject& subject, const lmm::ModelSpec& model) {
    return response_density_log_ratio(theta, subject, model, lmm::marginal_cov(theta, subject.times).cholesky());
}

// log pr(S=1 | Xe=1, xo) - log pr(S=1 | Xe=0, xo)
inline double ascertainment_log_ratio(const Theta& theta, const Subject& subject, const lmm::ModelSpec& model,
                                      const DesignSpec& design) {
    return acl::log_ascertainment(theta, subject, model, 1, design) -
           acl::log_ascertainment(theta, subject, model, 0, design);
}

// Cholesky factors of V keyed by time pattern.
class CovCache {
public:
    explicit CovCache(const Theta& theta) : theta_(theta) {}

    const Eigen::LLT<Matrix>& get(const Vector& times) {
        std::vector<double> key(times.data(), times.data() + times.size());
        auto it = cache_.find(key);
        if (it == cache_.end()) {
            it = cache_.emplace(std::move(key), lmm::marginal_cov(theta_, times).cholesky()).first;
        }
        return it->second;
    }

private:
    Theta theta_;
    std::map<std::vector<double>, Eigen::LLT<Matrix>> cache_;
};

// Marginal exposure model logit pr(Xe=1 | xo) = (1, xo)' alpha.
struct ExposureModel {
    std::vector<std::string> covariates;
    Vector alpha;
    SymMatrix covariance;

    double linear_predictor(const Subject& s) const {
        double eta = alpha[0];
        for (std::size_t k = 0; k < covariates.size(); ++k) {
            eta += alpha[static_cast<Eigen::Index>(k + 1)] * s.covariates.at(covariates[k]);
        }
        return eta;
    }
};

inline Matrix exposure_design(const std::vector<const Subject*>& subjects, const std::vector<std::string>& covariates) {
    Matrix x(static_cast<Eigen::Index>(subjects.size()), static_cast<Eigen::Index>(covariates.size() + 1));
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        const auto r = static_cast<Eigen::Index>(i);
        x(r, 0) = 1.0;
        for (std::size_t k = 0; k < covariates.size(); ++k) {
            const auto it = subjects[i]->covariates.find(covariates[k]);
            if (it == subjects[i]->covariates.end()) {
                throw SpecError("subject '" + subjects[i]->id + "': missing covariate '" + covariates[k] + "'");
            }
            x(r, static_cast<Eigen::Index>(k + 1)) = it->second;
        }
    }
    return x;
}

inline std::vector<const Subject*> sampled_subjects(const Cohort& cohort) {
    std::vector<const Subject*> out;
    for (const auto& s : cohort.subjects) {
        if (s.is_sampled()) {
            if (!s.exposure) throw SpecError("subject '" + s.id + "' sampled but exposure missing");
            out.push_back(&s);
        }
    }
    return out;
}

inline Vector exposure_vector(const std::vector<const Subject*>& subjects) {
    Vector y(static_cast<Eigen::Index>(subjects.size()));
    for (std::size_t i = 0; i < subjects.size(); ++i) y[static_cast<Eigen::Index>(i)] = *subjects[i]->exposure;
    return y;
}

// Logistic fit of Xe on the cheap covariates among sampled subjects, with
// the ascertainment log-ratio at theta as offset. The intercept and slopes
// then estimate the population (unconditional on S) exposure model.
inline ExposureModel fit_marginal_exposure(const Cohort& cohort, const Theta& theta, const DesignSpec& design,
                                           std::optional<std::vector<std::string>> covariates = std::nullopt) {
    const auto subjects = sampled_subjects(cohort);
    if (subjects.empty()) throw SpecError("fit_marginal_exposure: no sampled subjects");
    ExposureModel em;
    em.covariates = covariates ? *covariates : cohort.covariate_names();
    const Matrix x = exposure_design(subjects, em.covariates);
    Vector offset(x.rows());
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        offset[static_cast<Eigen::Index>(i)] = ascertainment_log_ratio(theta, *subjects[i], cohort.spec, design);
    }
    try {
        const auto fit = numkit::logistic_fit(exposure_vector(subjects), x, offset);
        em.alpha = fit.coefficients;
        em.covariance = fit.covariance;
    } catch (const SeparationError& e) {
        throw SeparationError(std::string(e.what()) +
                              "; the exposure model cannot be fitted on this sample, consider a design that samples "
                              "every covariate stratum");
    }
    return em;
}

inline constexpr double prob_floor = 1e-12;

// Clamps to [1e-12, 1 - 1e-12]; counts clamped values in `saturated`.
inline double saturate(double p, std::size_t* saturated) {
    if (!(p >= prob_floor)) {
        if (saturated) ++*saturated;
        return prob_floor;
    }
    if (!(p <= 1.0 - prob_floor)) {
        if (saturated) ++*saturated;
        return 1.0 - prob_floor;
    }
    return p;
}

// pr(Xe=1 | y, xo): response log-ratio plus the population exposure logit.
// No offset here: the S=1 conditioning in both factors cancels, and the
// result does not depend on the subject's sampling flag.
inline double cdmi_probability(const Theta& theta, const ExposureModel& em, const Subject& subject,
                               const lmm::ModelSpec& model, CovCache& cache, std::size_t* saturated = nullptr) {
    const double eta = response_density_log_ratio(theta, subject, model, cache.get(subject.times)) +
                       em.linear_predictor(subject);
    return saturate(numkit::expit(eta), saturated);
}

inline Vector draw_mvn(const Vector& mean, const SymMatrix& cov, Rng& rng, const std::string& what) {
    Eigen::LLT<Matrix> llt(cov.matrix());
    if (llt.info() != Eigen::Success) {
        throw FactorizationError(what + ": covariance is not positive definite, cannot draw");
    }
    std::normal_distribution<double> z;
    Vector e(mean.size());
    for (auto& v : e) v = z(rng);
    return mean + llt.matrixL() * e;
}

// ---------------------------------------------------------------------------
// D-MI

// Requires identical time vectors across subjects.
inline void require_balanced(const Cohort& cohort) {
    if (cohort.subjects.empty()) throw SpecError("D-MI: empty cohort");
    const Vector& t0 = cohort.subjects.front().times;
    for (const auto& s : cohort.subjects) {
        if (s.times.size() != t0.size() || s.times != t0) {
            throw SpecError("D-MI requires balanced data (identical times for every subject); subject '" + s.id +
                            "' differs. Use CD+MI for unbalanced cohorts");
        }
    }
}

// (sum_j y_j, sum_j y_j t_j, cheap covariates...)
inline Vector dmi_features(const Subject& subject, const std::vector<std::string>& covariates) {
    Vector f(static_cast<Eigen::Index>(2 + covariates.size()));
    f[0] = subject.outcomes.sum();
    f[1] = subject.outcomes.dot(subject.times);
    for (std::size_t k = 0; k < covariates.size(); ++k) {
        f[static_cast<Eigen::Index>(k + 2)] = subject.covariates.at(covariates[k]);
    }
    return f;
}

struct DmiModel {
    std::vector<std::string> covariates;
    numkit::LogisticFit fit; // coefficients for (1, features)

    double probability(const Vector& coef, const Subject& s, std::size_t* saturated = nullptr) const {
        const Vector f = dmi_features(s, covariates);
        return saturate(numkit::expit(coef[0] + coef.tail(f.size()).dot(f)), saturated);
    }
};

inline DmiModel fit_dmi_model(const Cohort& cohort) {
    require_balanced(cohort);
    const auto subjects = sampled_subjects(cohort);
    DmiModel m;
    m.covariates = cohort.covariate_names();
    const Vector y = exposure_vector(subjects);
    if (subjects.empty() || y.minCoeff() == y.maxCoeff()) {
        throw SpecError("D-MI: sampled subjects must include both exposure classes");
    }
    Matrix x(y.size(), static_cast<Eigen::Index>(3 + m.covariates.size()));
    for (std::size_t i = 0; i < subjects.size(); ++i) {
        x(static_cast<Eigen::Index>(i), 0) = 1.0;
        x.row(static_cast<Eigen::Index>(i)).tail(x.cols() - 1) = dmi_features(*subjects[i], m.covariates).transpose();
    }
    m.fit = numkit::logistic_fit(y, x);
    return m;
}

// ---------------------------------------------------------------------------
// Imputation drivers

enum class Method { cdmi, dmi };

inline std::string to_string(Method m) { return m == Method::cdmi ? "cdmi" : "dmi"; }

inline bool needs_imputation(const Subject& s) { return !s.exposure.has_value(); }

inline std::size_t count_missing(const Cohort& c) {
    return static_cast<std::size_t>(std::count_if(c.subjects.begin(), c.subjects.end(), needs_imputation));
}

inline Cohort complete_with(const Cohort& cohort, const std::vector<double>& probs, Rng& rng) {
    Cohort out = cohort;
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t i = 0; i < out.subjects.size(); ++i) {
        auto& s = out.subjects[i];
        if (needs_imputation(s)) {
            s.exposure = u(rng) < probs[i] ? 1 : 0;
        }
    }
    return out;
}

struct ImputationDiagnostics {
    std::size_t saturated = 0;
    std::vector<double> mean_probability; // per imputation, over imputed subjects
};

// CD+MI draws for one imputation: theta^(m) ~ N(theta_hat, Cov), alpha
// refit with the offset at theta^(m), alpha^(m) ~ N(alpha_hat, Cov_alpha).
inline std::vector<double> cdmi_probabilities(const Cohort& cohort, const DesignSpec& design,
                                              const lmm::FitResult& cd_fit, Rng& rng, ImputationDiagnostics* diag,
                                              bool parameter_uncertainty = true) {
    Theta theta = cd_fit.theta_hat;
    if (parameter_uncertainty) {
        theta = Theta::from_vector(draw_mvn(cd_fit.theta_hat.to_vector(), cd_fit.covariance, rng, "theta posterior"));
    }
    auto em = fit_marginal_exposure(cohort, theta, design);
    if (parameter_uncertainty) em.alpha = draw_mvn(em.alpha, em.covariance, rng, "exposure model posterior");
    CovCache cache(theta);
    std::vector<double> probs(cohort.size(), 0.0);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subjects[i];
        if (!needs_imputation(s)) continue;
        probs[i] = cdmi_probability(theta, em, s, cohort.spec, cache, diag ? &diag->saturated : nullptr);
        sum += probs[i];
        ++n;
    }
    if (diag) diag->mean_probability.push_back(n ? sum / static_cast<double>(n) : 0.0);
    return probs;
}

inline lmm::FitResult require_cd_fit(const Cohort& cohort, const DesignSpec& design) {
    auto fit = acl::fit_cd(cohort, design);
    if (!fit.converged) throw ConvergenceError("CD+MI: corrected-likelihood fit did not converge: " + fit.message);
    return fit;
}

// Seeds one stream per imputation from the caller's stream.
inline SeedTree imputation_seeds(Rng& rng) { return SeedTree(rng()); }

inline std::vector<Cohort> cdmi_impute(const Cohort& cohort, const DesignSpec& design, int m_imputations, Rng& rng,
                                       ImputationDiagnostics* diag = nullptr) {
    if (m_imputations < 1) throw SpecError("cdmi_impute: M must be at least 1");
    if (count_missing(cohort) == 0) return std::vector<Cohort>(static_cast<std::size_t>(m_imputations), cohort);
    const auto fit = require_cd_fit(cohort, design);
    const auto seeds = imputation_seeds(rng);
    std::vector<Cohort> out;
    for (int m = 0; m < m_imputations; ++m) {
        Rng r = seeds.child(static_cast<std::uint64_t>(m)).rng();
        const auto probs = cdmi_probabilities(cohort, design, fit, r, diag);
        out.push_back(complete_with(cohort, probs, r));
    }
    return out;
}

inline std::vector<double> dmi_probabilities(const Cohort& cohort, const DmiModel& model, Rng& rng,
                                             ImputationDiagnostics* diag, bool parameter_uncertainty = true) {
    const Vector coef = parameter_uncertainty
                            ? draw_mvn(model.fit.coefficients, model.fit.covariance, rng, "D-MI coefficient posterior")
                            : model.fit.coefficients;
    std::vector<double> probs(cohort.size(), 0.0);
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        const auto& s = cohort.subjects[i];
        if (!needs_imputation(s)) continue;
        probs[i] = model.probability(coef, s, diag ? &diag->saturated : nullptr);
        sum += probs[i];
        ++n;
    }
    if (diag) diag->mean_probability.push_back(n ? sum / static_cast<double>(n) : 0.0);
    return probs;
}

inline std::vector<Cohort> dmi_impute(const Cohort& cohort, int m_imputations, Rng& rng,
                                      ImputationDiagnostics* diag = nullptr) {
    if (m_imputations < 1) throw SpecError("dmi_impute: M must be at least 1");
    if (count_missing(cohort) == 0) return std::vector<Cohort>(static_cast<std::size_t>(m_imputations), cohort);
    const auto model = fit_dmi_model(cohort);
    const auto seeds = imputation_seeds(rng);
    std::vector<Cohort> out;
    for (int m = 0; m < m_imputations; ++m) {
        Rng r = seeds.child(static_cast<std::uint64_t>(m)).rng();
        out.push_back(complete_with(cohort, dmi_probabilities(cohort, model, r, diag), r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Rubin's rules

struct MIResult {
    Vector theta_hat;
    Vector within_var;
    Vector between_var;
    Vector total_var;
    Vector df; // +inf when B = 0 (normal theory)
    Matrix within_cov;
    Matrix between_cov;
    Matrix total_cov;
    int m = 0;
    std::vector<Vector> estimates; // per imputation
    std::vector<std::string> names;
    std::size_t n_imputed = 0;
    std::size_t n_saturated = 0;

    bool normal_theory(Eigen::Index k) const { return std::isinf(df[k]); }
};

inline MIResult rubin_combine(const std::vector<Vector>& estimates, const std::vector<Matrix>& covariances) {
    const auto m = static_cast<int>(estimates.size());
    if (m < 2) throw SpecError("rubin_combine: at least 2 imputations required (B is undefined for M < 2)");
    if (covariances.size() != estimates.size()) throw SpecError("rubin_combine: one covariance per estimate required");
    const auto p = estimates.front().size();
    for (std::size_t i = 0; i < estimates.size(); ++i) {
        if (estimates[i].size() != p || covariances[i].rows() != p || covariances[i].cols() != p) {
            throw SpecError("rubin_combine: imputation " + std::to_string(i) + " has mismatched dimensions");
        }
    }
    MIResult r;
    r.m = m;
    r.estimates = estimates;
    // means accumulated as deviations from the first imputation, so that
    // identical inputs pool to exactly that input
    Vector dtheta = Vector::Zero(p);
    Matrix dcov = Matrix::Zero(p, p);
    for (int i = 1; i < m; ++i) {
        dtheta += estimates[static_cast<std::size_t>(i)] - estimates.front();
        dcov += covariances[static_cast<std::size_t>(i)] - covariances.front();
    }
    r.theta_hat = estimates.front() + dtheta / m;
    r.within_cov = covariances.front() + dcov / m;
    r.between_cov = Matrix::Zero(p, p);
    for (const auto& e : estimates) {
        const Vector d = e - r.theta_hat;
        r.between_cov += d * d.transpose();
    }
    r.between_cov /= (m - 1);
    const double inflate = 1.0 + 1.0 / m;
    r.total_cov = r.within_cov + inflate * r.between_cov;
    r.within_var = r.within_cov.diagonal();
    r.between_var = r.between_cov.diagonal();
    r.total_var = r.total_cov.diagonal();
    r.df.resize(p);
    for (Eigen::Index k = 0; k < p; ++k) {
        const double b = r.between_var[k];
        if (b <= 0.0) {
            r.df[k] = std::numeric_limits<double>::infinity();
        } else {
            const double f = 1.0 + m * r.within_var[k] / ((m + 1) * b);
            r.df[k] = (m - 1) * f * f;
        }
    }
    return r;
}

// ---------------------------------------------------------------------------
// Full analysis

struct MIOptions {
    numkit::OptimOptions optim{};
    bool parameter_uncertainty = true;
};

namespace detail {

inline lmm::FitResult fit_completed(const Cohort& completed, Rng& rng, const MIOptions& opts) {
    const auto stats = lmm::pattern_stats(completed, lmm::Subset::all);
    auto fit = lmm::fit_ml(stats, std::nullopt, opts.optim);
    if (fit.converged) return fit;
    // one retry from a jittered start
    Vector start = lmm::default_init(stats).to_vector();
    std::normal_distribution<double> z;
    for (auto& v : start) v += 0.1 * z(rng);
    fit = lmm::fit_ml(stats, Theta::from_vector(start), opts.optim);
    if (!fit.converged) {
        throw ConvergenceError("MI: fit on an imputed cohort did not converge after a jittered retry: " + fit.message);
    }
    return fit;
}

} // namespace detail

// Impute M times, fit standard ML on each completed full cohort, pool.
inline MIResult run_mi_analysis(const Cohort& cohort, const DesignSpec& design, Method method, int m_imputations,
                                Rng& rng, const MIOptions& opts = {}) {
    if (m_imputations < 2) throw SpecError("run_mi_analysis: M must be at least 2");
    const std::size_t missing = count_missing(cohort);
    std::optional<lmm::FitResult> cd_fit;
    std::optional<DmiModel> dmi_model;
    if (missing > 0) {
        if (method == Method::cdmi) {
            cd_fit = require_cd_fit(cohort, design);
        } else {
            dmi_model = fit_dmi_model(cohort);
        }
    }
    const auto seeds = imputation_seeds(rng);
    ImputationDiagnostics diag;
    std::vector<Vector> est;
    std::vector<Matrix> cov;
    for (int m = 0; m < m_imputations; ++m) {
        Rng r = seeds.child(static_cast<std::uint64_t>(m)).rng();
        lmm::FitResult fit;
        if (missing == 0) {
            fit = detail::fit_completed(cohort, r, opts);
        } else {
            const auto probs = method == Method::cdmi
                                   ? cdmi_probabilities(cohort, design, *cd_fit, r, &diag, opts.parameter_uncertainty)
                                   : dmi_probabilities(cohort, *dmi_model, r, &diag, opts.parameter_uncertainty);
            fit = detail::fit_completed(complete_with(cohort, probs, r), r, opts);
        }
        if (fit.covariance.dim() == 0) throw ConvergenceError("MI: imputed-cohort fit returned no covariance");
        est.push_back(fit.theta_hat.to_vector());
        cov.push_back(fit.covariance.matrix());
    }
    auto res = rubin_combine(est, cov);
    res.names = lmm::parameter_names(cohort.spec);
    res.n_imputed = missing;
    res.n_saturated = diag.saturated;
    return res;
}

} // namespace odsmi::mi

#endif
