#ifndef ODSMI_LMM_HPP
#define ODSMI_LMM_HPP

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"
#include "odsmi/numkit/normal.hpp"
#include "odsmi/numkit/optimize.hpp"

namespace odsmi::lmm {

// ---------------------------------------------------------------------------
// Model specification

enum class TermKind { intercept, time, exposure, exposure_time, covariate };

struct Term {
    TermKind kind;
    std::string covariate; // only for TermKind::covariate

    std::string name() const {
        switch (kind) {
        case TermKind::intercept: return "intercept";
        case TermKind::time: return "time";
        case TermKind::exposure: return "exposure";
        case TermKind::exposure_time: return "exposure:time";
        case TermKind::covariate: return covariate;
        }
        return {};
    }

    bool operator==(const Term&) const = default;
};

// Fixed-effect terms in order; random effects are always intercept + time.
class ModelSpec {
public:
    ModelSpec() = default;

    explicit ModelSpec(std::vector<Term> terms) : terms_(std::move(terms)) {
        if (terms_.empty() || terms_.front().kind != TermKind::intercept) {
            throw SpecError("ModelSpec: the intercept must be the first fixed term");
        }
        std::set<std::string> seen;
        for (const auto& t : terms_) {
            if (!seen.insert(t.name()).second) {
                throw SpecError("ModelSpec: duplicate term '" + t.name() + "'");
            }
            if (t.kind == TermKind::covariate && t.covariate.empty()) {
                throw SpecError("ModelSpec: covariate term without a name");
            }
        }
    }

    // intercept, time, exposure, exposure:time, then each covariate
    static ModelSpec standard(const std::vector<std::string>& covariates) {
        std::vector<Term> terms = {{TermKind::intercept, {}},
                                   {TermKind::time, {}},
                                   {TermKind::exposure, {}},
                                   {TermKind::exposure_time, {}}};
        for (const auto& c : covariates) {
            terms.push_back({TermKind::covariate, c});
        }
        return ModelSpec(std::move(terms));
    }

    const std::vector<Term>& terms() const { return terms_; }
    Eigen::Index p() const { return static_cast<Eigen::Index>(terms_.size()); }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        for (const auto& t : terms_) {
            out.push_back(t.name());
        }
        return out;
    }

    std::vector<std::string> covariates() const {
        std::vector<std::string> out;
        for (const auto& t : terms_) {
            if (t.kind == TermKind::covariate) {
                out.push_back(t.covariate);
            }
        }
        return out;
    }

    bool operator==(const ModelSpec&) const = default;

private:
    std::vector<Term> terms_;
};

// ---------------------------------------------------------------------------
// Data containers

struct Subject {
    std::string id;
    Vector times;
    Vector outcomes;
    std::map<std::string, double> covariates; // cheap, always observed
    std::optional<int> exposure;              // expensive binary; empty = not ascertained
    std::optional<bool> sampled;

    Eigen::Index n_obs() const { return times.size(); }
    bool is_sampled() const { return sampled.value_or(false); }

    bool operator==(const Subject& o) const {
        return id == o.id && times == o.times && outcomes == o.outcomes && covariates == o.covariates &&
               exposure == o.exposure && sampled == o.sampled;
    }
};

struct Cohort {
    std::vector<Subject> subjects;
    ModelSpec spec;

    std::size_t size() const { return subjects.size(); }

    // Names of cheap covariates carried by the subjects (union, sorted).
    std::vector<std::string> covariate_names() const {
        std::set<std::string> names;
        for (const auto& s : subjects) {
            for (const auto& [k, v] : s.covariates) {
                names.insert(k);
            }
        }
        return {names.begin(), names.end()};
    }

    std::size_t n_sampled() const {
        return static_cast<std::size_t>(
            std::count_if(subjects.begin(), subjects.end(), [](const Subject& s) { return s.is_sampled(); }));
    }

    // Checks per-subject invariants and id uniqueness; throws SpecError.
    void validate() const {
        std::set<std::string> ids;
        const auto needed = spec.covariates();
        for (const auto& s : subjects) {
            if (!ids.insert(s.id).second) {
                throw SpecError("cohort: duplicate subject id '" + s.id + "'");
            }
            if (s.times.size() != s.outcomes.size()) {
                throw SpecError("subject '" + s.id + "': times and outcomes differ in length");
            }
            if (s.times.size() < 1) {
                throw SpecError("subject '" + s.id + "': no observations");
            }
            if (s.is_sampled() && !s.exposure) {
                throw SpecError("subject '" + s.id + "': sampled but exposure missing");
            }
            if (s.exposure && *s.exposure != 0 && *s.exposure != 1) {
                throw SpecError("subject '" + s.id + "': exposure must be 0 or 1");
            }
            for (const auto& c : needed) {
                if (!s.covariates.contains(c)) {
                    throw SpecError("subject '" + s.id + "': missing covariate '" + c + "'");
                }
            }
        }
    }

    bool operator==(const Cohort&) const = default;
};

enum class Subset { all, sampled };

inline bool in_subset(const Subject& s, Subset subset) { return subset == Subset::all || s.is_sampled(); }

// ---------------------------------------------------------------------------
// Parameters

inline constexpr Eigen::Index n_variance_params = 4;

// Fixed effects plus variance components on the unconstrained scale:
// log sigma0, log sigma1, atanh(rho), log sigma_e.
struct Theta {
    Vector beta;
    double log_sigma0 = 0.0;
    double log_sigma1 = 0.0;
    double zrho = 0.0;
    double log_sigma_e = 0.0;

    double sigma0() const { return std::exp(log_sigma0); }
    double sigma1() const { return std::exp(log_sigma1); }
    double rho() const { return std::tanh(zrho); }
    double sigma_e() const { return std::exp(log_sigma_e); }

    Eigen::Index size() const { return beta.size() + n_variance_params; }

    Vector to_vector() const {
        Vector v(size());
        v.head(beta.size()) = beta;
        v.tail(n_variance_params) << log_sigma0, log_sigma1, zrho, log_sigma_e;
        return v;
    }

    static Theta from_vector(const Vector& v) {
        if (v.size() <= n_variance_params) {
            throw SpecError("Theta: parameter vector too short");
        }
        Theta t;
        const auto p = v.size() - n_variance_params;
        t.beta = v.head(p);
        t.log_sigma0 = v[p];
        t.log_sigma1 = v[p + 1];
        t.zrho = v[p + 2];
        t.log_sigma_e = v[p + 3];
        return t;
    }

    static Theta from_natural(const Vector& beta, double sigma0, double sigma1, double rho, double sigma_e) {
        if (!(sigma0 > 0.0) || !(sigma1 > 0.0) || !(sigma_e > 0.0) || !(std::abs(rho) < 1.0)) {
            throw SpecError("Theta: variance components out of range");
        }
        return {beta, std::log(sigma0), std::log(sigma1), std::atanh(rho), std::log(sigma_e)};
    }

    // (beta, sigma0, sigma1, rho, sigma_e)
    Vector natural() const {
        Vector v(size());
        v.head(beta.size()) = beta;
        v.tail(n_variance_params) << sigma0(), sigma1(), rho(), sigma_e();
        return v;
    }

    // Jacobian of natural() with respect to to_vector() (diagonal).
    Vector natural_jacobian() const {
        Vector j = Vector::Ones(size());
        const auto p = beta.size();
        j[p] = sigma0();
        j[p + 1] = sigma1();
        j[p + 2] = 1.0 - rho() * rho();
        j[p + 3] = sigma_e();
        return j;
    }
};

inline std::vector<std::string> parameter_names(const ModelSpec& spec) {
    auto names = spec.names();
    for (const char* v : {"log_sigma0", "log_sigma1", "z_rho", "log_sigma_e"}) {
        names.emplace_back(v);
    }
    return names;
}

inline std::vector<std::string> natural_parameter_names(const ModelSpec& spec) {
    auto names = spec.names();
    for (const char* v : {"sigma0", "sigma1", "rho", "sigma_e"}) {
        names.emplace_back(v);
    }
    return names;
}

// Delta-method covariance of Theta::natural().
inline Matrix natural_covariance(const Theta& theta, const Matrix& cov) {
    const Vector j = theta.natural_jacobian();
    return j.asDiagonal() * cov * j.asDiagonal();
}

struct FitResult {
    Theta theta_hat;
    SymMatrix covariance; // on the transformed scale
    double loglik = 0.0;
    bool converged = false;
    std::size_t n_subjects_used = 0;
    int iterations = 0;
    std::string message;
};

// ---------------------------------------------------------------------------
// Design and moments

inline Vector design_row(const Subject& subject, const ModelSpec& spec, int exposure_value, Eigen::Index j) {
    if (j < 0 || j >= subject.n_obs()) {
        throw SpecError("design_row: observation index out of range for subject '" + subject.id + "'");
    }
    const double t = subject.times[j];
    const double g = static_cast<double>(exposure_value);
    Vector row(spec.p());
    Eigen::Index k = 0;
    for (const auto& term : spec.terms()) {
        switch (term.kind) {
        case TermKind::intercept: row[k] = 1.0; break;
        case TermKind::time: row[k] = t; break;
        case TermKind::exposure: row[k] = g; break;
        case TermKind::exposure_time: row[k] = g * t; break;
        case TermKind::covariate: {
            const auto it = subject.covariates.find(term.covariate);
            if (it == subject.covariates.end()) {
                throw SpecError("design_row: subject '" + subject.id + "' has no covariate '" + term.covariate + "'");
            }
            row[k] = it->second;
            break;
        }
        }
        ++k;
    }
    return row;
}

inline Matrix design_matrix(const Subject& subject, const ModelSpec& spec, int exposure_value) {
    Matrix x(subject.n_obs(), spec.p());
    for (Eigen::Index j = 0; j < subject.n_obs(); ++j) {
        x.row(j) = design_row(subject, spec, exposure_value, j).transpose();
    }
    return x;
}

inline int observed_exposure(const Subject& s) {
    if (!s.exposure) {
        throw SpecError("subject '" + s.id + "' has no ascertained exposure");
    }
    return *s.exposure;
}

inline Matrix random_design(const Vector& times) {
    Matrix z(times.size(), 2);
    z.col(0).setOnes();
    z.col(1) = times;
    return z;
}

inline Matrix random_effects_cov(const Theta& theta) {
    const double s0 = theta.sigma0();
    const double s1 = theta.sigma1();
    const double c = theta.rho() * s0 * s1;
    Matrix d(2, 2);
    d << s0 * s0, c, c, s1 * s1;
    return d;
}

// V = Z D Z' + sigma_e^2 I with Z = (1, times)
inline SymMatrix marginal_cov(const Theta& theta, const Vector& times) {
    const Matrix z = random_design(times);
    Matrix v = z * random_effects_cov(theta) * z.transpose();
    v.diagonal().array() += theta.sigma_e() * theta.sigma_e();
    return SymMatrix(v, "marginal covariance V");
}

// dV / d(log sigma0, log sigma1, zrho, log sigma_e)
inline std::array<Matrix, n_variance_params> marginal_cov_derivatives(const Theta& theta, const Vector& times) {
    const Matrix z = random_design(times);
    const double s0 = theta.sigma0();
    const double s1 = theta.sigma1();
    const double r = theta.rho();
    Matrix d0(2, 2), d1(2, 2), dz(2, 2);
    d0 << 2 * s0 * s0, r * s0 * s1, r * s0 * s1, 0.0;
    d1 << 0.0, r * s0 * s1, r * s0 * s1, 2 * s1 * s1;
    dz << 0.0, (1 - r * r) * s0 * s1, (1 - r * r) * s0 * s1, 0.0;
    const auto n = times.size();
    return {z * d0 * z.transpose(), z * d1 * z.transpose(), z * dz * z.transpose(),
            Matrix::Identity(n, n) * (2.0 * theta.sigma_e() * theta.sigma_e())};
}

// ---------------------------------------------------------------------------
// Sufficient statistics: subjects sharing times and design matrix share V
// and the mean, so they collapse to (count, mean outcome, scatter).

struct PatternGroup {
    Vector times;
    Matrix x;
    double count = 0.0;
    Vector mean_outcome;
    Matrix scatter; // sum of (y - ybar)(y - ybar)'
};

struct PatternStats {
    std::vector<PatternGroup> groups;
    std::size_t n_subjects = 0;
};

// Groups subjects by (times, design). `exposure_of` supplies the exposure
// value used to build each subject's design matrix.
template <typename ExposureFn>
PatternStats build_pattern_stats(const std::vector<const Subject*>& subjects, const ModelSpec& spec,
                                 ExposureFn&& exposure_of) {
    PatternStats stats;
    std::map<std::vector<double>, std::size_t> index;
    std::vector<std::vector<const Subject*>> members;
    for (const Subject* s : subjects) {
        const Matrix x = design_matrix(*s, spec, exposure_of(*s));
        std::vector<double> key(s->times.data(), s->times.data() + s->times.size());
        key.insert(key.end(), x.data(), x.data() + x.size());
        auto [it, inserted] = index.try_emplace(std::move(key), stats.groups.size());
        if (inserted) {
            PatternGroup g;
            g.times = s->times;
            g.x = x;
            stats.groups.push_back(std::move(g));
            members.emplace_back();
        }
        members[it->second].push_back(s);
    }
    for (std::size_t k = 0; k < stats.groups.size(); ++k) {
        auto& g = stats.groups[k];
        const auto n = g.times.size();
        g.count = static_cast<double>(members[k].size());
        g.mean_outcome = Vector::Zero(n);
        for (const Subject* s : members[k]) {
            g.mean_outcome += s->outcomes;
        }
        g.mean_outcome /= g.count;
        g.scatter = Matrix::Zero(n, n);
        for (const Subject* s : members[k]) {
            const Vector d = s->outcomes - g.mean_outcome;
            g.scatter.selfadjointView<Eigen::Lower>().rankUpdate(d);
        }
        g.scatter = g.scatter.selfadjointView<Eigen::Lower>();
    }
    stats.n_subjects = subjects.size();
    return stats;
}

inline std::vector<const Subject*> select_subjects(const Cohort& cohort, Subset subset) {
    std::vector<const Subject*> out;
    for (const auto& s : cohort.subjects) {
        if (in_subset(s, subset)) {
            if (!s.exposure) {
                throw SpecError("subject '" + s.id + "' is in the analysis subset but has no exposure");
            }
            out.push_back(&s);
        }
    }
    return out;
}

inline PatternStats pattern_stats(const Cohort& cohort, Subset subset) {
    return build_pattern_stats(select_subjects(cohort, subset), cohort.spec, observed_exposure);
}

// log-likelihood summed over the groups, optionally with its gradient
inline double loglik(const Theta& theta, const PatternStats& stats, Vector* gradient = nullptr) {
    const auto p = theta.beta.size();
    double ll = 0.0;
    if (gradient) {
        gradient->setZero(theta.size());
    }
    for (const auto& g : stats.groups) {
        const auto n = g.times.size();
        const SymMatrix v = marginal_cov(theta, g.times);
        const auto llt = v.cholesky();
        const Vector resid = g.mean_outcome - g.x * theta.beta;
        Matrix r = g.scatter;
        r.noalias() += g.count * resid * resid.transpose();
        const Matrix vinv = llt.solve(Matrix::Identity(n, n));
        const double quad = (vinv.cwiseProduct(r)).sum();
        ll += -0.5 * (g.count * (static_cast<double>(n) * numkit::log_2pi + log_det(llt)) + quad);
        if (gradient) {
            gradient->head(p) += g.x.transpose() * (vinv * (g.count * resid));
            const Matrix a = vinv * r * vinv - g.count * vinv;
            const auto dv = marginal_cov_derivatives(theta, g.times);
            for (Eigen::Index k = 0; k < n_variance_params; ++k) {
                (*gradient)[p + k] += 0.5 * a.cwiseProduct(dv[k]).sum();
            }
        }
    }
    return ll;
}

inline double loglik(const Theta& theta, const Cohort& cohort, Subset subset) {
    return loglik(theta, pattern_stats(cohort, subset));
}

// Pooled OLS for beta; variance components by moment matching of the OLS
// residuals (within-subject line residuals give sigma_e, between-subject
// line coefficients give D).
inline Theta default_init(const PatternStats& stats) {
    if (stats.groups.empty()) {
        throw SpecError("default_init: no subjects");
    }
    const auto p = stats.groups.front().x.cols();
    Matrix xtx = Matrix::Zero(p, p);
    Vector xty = Vector::Zero(p);
    for (const auto& g : stats.groups) {
        xtx += g.count * g.x.transpose() * g.x;
        xty += g.count * g.x.transpose() * g.mean_outcome;
    }
    Eigen::ColPivHouseholderQR<Matrix> qr(xtx);
    if (qr.rank() < p) {
        throw RankError("fixed-effects design is rank deficient (rank " + std::to_string(qr.rank()) + " < " +
                        std::to_string(p) + ")");
    }
    const Vector beta = qr.solve(xty);

    double within_ss = 0.0;
    double within_df = 0.0;
    double total_ss = 0.0;
    double total_n = 0.0;
    Matrix between = Matrix::Zero(2, 2);
    Matrix ols_var = Matrix::Zero(2, 2);
    double n_lines = 0.0;
    for (const auto& g : stats.groups) {
        const auto n = g.times.size();
        const Vector resid = g.mean_outcome - g.x * beta;
        Matrix r = g.scatter + g.count * resid * resid.transpose();
        total_ss += r.trace();
        total_n += g.count * static_cast<double>(n);
        if (n >= 3) {
            const Matrix z = random_design(g.times);
            const Matrix ztz = z.transpose() * z;
            Eigen::FullPivLU<Matrix> lu(ztz);
            if (!lu.isInvertible()) {
                continue;
            }
            const Matrix ztz_inv = lu.inverse();
            const Matrix w = ztz_inv * z.transpose();
            const Matrix h = z * w;
            within_ss += ((Matrix::Identity(n, n) - h) * r).trace();
            within_df += g.count * static_cast<double>(n - 2);
            between += w * r * w.transpose();
            ols_var += g.count * ztz_inv;
            n_lines += g.count;
        }
    }
    Theta t;
    t.beta = beta;
    const double total_var = std::max(total_ss / std::max(total_n, 1.0), 1e-8);
    if (within_df > 0.0 && n_lines > 0.0) {
        const double se2 = std::max(within_ss / within_df, 1e-3 * total_var);
        Matrix d = (between - se2 * ols_var) / n_lines;
        const double floor = 1e-2 * total_var;
        const double d0 = std::max(d(0, 0), floor);
        const double d1 = std::max(d(1, 1), floor);
        const double r = std::clamp(d(0, 1) / std::sqrt(d0 * d1), -0.9, 0.9);
        t.log_sigma0 = 0.5 * std::log(d0);
        t.log_sigma1 = 0.5 * std::log(d1);
        t.zrho = std::atanh(r);
        t.log_sigma_e = 0.5 * std::log(se2);
    } else {
        t.log_sigma0 = 0.5 * std::log(0.5 * total_var);
        t.log_sigma1 = 0.5 * std::log(0.1 * total_var);
        t.zrho = 0.0;
        t.log_sigma_e = 0.5 * std::log(0.5 * total_var);
    }
    return t;
}

// Maximizes `value` (with analytic `gradient`) starting at init and packs
// the optimizer output into a FitResult.
inline FitResult fit_objective(const numkit::Objective& obj, const Theta& init, std::size_t n_used,
                               const numkit::OptimOptions& opts = {}) {
    const auto res = numkit::maximize(obj, init.to_vector(), opts);
    FitResult fit;
    fit.theta_hat = Theta::from_vector(res.argmax);
    fit.covariance = res.neg_hessian_inverse;
    fit.loglik = res.value;
    fit.converged = res.converged;
    fit.n_subjects_used = n_used;
    fit.iterations = res.iterations;
    fit.message = res.message;
    return fit;
}

inline numkit::Objective ml_objective(const PatternStats& stats) {
    numkit::Objective obj;
    obj.value = [&stats](const Vector& v) {
        try {
            return loglik(Theta::from_vector(v), stats);
        } catch (const FactorizationError&) {
            return -std::numeric_limits<double>::infinity();
        }
    };
    obj.gradient = [&stats](const Vector& v) {
        Vector g;
        loglik(Theta::from_vector(v), stats, &g);
        return g;
    };
    return obj;
}

inline FitResult fit_ml(const PatternStats& stats, const std::optional<Theta>& init = std::nullopt,
                        const numkit::OptimOptions& opts = {}) {
    if (stats.n_subjects == 0) {
        throw SpecError("fit_ml: empty analysis subset");
    }
    const Theta start = init ? *init : default_init(stats);
    return fit_objective(ml_objective(stats), start, stats.n_subjects, opts);
}

inline FitResult fit_ml(const Cohort& cohort, Subset subset, const std::optional<Theta>& init = std::nullopt,
                        const numkit::OptimOptions& opts = {}) {
    return fit_ml(pattern_stats(cohort, subset), init, opts);
}

} // namespace odsmi::lmm

#endif
