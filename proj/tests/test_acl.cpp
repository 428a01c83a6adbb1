#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "odsmi/acl.hpp"
#include "oracles.hpp"

using namespace odsmi;
using namespace odsmi::acl;
using design::SummaryKind;

namespace {

Scenario sc_a() { return scenario_preset("a"); }

lmm::Subject profile(const Vector& t, int g, double c) {
    lmm::Subject s;
    s.id = "p";
    s.times = t;
    s.outcomes = Vector::Zero(t.size());
    s.covariates["c"] = c;
    s.exposure = g;
    return s;
}

design::DesignSpec ods_design(const Scenario& sc, SummaryKind kind) {
    if (kind == SummaryKind::bivariate) {
        const auto r = design::bivariate_central_region(sc, 0.76);
        return design::rectangle_design(r.region, 70.0 / (0.76 * sc.n_subjects), 1.0);
    }
    const auto cut = design::population_cutoffs(sc, {kind}, {0.12, 0.88});
    return design::interval_design(kind, cut, design::calibrate_probabilities({0.12, 0.76, 0.12}, {90, 70, 90}, 750));
}

lmm::Cohort sampled_cohort(const Scenario& sc, const design::DesignSpec& d, std::uint64_t seed) {
    Rng rng(seed);
    auto c = generate_cohort(sc, rng);
    const auto flags = design::draw_sample(c, d, rng);
    return design::apply_sample(c, flags);
}

} // namespace

TEST(QMoments, NoRandomEffectsGivesOlsVariance) {
    const Vector t = sc_a().time_grid();
    const auto th = lmm::Theta::from_natural(sc_a().beta, 1e-8, 1e-8, 0.0, 2.0);
    const auto q = q_moments(th, profile(t, 1, 1), sc_a().model_spec(), 1, {SummaryKind::bivariate});
    const Matrix xt = lmm::random_design(t);
    const Matrix want = 4.0 * (xt.transpose() * xt).inverse();
    EXPECT_LT((q.cov.matrix() - want).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(QMoments, LinearMeanGivesLineCoefficients) {
    const Vector t = sc_a().time_grid();
    const auto th = lmm::Theta::from_natural(sc_a().beta, 5, 1.25, -0.25, 5);
    const auto q = q_moments(th, profile(t, 1, 1), sc_a().model_spec(), 1, {SummaryKind::bivariate});
    const auto& b = sc_a().beta;
    EXPECT_NEAR(q.mean[0], b[0] + b[2] + b[4], 1e-12);
    EXPECT_NEAR(q.mean[1], b[1] + b[3], 1e-12);
}

TEST(QMoments, MatchMonteCarloMoments) {
    const Scenario sc = sc_a();
    const Vector t = sc.time_grid();
    const auto th = sc.truth();
    const auto prof = profile(t, 0, 1);
    const auto q = q_moments(th, prof, sc.model_spec(), 0, {SummaryKind::bivariate});
    const Vector mu = lmm::design_matrix(prof, sc.model_spec(), 0) * th.beta;
    const Matrix l = lmm::marginal_cov(th, t).matrix().llt().matrixL();
    std::mt19937_64 rng(21);
    std::normal_distribution<double> z;
    const int n = 1'000'000;
    Vector sum = Vector::Zero(2);
    Matrix sum2 = Matrix::Zero(2, 2);
    lmm::Subject s = prof;
    Vector e(t.size());
    for (int i = 0; i < n; ++i) {
        for (auto& v : e) v = z(rng);
        s.outcomes = mu + l * e;
        const Vector qi = design::compute_summary(s, {SummaryKind::bivariate});
        sum += qi;
        sum2 += qi * qi.transpose();
    }
    const Vector m = sum / n;
    const Matrix cov = sum2 / n - m * m.transpose();
    for (int d = 0; d < 2; ++d) {
        EXPECT_LT(std::abs(m[d] - q.mean[d]), 3 * std::sqrt(q.cov(d, d) / n)) << d;
        // var of a sample variance of a normal is 2 sigma^4 / n
        EXPECT_LT(std::abs(cov(d, d) - q.cov(d, d)), 3 * std::sqrt(2.0 / n) * q.cov(d, d)) << d;
    }
    const double c12 = q.cov(0, 1);
    const double sd12 = std::sqrt((q.cov(0, 0) * q.cov(1, 1) + c12 * c12) / n);
    EXPECT_LT(std::abs(cov(0, 1) - c12), 3 * sd12);
}

TEST(LogAscertainment, ConstantProbabilityFactorsOut) {
    const Scenario sc = sc_a();
    const auto cut = design::population_cutoffs(sc, {SummaryKind::intercept}, {0.12, 0.88});
    const auto d = design::interval_design(SummaryKind::intercept, cut, {0.25, 0.25, 0.25});
    const auto ones = design::interval_design(SummaryKind::intercept, cut, {1, 1, 1});
    std::mt19937_64 rng(22);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 10; ++rep) {
        Vector v = sc.truth().to_vector();
        for (auto& x : v) x += 0.5 * z(rng);
        const auto th = lmm::Theta::from_vector(v);
        const auto prof = profile(sc.time_grid(), rep % 2, rep % 3 == 0);
        EXPECT_NEAR(log_ascertainment(th, prof, sc.model_spec(), rep % 2, d), std::log(0.25), 1e-12);
        EXPECT_NEAR(log_ascertainment(th, prof, sc.model_spec(), rep % 2, ones), 0.0, 1e-12);
    }
}

TEST(LogAscertainment, BivariatePartitionIsComplete) {
    // 3 x 3 grid of rectangles with pi = 1 everywhere; log A must be 0.
    design::DesignSpec d;
    d.summary = {SummaryKind::bivariate};
    const double a[4] = {-design::inf, 3.0, 8.0, design::inf};
    const double b[4] = {-design::inf, 0.0, 2.0, design::inf};
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 3; ++j) {
            d.regions.push_back({{{a[i], a[i + 1]}, {b[j], b[j + 1]}}, false});
            d.probabilities.push_back(1.0);
        }
    }
    d.validate();
    const Scenario sc = sc_a();
    std::mt19937_64 rng(23);
    std::normal_distribution<double> z;
    for (int rep = 0; rep < 20; ++rep) {
        Vector v = sc.truth().to_vector();
        for (auto& x : v) x += 0.5 * z(rng);
        const auto th = lmm::Theta::from_vector(v);
        EXPECT_NEAR(log_ascertainment(th, profile(sc.time_grid(), rep % 2, 1), sc.model_spec(), rep % 2, d), 0.0, 1e-8);
    }
}

TEST(LogAscertainment, AllZeroProbabilitiesRejected) {
    const auto d = design::uniform_design(SummaryKind::slope, 0.0);
    EXPECT_THROW(require_some_sampling(d), DesignError);
}

TEST(LogAscertainment, MatchesMonteCarloSamplingProbability) {
    const Scenario sc = sc_a();
    std::mt19937_64 rng(24);
    std::uniform_real_distribution<double> u;
    std::normal_distribution<double> z;
    const SummaryKind kinds[3] = {SummaryKind::intercept, SummaryKind::slope, SummaryKind::bivariate};
    for (int rep = 0; rep < 20; ++rep) {
        const auto d = ods_design(sc, kinds[rep % 3]);
        Vector v = sc.truth().to_vector();
        for (int k = 0; k < 5; ++k) v[k] += 0.5 * z(rng);
        const auto th = lmm::Theta::from_vector(v);
        const int g = u(rng) < 0.5;
        auto prof = profile(sc.time_grid(), g, u(rng) < 0.5);
        if (rep % 4 == 3) prof.times = prof.times.head(6).eval(); // unbalanced profile
        prof.outcomes.resize(prof.times.size());
        double se = 0.0;
        const double mc = oracle::mc_sampling_prob(th, prof, sc.model_spec(), d, 200'000, rng, &se);
        const double a = std::exp(log_ascertainment(th, prof, sc.model_spec(), g, d));
        EXPECT_LT(std::abs(a - mc), 3 * se + 1e-12) << "profile " << rep;
    }
}

TEST(LogAscertainment, AnalyticGradientMatchesFiniteDifferences) {
    const Scenario sc = sc_a();
    const Vector t = sc.time_grid();
    std::mt19937_64 rng(25);
    std::normal_distribution<double> z;
    for (auto kind : {SummaryKind::intercept, SummaryKind::slope, SummaryKind::bivariate}) {
        const auto d = ods_design(sc, kind);
        for (int rep = 0; rep < 5; ++rep) {
            Vector v = sc.truth().to_vector();
            for (auto& x : v) x += 0.3 * z(rng);
            const Matrix x = lmm::design_matrix(profile(t, rep % 2, 1), sc.model_spec(), rep % 2);
            Vector g;
            log_ascertainment(lmm::Theta::from_vector(v), t, x, d, &g);
            const Vector fd = numkit::central_gradient(
                [&](const Vector& w) { return log_ascertainment(lmm::Theta::from_vector(w), t, x, d); }, v);
            for (Eigen::Index k = 0; k < v.size(); ++k) {
                EXPECT_NEAR(g[k], fd[k], 1e-5 * std::max(1.0, std::abs(fd[k]))) << to_string(kind) << " param " << k;
            }
        }
    }
}

TEST(AclLoglik, UnitProbabilitiesReduceToLoglik) {
    const Scenario sc = sc_a();
    auto c = sampled_cohort(sc, design::uniform_design(SummaryKind::intercept, 0.3), 26);
    const auto ones = design::uniform_design(SummaryKind::intercept, 1.0);
    const auto th = sc.truth();
    EXPECT_DOUBLE_EQ(acl_loglik(th, c, ones), lmm::loglik(th, c, lmm::Subset::sampled));
    const auto third = design::uniform_design(SummaryKind::intercept, 1.0 / 3.0);
    EXPECT_NEAR(acl_loglik(th, c, third), lmm::loglik(th, c, lmm::Subset::sampled) + c.n_sampled() * std::log(3.0), 1e-8);
}

TEST(AclLoglik, EqualsIndependentPerSubjectSum) {
    const Scenario sc = sc_a();
    for (auto kind : {SummaryKind::intercept, SummaryKind::bivariate}) {
        const auto d = ods_design(sc, kind);
        Rng rng(27);
        auto full = generate_cohort(sc, rng);
        full.subjects.resize(60);
        auto c = design::apply_sample(full, design::draw_sample(full, d, rng));
        // keep 20 sampled subjects, give a few their own time patterns
        std::vector<lmm::Subject> kept;
        for (auto& s : c.subjects) {
            if (s.is_sampled() && kept.size() < 20) kept.push_back(s);
        }
        ASSERT_EQ(kept.size(), 20u);
        kept[3].times[4] += 0.1;
        kept[7].times = kept[7].times.head(5).eval();
        kept[7].outcomes = kept[7].outcomes.head(5).eval();
        c.subjects = kept;
        const auto th = lmm::Theta::from_natural(sc.beta * 1.1, 4.0, 1.5, 0.2, 4.5);
        double oracle = 0.0;
        for (const auto& s : c.subjects) {
            const Matrix x = lmm::design_matrix(s, c.spec, *s.exposure);
            oracle += numkit::mvn_logpdf(s.outcomes, x * th.beta, lmm::marginal_cov(th, s.times));
            // region probabilities written out directly from the summary law
            const Matrix xt = lmm::random_design(s.times);
            const Matrix w = d.summary.select((xt.transpose() * xt).inverse() * xt.transpose());
            const Vector m = w * x * th.beta;
            const Matrix v = w * lmm::marginal_cov(th, s.times).matrix() * w.transpose();
            double a = 0.0;
            if (kind == SummaryKind::intercept) {
                for (std::size_t k = 0; k < d.regions.size(); ++k) {
                    const auto& r = d.regions[k].bounds[0];
                    const double sd = std::sqrt(v(0, 0));
                    a += d.probabilities[k] * (0.5 * std::erfc(-(r.hi - m[0]) / sd / std::sqrt(2.0)) -
                                               0.5 * std::erfc(-(r.lo - m[0]) / sd / std::sqrt(2.0)));
                }
            } else {
                const auto& r = d.regions[0].bounds;
                const double pin =
                    numkit::bvn_rect_prob({r[0].lo, r[1].lo}, {r[0].hi, r[1].hi}, {m[0], m[1]}, SymMatrix(v));
                a = d.probabilities[0] * pin + d.probabilities[1] * (1.0 - pin);
            }
            oracle -= std::log(a);
        }
        EXPECT_NEAR(acl_loglik(th, c, d), oracle, 1e-10 * std::abs(oracle)) << to_string(kind);
    }
}

TEST(AclLoglik, AnalyticGradientMatchesFiniteDifferences) {
    const Scenario sc = sc_a();
    std::mt19937_64 gen(28);
    std::normal_distribution<double> z;
    for (auto kind : {SummaryKind::slope, SummaryKind::bivariate}) {
        const auto d = ods_design(sc, kind);
        const auto c = sampled_cohort(sc, d, 29);
        const auto stats = lmm::pattern_stats(c, lmm::Subset::sampled);
        for (int rep = 0; rep < 5; ++rep) {
            Vector v = sc.truth().to_vector();
            for (auto& x : v) x += 0.3 * z(gen);
            Vector g;
            acl_loglik(lmm::Theta::from_vector(v), stats, d, &g);
            const Vector fd = numkit::central_gradient(
                [&](const Vector& w) { return acl_loglik(lmm::Theta::from_vector(w), stats, d); }, v);
            for (Eigen::Index k = 0; k < v.size(); ++k) {
                EXPECT_NEAR(g[k], fd[k], 1e-5 * std::max(1.0, std::abs(fd[k]))) << to_string(kind) << " param " << k;
            }
        }
    }
}

TEST(FitCd, UnitProbabilitiesEqualMl) {
    const Scenario sc = sc_a();
    const auto c = sampled_cohort(sc, design::uniform_design(SummaryKind::intercept, 1.0 / 3.0), 30);
    const auto cd = fit_cd(c, design::uniform_design(SummaryKind::bivariate, 1.0));
    const auto ml = lmm::fit_ml(c, lmm::Subset::sampled);
    ASSERT_TRUE(cd.converged && ml.converged);
    EXPECT_LT((cd.theta_hat.to_vector() - ml.theta_hat.to_vector()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(FitCd, CommonFactorLeavesArgmaxFixed) {
    const Scenario sc = sc_a();
    const auto d = ods_design(sc, SummaryKind::slope);
    const auto c = sampled_cohort(sc, d, 31);
    auto half = d;
    for (auto& p : half.probabilities) p *= 0.5;
    const auto a = fit_cd(c, d);
    const auto b = fit_cd(c, half);
    ASSERT_TRUE(a.converged && b.converged);
    EXPECT_LT((a.theta_hat.to_vector() - b.theta_hat.to_vector()).cwiseAbs().maxCoeff(), 1e-5);
    EXPECT_NEAR(b.loglik - a.loglik, c.n_sampled() * std::log(2.0), 1e-6);
}

TEST(FitCd, CorrectsOutcomeDependentSampling) {
    // Over replications of an intercept-based design, CD stays near the
    // truth for beta_g while naive ML on the sampled subjects drifts.
    const Scenario sc = sc_a();
    const auto d = ods_design(sc, SummaryKind::intercept);
    const int reps = 60;
    double cd_sum = 0.0, ml_sum = 0.0;
    for (int r = 0; r < reps; ++r) {
        const auto c = sampled_cohort(sc, d, 1000 + r);
        const auto cd = fit_cd(c, d);
        ASSERT_TRUE(cd.converged) << cd.message;
        cd_sum += cd.theta_hat.beta[2];
        ml_sum += lmm::fit_ml(c, lmm::Subset::sampled).theta_hat.beta[2];
    }
    EXPECT_LT(std::abs(cd_sum / reps + 2.5), 0.25);
    EXPECT_GT(std::abs(ml_sum / reps + 2.5), std::abs(cd_sum / reps + 2.5));
}
