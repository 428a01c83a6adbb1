#include <cmath>
#include <algorithm>
#include <numeric>
#include <random>

#include <gtest/gtest.h>

#include "odsmi/simulate.hpp"

using namespace odsmi;
using namespace odsmi::simulate;

namespace {

// Brute-force delete-one jackknife of var(a)/var(b).
double jackknife_oracle(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    auto var = [](const std::vector<double>& x) {
        double m = 0;
        for (double v : x) m += v;
        m /= x.size();
        double s = 0;
        for (double v : x) s += (v - m) * (v - m);
        return s / (x.size() - 1);
    };
    std::vector<double> t;
    for (std::size_t i = 0; i < n; ++i) {
        std::vector<double> aa, bb;
        for (std::size_t j = 0; j < n; ++j) {
            if (j == i) continue;
            aa.push_back(a[j]);
            bb.push_back(b[j]);
        }
        t.push_back(var(aa) / var(bb));
    }
    double m = 0;
    for (double v : t) m += v;
    m /= n;
    double s = 0;
    for (double v : t) s += (v - m) * (v - m);
    return std::sqrt((n - 1.0) / n * s);
}

ReplicationResult synthetic(std::size_t r, const std::vector<double>& base, const std::vector<double>& other,
                            bool other_ok = true) {
    ReplicationResult rr;
    rr.index = r;
    auto make = [](const std::vector<double>& v) {
        CellEstimate c;
        c.ok = true;
        c.estimate = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
        c.se = Vector::Constant(c.estimate.size(), 0.5);
        c.n_sampled = 250;
        return c;
    };
    rr.cells[{DesignKind::rs, AnalysisKind::cd}] = make(base);
    auto o = make(other);
    o.ok = other_ok;
    if (!other_ok) o.message = "synthetic failure";
    rr.cells[{DesignKind::ods_i, AnalysisKind::cd}] = o;
    return rr;
}

} // namespace

TEST(Names, RoundTrip) {
    for (auto d : all_designs()) EXPECT_EQ(design_kind_from_string(to_string(d)), d);
    for (auto a : all_analyses()) EXPECT_EQ(analysis_kind_from_string(to_string(a)), a);
    EXPECT_THROW(design_kind_from_string("ods.x"), SpecError);
    EXPECT_THROW(analysis_kind_from_string("ml"), SpecError);
}

TEST(BuildDesign, IntervalProbabilitiesAtN750) {
    const auto sc = scenario_preset("a");
    const auto d = build_design(sc, DesignKind::ods_i);
    ASSERT_EQ(d.spec.probabilities.size(), 3u);
    EXPECT_NEAR(d.spec.probabilities[0], 1.0, 1e-12);
    EXPECT_NEAR(d.spec.probabilities[1], 70.0 / (0.76 * 750), 1e-12);
    EXPECT_NEAR(d.spec.probabilities[2], 1.0, 1e-12);
    // expected sample size is 250 under the population law
    const auto masses = design::region_masses(d.spec, design::summary_mixture(sc, d.spec.summary));
    double n = 0;
    for (std::size_t k = 0; k < 3; ++k) n += 750 * masses[k] * d.spec.probabilities[k];
    EXPECT_NEAR(n, 250.0, 0.05);
}

TEST(BuildDesign, LargerCohortThinsTails) {
    const auto sc = scenario_preset("d");
    const auto d = build_design(sc, DesignKind::ods_s);
    EXPECT_NEAR(d.spec.probabilities[0], 90.0 / (0.12 * 2250), 1e-12);
    EXPECT_NEAR(d.spec.probabilities[1], 70.0 / (0.76 * 2250), 1e-12);
}

TEST(BuildDesign, BivariateCentralMass) {
    const auto sc = scenario_preset("a");
    const auto d = build_design(sc, DesignKind::ods_b);
    const auto masses = design::region_masses(d.spec, design::summary_mixture(sc, d.spec.summary));
    EXPECT_NEAR(masses[0], 0.76, 1e-6);
    EXPECT_NEAR(d.spec.probabilities[0], 70.0 / (0.76 * 750), 1e-12);
    EXPECT_NEAR(d.spec.probabilities[1], 180.0 / (0.24 * 750), 1e-12);
}

TEST(BuildDesign, RandomSampleIsExact) {
    const auto sc = scenario_preset("a");
    const auto d = build_design(sc, DesignKind::rs);
    Rng rng(4);
    const auto cohort = generate_cohort(sc, rng);
    for (int rep = 0; rep < 5; ++rep) {
        const auto f = draw_design_sample(cohort, d, rng);
        EXPECT_EQ(std::count(f.begin(), f.end(), true), 250);
    }
}

TEST(EndOfStudy, TruthValues) {
    // beta0 + 2 bt + bg + 2 bgt + bc
    const auto a = scenario_preset("a");
    EXPECT_DOUBLE_EQ(end_of_study_mean(a.truth().beta, a.model_spec()), 5 + 2 * 1.0 - 2.5 + 2 * 0.75 + 1.0);
    const auto e = scenario_preset("e");
    EXPECT_DOUBLE_EQ(end_of_study_mean(e.truth().beta, e.model_spec()), 5 + 2 * 1.0 - 2.5 + 2 * 0.75);
}

TEST(EndOfStudy, DeltaMethodSe) {
    const auto a = scenario_preset("a");
    Matrix cov = Matrix::Zero(9, 9);
    for (int i = 0; i < 5; ++i) cov(i, i) = 0.1 * (i + 1);
    cov(0, 1) = cov(1, 0) = 0.05;
    // var = sum a_i^2 v_i + 2 a0 a1 c01
    const double v = 1 * 0.1 + 4 * 0.2 + 1 * 0.3 + 4 * 0.4 + 1 * 0.5 + 2 * 1 * 2 * 0.05;
    EXPECT_NEAR(end_of_study_se(cov, a.model_spec()), std::sqrt(v), 1e-14);
}

TEST(Jackknife, MatchesBruteForce) {
    std::mt19937_64 rng(8);
    std::normal_distribution<double> z;
    std::vector<double> a, b;
    for (int i = 0; i < 40; ++i) {
        a.push_back(3 + 2 * z(rng));
        b.push_back(1 + z(rng));
    }
    EXPECT_NEAR(jackknife_ratio_se(a, b), jackknife_oracle(a, b), 1e-10);
}

TEST(Report, SyntheticVariancesAndBias) {
    StudyConfig cfg;
    cfg.designs = {DesignKind::rs, DesignKind::ods_i};
    cfg.analyses = {AnalysisKind::cd};
    const Vector truth = truth_vector(cfg.scenario);
    std::mt19937_64 rng(12);
    std::normal_distribution<double> z;
    std::vector<ReplicationResult> res;
    std::vector<double> b0, o0;
    for (std::size_t r = 0; r < 200; ++r) {
        std::vector<double> base(truth.data(), truth.data() + truth.size()), other = base;
        for (auto& v : base) v += 2.0 * z(rng);
        for (auto& v : other) v += 1.0 + z(rng);
        b0.push_back(base[0]);
        o0.push_back(other[0]);
        res.push_back(synthetic(r, base, other));
    }
    const auto rep = efficiency_report(cfg, res);
    EXPECT_FALSE(rep.failed);
    const auto* p = rep.find(DesignKind::ods_i, AnalysisKind::cd, "intercept");
    ASSERT_NE(p, nullptr);
    auto var = [](const std::vector<double>& x) {
        double m = std::accumulate(x.begin(), x.end(), 0.0) / x.size(), s = 0;
        for (double v : x) s += (v - m) * (v - m);
        return s / (x.size() - 1);
    };
    EXPECT_NEAR(p->rel_eff, var(b0) / var(o0), 1e-10);
    EXPECT_NEAR(p->rel_eff_mcse, jackknife_oracle(b0, o0), 1e-10);
    const double mean = std::accumulate(o0.begin(), o0.end(), 0.0) / o0.size();
    EXPECT_NEAR(p->bias_pct, 100 * (mean - 5.0) / 5.0, 1e-10);
    EXPECT_NEAR(p->se_bias_pct, 100 * (0.5 - std::sqrt(var(o0))) / std::sqrt(var(o0)), 1e-10);
    const auto* base = rep.find(DesignKind::rs, AnalysisKind::cd, "intercept");
    EXPECT_EQ(base->rel_eff, 1.0);
    EXPECT_EQ(rep.parameter_names.back(), "eos_mean");
}

TEST(Report, ExclusionThreshold) {
    StudyConfig cfg;
    cfg.designs = {DesignKind::rs, DesignKind::ods_i};
    cfg.analyses = {AnalysisKind::cd};
    const Vector truth = truth_vector(cfg.scenario);
    std::vector<double> v(truth.data(), truth.data() + truth.size());
    auto build = [&](int failures) {
        std::vector<ReplicationResult> res;
        std::mt19937_64 rng(3);
        std::normal_distribution<double> z;
        for (int r = 0; r < 100; ++r) {
            auto a = v, b = v;
            for (auto& x : a) x += z(rng);
            for (auto& x : b) x += z(rng);
            res.push_back(synthetic(r, a, b, r >= failures));
        }
        return efficiency_report(cfg, res);
    };
    // 200 cells in total: 4 failures is exactly 2 %, 5 exceeds it
    const auto ok = build(4);
    EXPECT_DOUBLE_EQ(ok.exclusion_rate, 0.02);
    EXPECT_FALSE(ok.failed);
    EXPECT_EQ(ok.find(DesignKind::ods_i, AnalysisKind::cd)->n_excluded, 4u);
    EXPECT_EQ(ok.find(DesignKind::ods_i, AnalysisKind::cd)->exclusion_messages.size(), 4u);
    EXPECT_TRUE(build(5).failed);
}

TEST(Config, Validation) {
    StudyConfig cfg;
    EXPECT_EQ(cfg.m(), 25);
    cfg.scenario = scenario_preset("d");
    EXPECT_EQ(cfg.m(), 35);
    cfg.imputations = 1;
    EXPECT_THROW(cfg.validate(), SpecError);
    cfg.imputations.reset();
    cfg.designs = {DesignKind::ods_i};
    EXPECT_THROW(cfg.validate(), SpecError);
}

TEST(Replication, AllCellsSucceed) {
    const auto sc = scenario_preset("a");
    std::vector<StudyDesign> designs;
    for (auto d : all_designs()) designs.push_back(build_design(sc, d));
    const auto rr = run_replication(sc, designs, all_analyses(), 5, SeedTree(77));
    EXPECT_EQ(rr.cells.size(), 12u);
    for (const auto& [cell, est] : rr.cells) {
        EXPECT_TRUE(est.ok) << cell_label(cell) << ": " << est.message;
        EXPECT_EQ(est.estimate.size(), 10);
        // every design targets about 250 subjects
        EXPECT_GT(est.n_sampled, 180u);
        EXPECT_LT(est.n_sampled, 320u);
    }
    // fully observed parameters stay near the truth
    EXPECT_NEAR(rr.cells.at({DesignKind::ods_i, AnalysisKind::cdmi}).estimate[1], 1.0, 0.5);
}

TEST(Study, ThreadCountDoesNotChangeResults) {
    StudyConfig cfg;
    cfg.replications = 3;
    cfg.imputations = 3;
    cfg.designs = {DesignKind::rs, DesignKind::ods_s};
    const auto one = run_study(cfg, 1);
    const auto three = run_study(cfg, 3);
    ASSERT_EQ(one.size(), three.size());
    for (std::size_t r = 0; r < one.size(); ++r) {
        EXPECT_EQ(one[r].index, r);
        for (const auto& [cell, est] : one[r].cells) {
            const auto& other = three[r].cells.at(cell);
            EXPECT_EQ(est.ok, other.ok);
            EXPECT_TRUE(est.estimate == other.estimate) << cell_label(cell);
            EXPECT_TRUE(est.se == other.se);
        }
    }
    // a different master seed changes the draws
    cfg.master_seed += 1;
    const auto moved = run_study(cfg, 1);
    EXPECT_FALSE(moved[0].cells.at({DesignKind::rs, AnalysisKind::cd}).estimate ==
                 one[0].cells.at({DesignKind::rs, AnalysisKind::cd}).estimate);
}

TEST(GenerateCohort, MarginalExposureFrequency) {
    // 0.5 * 0.4 + 0.5 * 0.55
    const auto sc = scenario_preset("a");
    Rng rng(5);
    double n = 0, g = 0;
    for (int r = 0; r < 200; ++r) {
        for (const auto& s : generate_cohort(sc, rng).subjects) {
            g += *s.exposure;
            n += 1;
        }
    }
    const double p = 0.475;
    EXPECT_NEAR(g / n, p, 3 * std::sqrt(p * (1 - p) / n));
}

TEST(Report, IdenticalStreamsGiveUnitRatio) {
    StudyConfig cfg;
    cfg.designs = {DesignKind::rs, DesignKind::ods_i};
    cfg.analyses = {AnalysisKind::cd};
    const Vector truth = truth_vector(cfg.scenario);
    std::mt19937_64 rng(21);
    std::normal_distribution<double> z;
    std::vector<ReplicationResult> res;
    for (std::size_t r = 0; r < 50; ++r) {
        std::vector<double> v(truth.data(), truth.data() + truth.size());
        for (auto& x : v) x += z(rng);
        res.push_back(synthetic(r, v, v));
    }
    const auto rep = efficiency_report(cfg, res);
    for (const auto& p : rep.find(DesignKind::ods_i, AnalysisKind::cd)->parameters) EXPECT_EQ(p.rel_eff, 1.0) << p.name;
}

TEST(Replication, BivariateSmoke) {
    const auto sc = scenario_preset("a");
    const auto d = build_design(sc, DesignKind::ods_b);
    const auto est = run_replication(sc, DesignKind::ods_b, AnalysisKind::cd, 25, SeedTree(2024));
    ASSERT_TRUE(est.ok) << est.message;
    EXPECT_TRUE(est.estimate.allFinite());
    EXPECT_TRUE((est.se.array() > 0).all());
    // binomial spread: the outer region is sampled with probability 1
    const double pc = d.spec.probabilities[0], mc = 0.76 * 750;
    const double sd = std::sqrt(mc * pc * (1 - pc));
    EXPECT_NEAR(static_cast<double>(est.n_sampled), 250.0, 3 * sd + 3 * std::sqrt(750 * 0.76 * 0.24));
}
