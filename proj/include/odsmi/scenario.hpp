#ifndef ODSMI_SCENARIO_HPP
#define ODSMI_SCENARIO_HPP

#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "odsmi/errors.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/rng.hpp"

namespace odsmi {

// Generating model for the simulation study. beta is always the full
// (beta0, beta_t, beta_g, beta_gt, beta_c); include_c_in_model controls
// whether c enters the analysis model.
struct Scenario {
    std::string name;
    int n_subjects = 750;
    Vector beta = (Vector(5) << 5.0, 1.0, -2.5, 0.75, 1.0).finished();
    double delta_c = 0.15;
    bool include_c_in_model = true;
    double sigma0 = 5.0;
    double sigma1 = 1.25;
    double rho = -0.25;
    double sigma_e = 5.0;
    int n_obs = 10;
    double pr_c = 0.5;
    double pr_g_base = 0.4;

    // t_j = -2 + 4 (j - 1) / (n_obs - 1)
    Vector time_grid() const {
        Vector t(n_obs);
        for (int j = 0; j < n_obs; ++j) {
            t[j] = n_obs == 1 ? 0.0 : -2.0 + 4.0 * j / (n_obs - 1);
        }
        return t;
    }

    double pr_exposure(double c) const { return pr_g_base + delta_c * c; }

    lmm::ModelSpec model_spec() const {
        return lmm::ModelSpec::standard(include_c_in_model ? std::vector<std::string>{"c"} : std::vector<std::string>{});
    }

    // True parameter on the analysis model's scale.
    lmm::Theta truth() const {
        const Vector b = include_c_in_model ? beta : beta.head(4).eval();
        return lmm::Theta::from_natural(b, sigma0, sigma1, rho, sigma_e);
    }

    void validate() const {
        if (n_subjects < 1) throw SpecError("scenario: N must be positive");
        if (beta.size() != 5) throw SpecError("scenario: beta must have 5 entries (b0, bt, bg, bgt, bc)");
        if (!include_c_in_model && beta[4] != 0.0) {
            throw SpecError("scenario: beta_c must be 0 when c is excluded from the model");
        }
        if (n_obs < 2) throw SpecError("scenario: need at least 2 observations per subject");
        if (!(sigma0 > 0 && sigma1 > 0 && sigma_e > 0)) throw SpecError("scenario: standard deviations must be positive");
        if (!(std::abs(rho) < 1.0)) throw SpecError("scenario: |rho| must be < 1");
        if (!(pr_c > 0.0 && pr_c < 1.0)) throw SpecError("scenario: pr_c must lie in (0, 1)");
        for (double c : {0.0, 1.0}) {
            const double p = pr_exposure(c);
            if (!(p > 0.0 && p < 1.0)) throw SpecError("scenario: pr(G=1|C) must lie in (0, 1)");
        }
    }
};

inline std::vector<std::string> scenario_preset_names() { return {"a", "b", "c", "d", "e"}; }

// Presets identified by (N, beta_g, delta_c, beta_c).
inline Scenario scenario_preset(const std::string& name) {
    Scenario s;
    s.name = name;
    if (name == "a") {
    } else if (name == "b") {
        s.beta[2] = -4.0;
    } else if (name == "c") {
        s.delta_c = 0.35;
    } else if (name == "d") {
        s.n_subjects = 2250;
    } else if (name == "e") {
        s.delta_c = 0.55;
        s.beta[4] = 0.0;
        s.include_c_in_model = false;
    } else {
        throw SpecError("unknown scenario preset '" + name + "' (valid presets: a, b, c, d, e)");
    }
    return s;
}

// N subjects from the generating model with every exposure stored; the
// design masks them later. c is always carried as a cheap covariate, even
// when the analysis model excludes it.
inline lmm::Cohort generate_cohort(const Scenario& sc, Rng& rng) {
    sc.validate();
    std::normal_distribution<double> z;
    std::uniform_real_distribution<double> u;
    const Vector t = sc.time_grid();
    const auto& b = sc.beta;
    const double slope_cond = std::sqrt(1.0 - sc.rho * sc.rho);
    lmm::Cohort cohort;
    cohort.spec = sc.model_spec();
    cohort.subjects.reserve(static_cast<std::size_t>(sc.n_subjects));
    for (int i = 0; i < sc.n_subjects; ++i) {
        lmm::Subject s;
        s.id = std::to_string(i + 1);
        s.times = t;
        const double c = u(rng) < sc.pr_c ? 1.0 : 0.0;
        const int g = u(rng) < sc.pr_exposure(c) ? 1 : 0;
        const double z0 = z(rng);
        const double z1 = z(rng);
        const double b0 = sc.sigma0 * z0;
        const double b1 = sc.sigma1 * (sc.rho * z0 + slope_cond * z1);
        s.outcomes.resize(t.size());
        for (Eigen::Index j = 0; j < t.size(); ++j) {
            s.outcomes[j] = b[0] + b[1] * t[j] + b[2] * g + b[3] * g * t[j] + b[4] * c + b0 + b1 * t[j] + sc.sigma_e * z(rng);
        }
        s.covariates["c"] = c;
        s.exposure = g;
        cohort.subjects.push_back(std::move(s));
    }
    return cohort;
}

} // namespace odsmi

#endif
