#ifndef ODSMI_DESIGN_HPP
#define ODSMI_DESIGN_HPP

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "odsmi/errors.hpp"
#include "odsmi/linalg.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/numkit/bvn.hpp"
#include "odsmi/numkit/normal.hpp"
#include "odsmi/rng.hpp"
#include "odsmi/scenario.hpp"

namespace odsmi::design {

inline constexpr double inf = std::numeric_limits<double>::infinity();

enum class SummaryKind { intercept, slope, bivariate };

inline std::string to_string(SummaryKind k) {
    switch (k) {
    case SummaryKind::intercept: return "intercept";
    case SummaryKind::slope: return "slope";
    case SummaryKind::bivariate: return "bivariate";
    }
    return {};
}

inline SummaryKind summary_kind_from_string(const std::string& s) {
    if (s == "intercept") return SummaryKind::intercept;
    if (s == "slope") return SummaryKind::slope;
    if (s == "bivariate") return SummaryKind::bivariate;
    throw SpecError("unknown summary kind '" + s + "' (expected intercept, slope or bivariate)");
}

// Summary of the subject-specific OLS line of outcome on time.
struct SummarySpec {
    SummaryKind kind = SummaryKind::intercept;

    int dim() const { return kind == SummaryKind::bivariate ? 2 : 1; }

    // rows of W = (X'X)^{-1} X' selected by the summary kind
    Matrix select(const Matrix& w) const {
        switch (kind) {
        case SummaryKind::intercept: return w.topRows(1);
        case SummaryKind::slope: return w.bottomRows(1);
        case SummaryKind::bivariate: return w;
        }
        return w;
    }

    bool operator==(const SummarySpec&) const = default;
};

// W = (X_t' X_t)^{-1} X_t' for X_t = (1, times); 2 x n.
inline Matrix ols_weights(const Vector& times) {
    const Matrix xt = lmm::random_design(times);
    const Matrix xtx = xt.transpose() * xt;
    const double det = xtx.determinant();
    if (times.size() < 2 || !(std::abs(det) > 1e-12 * std::max(1.0, xtx.cwiseAbs().maxCoeff()))) {
        throw RankError("summary: time design is rank deficient (need at least two distinct times)");
    }
    return xtx.ldlt().solve(xt.transpose());
}

inline Vector compute_summary(const lmm::Subject& subject, const SummarySpec& spec) {
    try {
        return spec.select(ols_weights(subject.times)) * subject.outcomes;
    } catch (const RankError& e) {
        throw RankError("subject '" + subject.id + "': " + e.what());
    }
}

// ---------------------------------------------------------------------------
// Regions and designs

struct Interval {
    double lo = -inf;
    double hi = inf;
    bool contains(double x) const { return lo < x && x <= hi; }
    bool operator==(const Interval&) const = default;
};

// Product of half-open intervals (lo, hi]; `complement` marks the region
// made of everything not covered by the design's other regions.
struct Region {
    std::vector<Interval> bounds;
    bool complement = false;

    bool contains_box(const Vector& q) const {
        for (std::size_t d = 0; d < bounds.size(); ++d) {
            if (!bounds[d].contains(q[static_cast<Eigen::Index>(d)])) {
                return false;
            }
        }
        return true;
    }

    bool operator==(const Region&) const = default;
};

struct DesignSpec {
    SummarySpec summary;
    std::vector<Region> regions;
    std::vector<double> probabilities;

    // Throws DesignError unless regions partition the summary space and
    // probabilities lie in [0, 1].
    void validate() const {
        const auto dim = static_cast<std::size_t>(summary.dim());
        if (regions.empty()) throw DesignError("design: no regions");
        if (regions.size() != probabilities.size()) {
            throw DesignError("design: " + std::to_string(regions.size()) + " regions but " +
                              std::to_string(probabilities.size()) + " probabilities");
        }
        for (std::size_t k = 0; k < probabilities.size(); ++k) {
            if (!(probabilities[k] >= 0.0 && probabilities[k] <= 1.0)) {
                throw DesignError("design: probability for region " + std::to_string(k) + " outside [0, 1]");
            }
        }
        int n_complement = 0;
        for (std::size_t k = 0; k < regions.size(); ++k) {
            const auto& r = regions[k];
            if (r.complement) {
                ++n_complement;
                continue;
            }
            if (r.bounds.size() != dim) {
                throw DesignError("design: region " + std::to_string(k) + " has wrong dimension");
            }
            for (const auto& b : r.bounds) {
                if (!(b.lo < b.hi)) throw DesignError("design: region " + std::to_string(k) + " is empty");
            }
        }
        if (n_complement > 1) throw DesignError("design: more than one complement region");
        // Disjointness and coverage are checked on the cell arrangement
        // induced by all finite bounds: one probe point per cell decides it.
        std::vector<std::vector<double>> probes(dim);
        for (std::size_t d = 0; d < dim; ++d) {
            std::vector<double> cuts;
            for (const auto& r : regions) {
                if (r.complement) continue;
                for (double v : {r.bounds[d].lo, r.bounds[d].hi}) {
                    if (std::isfinite(v)) cuts.push_back(v);
                }
            }
            std::sort(cuts.begin(), cuts.end());
            cuts.erase(std::unique(cuts.begin(), cuts.end()), cuts.end());
            if (cuts.empty()) {
                probes[d] = {0.0};
                continue;
            }
            probes[d].push_back(cuts.front() - 1.0);
            for (std::size_t i = 0; i < cuts.size(); ++i) {
                probes[d].push_back(cuts[i]); // the closed upper edge of a cell
                probes[d].push_back(i + 1 < cuts.size() ? 0.5 * (cuts[i] + cuts[i + 1]) : cuts[i] + 1.0);
            }
        }
        Vector q(static_cast<Eigen::Index>(dim));
        auto check = [&](auto&& self, std::size_t d) -> void {
            if (d == dim) {
                int hits = 0;
                for (const auto& r : regions) {
                    if (!r.complement && r.contains_box(q)) ++hits;
                }
                if (hits > 1) throw DesignError("design: regions overlap");
                if (hits == 0 && n_complement == 0) throw DesignError("design: regions do not cover the summary space");
                return;
            }
            for (double v : probes[d]) {
                q[static_cast<Eigen::Index>(d)] = v;
                self(self, d + 1);
            }
        };
        check(check, 0);
    }

    std::size_t region_index(const Vector& q) const {
        std::size_t complement = regions.size();
        for (std::size_t k = 0; k < regions.size(); ++k) {
            if (regions[k].complement) {
                complement = k;
            } else if (regions[k].contains_box(q)) {
                return k;
            }
        }
        if (complement == regions.size()) {
            throw DesignError("design: summary value lies in no region");
        }
        return complement;
    }

    double probability_of(const Vector& q) const { return probabilities[region_index(q)]; }

    bool operator==(const DesignSpec&) const = default;
};

// Scalar design with cut points c_1 < ... < c_{K-1}: regions (-inf, c_1],
// (c_1, c_2], ..., (c_{K-1}, inf).
inline DesignSpec interval_design(SummaryKind kind, const std::vector<double>& cutoffs,
                                  const std::vector<double>& probabilities) {
    if (kind == SummaryKind::bivariate) throw SpecError("interval_design: scalar summary required");
    DesignSpec d;
    d.summary = {kind};
    double lo = -inf;
    for (double c : cutoffs) {
        if (!(c > lo)) throw DesignError("interval_design: cutoffs must be strictly increasing");
        d.regions.push_back({{{lo, c}}, false});
        lo = c;
    }
    d.regions.push_back({{{lo, inf}}, false});
    d.probabilities = probabilities;
    d.validate();
    return d;
}

// Central rectangle (first region) and its complement (second region).
inline DesignSpec rectangle_design(const Region& central, double p_central, double p_outer) {
    DesignSpec d;
    d.summary = {SummaryKind::bivariate};
    d.regions = {central, Region{{}, true}};
    d.probabilities = {p_central, p_outer};
    d.validate();
    return d;
}

// Single region covering everything: simple random sampling.
inline DesignSpec uniform_design(SummaryKind kind, double p) {
    DesignSpec d;
    d.summary = {kind};
    d.regions = {Region{std::vector<Interval>(static_cast<std::size_t>(d.summary.dim())), false}};
    d.probabilities = {p};
    d.validate();
    return d;
}

// ---------------------------------------------------------------------------
// Population law of the summary: a finite Gaussian mixture

struct GaussianComponent {
    double weight = 0.0;
    Vector mean;
    Matrix cov;
};

struct SummaryMixture {
    std::vector<GaussianComponent> components;
    int dim = 1;

    double marginal_cdf(int d, double x) const {
        double p = 0.0;
        for (const auto& c : components) {
            p += c.weight * numkit::std_normal_cdf((x - c.mean[d]) / std::sqrt(c.cov(d, d)));
        }
        return p;
    }

    // Bisection on the mixture CDF of component d.
    double marginal_quantile(int d, double prob) const {
        if (!(prob > 0.0 && prob < 1.0)) throw SpecError("marginal_quantile: probability must lie in (0, 1)");
        double lo = inf, hi = -inf;
        for (const auto& c : components) {
            const double s = std::sqrt(c.cov(d, d));
            lo = std::min(lo, c.mean[d] - 40.0 * s);
            hi = std::max(hi, c.mean[d] + 40.0 * s);
        }
        double flo = marginal_cdf(d, lo), fhi = marginal_cdf(d, hi);
        if (!(flo <= prob && prob <= fhi)) throw Error("marginal_quantile: CDF bracket does not contain the target");
        for (int it = 0; it < 200 && hi - lo > 1e-13 * std::max(1.0, std::abs(hi)); ++it) {
            const double mid = 0.5 * (lo + hi);
            const double fm = marginal_cdf(d, mid);
            if (fm < flo - 1e-15 || fm > fhi + 1e-15) {
                throw Error("marginal_quantile: non-monotone CDF evaluation");
            }
            if (fm < prob) {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
                fhi = fm;
            }
        }
        return 0.5 * (lo + hi);
    }

    double region_mass(const Region& r) const {
        if (r.complement) throw SpecError("region_mass: complement region has no standalone mass");
        double p = 0.0;
        for (const auto& c : components) {
            if (dim == 1) {
                p += c.weight * numkit::interval_prob(r.bounds[0].lo, r.bounds[0].hi, c.mean[0], c.cov(0, 0)).prob;
            } else {
                p += c.weight * numkit::bvn_rect_prob({r.bounds[0].lo, r.bounds[1].lo}, {r.bounds[0].hi, r.bounds[1].hi},
                                                      {c.mean[0], c.mean[1]}, SymMatrix(c.cov));
            }
        }
        return p;
    }
};

// Mixture over the (G, C) cells of the scenario with per-cell mean W mu and
// covariance W V W'.
inline SummaryMixture summary_mixture(const Scenario& sc, const SummarySpec& spec) {
    sc.validate();
    const Vector t = sc.time_grid();
    const Matrix w = spec.select(ols_weights(t));
    const lmm::Theta th = lmm::Theta::from_natural(Vector::Zero(1), sc.sigma0, sc.sigma1, sc.rho, sc.sigma_e);
    const Matrix v = lmm::marginal_cov(th, t).matrix();
    SummaryMixture mix;
    mix.dim = spec.dim();
    for (int c = 0; c <= 1; ++c) {
        const double pc = c == 1 ? sc.pr_c : 1.0 - sc.pr_c;
        for (int g = 0; g <= 1; ++g) {
            const double pg = g == 1 ? sc.pr_exposure(c) : 1.0 - sc.pr_exposure(c);
            const auto& b = sc.beta;
            const Vector mu = (b[0] + b[2] * g + b[4] * c) * Vector::Ones(t.size()) + (b[1] + b[3] * g) * t;
            mix.components.push_back({pc * pg, w * mu, w * v * w.transpose()});
        }
    }
    return mix;
}

inline std::vector<double> population_cutoffs(const SummaryMixture& mix, const std::vector<double>& percentiles) {
    std::vector<double> out;
    for (double p : percentiles) {
        if (!(p > 0.0 && p < 1.0)) throw SpecError("population_cutoffs: percentiles must lie strictly inside (0, 1)");
        out.push_back(mix.marginal_quantile(0, p));
    }
    return out;
}

inline std::vector<double> population_cutoffs(const Scenario& sc, const SummarySpec& spec,
                                              const std::vector<double>& percentiles) {
    if (spec.kind == SummaryKind::bivariate) {
        throw SpecError("population_cutoffs: scalar summary required (use bivariate_central_region)");
    }
    return population_cutoffs(summary_mixture(sc, spec), percentiles);
}

// ---------------------------------------------------------------------------
// Empirical counterparts

// Hyndman-Fan type 7 (linear interpolation between order statistics).
inline double quantile_type7(std::vector<double> sorted_or_not, double p, bool sorted = false) {
    if (sorted_or_not.empty()) throw SpecError("quantile: empty sample");
    if (!(p >= 0.0 && p <= 1.0)) throw SpecError("quantile: probability outside [0, 1]");
    if (!sorted) std::sort(sorted_or_not.begin(), sorted_or_not.end());
    const auto& x = sorted_or_not;
    const double h = (static_cast<double>(x.size()) - 1.0) * p;
    const auto lo = static_cast<std::size_t>(std::floor(h));
    const auto hi = std::min(lo + 1, x.size() - 1);
    return x[lo] + (h - static_cast<double>(lo)) * (x[hi] - x[lo]);
}

inline std::vector<Vector> cohort_summaries(const lmm::Cohort& cohort, const SummarySpec& spec) {
    std::vector<Vector> out;
    out.reserve(cohort.size());
    for (const auto& s : cohort.subjects) {
        out.push_back(compute_summary(s, spec));
    }
    return out;
}

inline std::vector<double> empirical_cutoffs(const lmm::Cohort& cohort, const SummarySpec& spec,
                                             const std::vector<double>& percentiles, int component = 0) {
    if (cohort.subjects.empty()) throw SpecError("empirical_cutoffs: empty cohort");
    std::vector<double> vals;
    for (const auto& q : cohort_summaries(cohort, spec)) {
        vals.push_back(q[component]);
    }
    std::sort(vals.begin(), vals.end());
    std::vector<double> out;
    for (double p : percentiles) {
        out.push_back(quantile_type7(vals, p, true));
    }
    return out;
}

// Fraction of the cohort falling in each region.
inline std::vector<double> empirical_region_masses(const DesignSpec& design, const std::vector<Vector>& summaries) {
    std::vector<double> counts(design.regions.size(), 0.0);
    for (const auto& q : summaries) {
        counts[design.region_index(q)] += 1.0;
    }
    for (auto& c : counts) c /= static_cast<double>(summaries.size());
    return counts;
}

inline std::vector<double> region_masses(const DesignSpec& design, const SummaryMixture& mix) {
    std::vector<double> out;
    double covered = 0.0;
    std::size_t complement = design.regions.size();
    for (std::size_t k = 0; k < design.regions.size(); ++k) {
        if (design.regions[k].complement) {
            complement = k;
            out.push_back(0.0);
            continue;
        }
        out.push_back(mix.region_mass(design.regions[k]));
        covered += out.back();
    }
    if (complement < design.regions.size()) out[complement] = std::max(0.0, 1.0 - covered);
    return out;
}

// pi_k = target_k / (mass_k N); a target beyond the region's expected
// count is infeasible.
inline std::vector<double> calibrate_probabilities(const std::vector<double>& region_masses,
                                                   const std::vector<double>& target_counts, double n_subjects) {
    if (region_masses.size() != target_counts.size()) {
        throw SpecError("calibrate_probabilities: masses and targets differ in length");
    }
    const double total = std::accumulate(region_masses.begin(), region_masses.end(), 0.0);
    if (std::abs(total - 1.0) > 1e-6) throw SpecError("calibrate_probabilities: region masses must sum to 1");
    std::vector<double> pi;
    for (std::size_t k = 0; k < region_masses.size(); ++k) {
        const double avail = region_masses[k] * n_subjects;
        if (target_counts[k] < 0.0) throw SpecError("calibrate_probabilities: negative target");
        if (target_counts[k] > avail * (1.0 + 1e-9)) {
            throw DesignError("region " + std::to_string(k) + " is infeasible: target " + std::to_string(target_counts[k]) +
                              " exceeds expected count " + std::to_string(avail));
        }
        pi.push_back(avail > 0.0 ? std::min(1.0, target_counts[k] / avail) : 0.0);
    }
    return pi;
}

// ---------------------------------------------------------------------------
// Sampling

// Independent Bernoulli(pi(region of q_i)) per subject.
inline std::vector<bool> draw_sample(const lmm::Cohort& cohort, const DesignSpec& design, Rng& rng) {
    design.validate();
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::vector<bool> flags;
    flags.reserve(cohort.size());
    for (const auto& s : cohort.subjects) {
        const double p = design.probability_of(compute_summary(s, design.summary));
        const double draw = u(rng);
        flags.push_back(draw < p);
    }
    return flags;
}

// Exactly counts[k] subjects without replacement from each region.
inline std::vector<bool> draw_sample_exact(const lmm::Cohort& cohort, const DesignSpec& design,
                                           const std::vector<std::size_t>& counts, Rng& rng) {
    design.validate();
    if (counts.size() != design.regions.size()) throw SpecError("draw_sample_exact: one count per region required");
    std::vector<std::vector<std::size_t>> members(design.regions.size());
    for (std::size_t i = 0; i < cohort.size(); ++i) {
        members[design.region_index(compute_summary(cohort.subjects[i], design.summary))].push_back(i);
    }
    std::vector<bool> flags(cohort.size(), false);
    for (std::size_t k = 0; k < members.size(); ++k) {
        auto& m = members[k];
        if (counts[k] > m.size()) {
            throw DesignError("region " + std::to_string(k) + " holds " + std::to_string(m.size()) + " subjects, " +
                              std::to_string(counts[k]) + " requested");
        }
        for (std::size_t j = 0; j < counts[k]; ++j) {
            std::uniform_int_distribution<std::size_t> pick(j, m.size() - 1);
            std::swap(m[j], m[pick(rng)]);
            flags[m[j]] = true;
        }
    }
    return flags;
}

// Sets the sampled flags and, when `mask_exposure`, drops the exposure of
// unsampled subjects.
inline lmm::Cohort apply_sample(lmm::Cohort cohort, const std::vector<bool>& flags, bool mask_exposure = true) {
    if (flags.size() != cohort.size()) throw SpecError("apply_sample: one flag per subject required");
    for (std::size_t i = 0; i < flags.size(); ++i) {
        auto& s = cohort.subjects[i];
        s.sampled = flags[i];
        if (flags[i] && !s.exposure) {
            throw SpecError("subject '" + s.id + "' sampled but exposure unavailable");
        }
        if (!flags[i] && mask_exposure) s.exposure.reset();
    }
    return cohort;
}

// ---------------------------------------------------------------------------
// Bivariate central rectangle: product of marginal (tau, 1 - tau) quantile
// intervals, tau chosen by bisection so the joint mass hits target_mass.

struct CentralRegionResult {
    Region region;
    double tail_level = 0.0;
    double mass = 1.0;
};

inline Region whole_plane() { return Region{{Interval{}, Interval{}}, false}; }

template <typename MassAt>
CentralRegionResult bisect_tail_level(double target_mass, MassAt&& mass_at, double tol) {
    if (!(target_mass > 0.0 && target_mass <= 1.0)) {
        throw SpecError("bivariate_central_region: target mass must lie in (0, 1]");
    }
    if (target_mass == 1.0) return {whole_plane(), 0.0, 1.0};
    double lo = 1e-12, hi = 0.5 - 1e-12;
    CentralRegionResult best;
    best.mass = -1.0;
    auto consider = [&](double tau) {
        auto [region, mass] = mass_at(tau);
        if (best.mass < 0.0 || std::abs(mass - target_mass) < std::abs(best.mass - target_mass)) {
            best = {region, tau, mass};
        }
        return mass;
    };
    const double m_lo = consider(lo);
    const double m_hi = consider(hi);
    if (!(m_lo >= target_mass && m_hi <= target_mass)) {
        throw Error("bivariate_central_region: target mass " + std::to_string(target_mass) + " not bracketed by [" +
                    std::to_string(m_hi) + ", " + std::to_string(m_lo) + "]");
    }
    for (int it = 0; it < 200 && hi - lo > 1e-13; ++it) {
        const double mid = 0.5 * (lo + hi);
        const double m = consider(mid);
        if (std::abs(m - target_mass) < tol) break;
        (m > target_mass ? lo : hi) = mid;
    }
    return best;
}

inline CentralRegionResult bivariate_central_region(const SummaryMixture& mix, double target_mass) {
    if (mix.dim != 2) throw SpecError("bivariate_central_region: bivariate summary required");
    return bisect_tail_level(
        target_mass,
        [&](double tau) {
            Region r{{Interval{mix.marginal_quantile(0, tau), mix.marginal_quantile(0, 1.0 - tau)},
                      Interval{mix.marginal_quantile(1, tau), mix.marginal_quantile(1, 1.0 - tau)}},
                     false};
            return std::pair{r, mix.region_mass(r)};
        },
        1e-10);
}

inline CentralRegionResult bivariate_central_region(const Scenario& sc, double target_mass) {
    return bivariate_central_region(summary_mixture(sc, {SummaryKind::bivariate}), target_mass);
}

inline CentralRegionResult bivariate_central_region(const std::vector<Vector>& summaries, double target_mass) {
    if (summaries.empty()) throw SpecError("bivariate_central_region: empty cohort");
    std::vector<double> a, b;
    for (const auto& q : summaries) {
        if (q.size() != 2) throw SpecError("bivariate_central_region: bivariate summaries required");
        a.push_back(q[0]);
        b.push_back(q[1]);
    }
    std::sort(a.begin(), a.end());
    std::sort(b.begin(), b.end());
    return bisect_tail_level(
        target_mass,
        [&](double tau) {
            Region r{{Interval{quantile_type7(a, tau, true), quantile_type7(a, 1.0 - tau, true)},
                      Interval{quantile_type7(b, tau, true), quantile_type7(b, 1.0 - tau, true)}},
                     false};
            double inside = 0.0;
            for (const auto& q : summaries) inside += r.contains_box(q) ? 1.0 : 0.0;
            return std::pair{r, inside / static_cast<double>(summaries.size())};
        },
        0.5 / static_cast<double>(summaries.size()));
}

inline CentralRegionResult bivariate_central_region(const lmm::Cohort& cohort, double target_mass) {
    return bivariate_central_region(cohort_summaries(cohort, {SummaryKind::bivariate}), target_mass);
}

} // namespace odsmi::design

#endif
