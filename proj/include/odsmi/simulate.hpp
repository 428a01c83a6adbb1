#ifndef ODSMI_SIMULATE_HPP
#define ODSMI_SIMULATE_HPP

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "odsmi/acl.hpp"
#include "odsmi/design.hpp"
#include "odsmi/errors.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/mi.hpp"
#include "odsmi/rng.hpp"
#include "odsmi/scenario.hpp"

namespace odsmi::simulate {

enum class DesignKind { rs, ods_i, ods_s, ods_b };
enum class AnalysisKind { cd, cdmi, dmi };

inline std::string to_string(DesignKind d) {
    switch (d) {
    case DesignKind::rs: return "rs";
    case DesignKind::ods_i: return "ods.i";
    case DesignKind::ods_s: return "ods.s";
    case DesignKind::ods_b: return "ods.b";
    }
    return {};
}

inline std::string to_string(AnalysisKind a) {
    switch (a) {
    case AnalysisKind::cd: return "cd";
    case AnalysisKind::cdmi: return "cdmi";
    case AnalysisKind::dmi: return "dmi";
    }
    return {};
}

inline DesignKind design_kind_from_string(const std::string& s) {
    for (auto d : {DesignKind::rs, DesignKind::ods_i, DesignKind::ods_s, DesignKind::ods_b}) {
        if (to_string(d) == s) return d;
    }
    throw SpecError("unknown design '" + s + "' (expected rs, ods.i, ods.s or ods.b)");
}

inline AnalysisKind analysis_kind_from_string(const std::string& s) {
    for (auto a : {AnalysisKind::cd, AnalysisKind::cdmi, AnalysisKind::dmi}) {
        if (to_string(a) == s) return a;
    }
    throw SpecError("unknown analysis '" + s + "' (expected cd, cdmi or dmi)");
}

inline const std::vector<DesignKind>& all_designs() {
    static const std::vector<DesignKind> v{DesignKind::rs, DesignKind::ods_i, DesignKind::ods_s, DesignKind::ods_b};
    return v;
}

inline const std::vector<AnalysisKind>& all_analyses() {
    static const std::vector<AnalysisKind> v{AnalysisKind::cd, AnalysisKind::cdmi, AnalysisKind::dmi};
    return v;
}

// ---------------------------------------------------------------------------
// Designs of the simulation study, fixed once per scenario

inline constexpr double rs_sample_size = 250.0;
inline constexpr double tail_percentile = 0.12;
inline constexpr double central_mass = 0.76;

struct StudyDesign {
    DesignKind kind = DesignKind::rs;
    design::DesignSpec spec;
    std::optional<std::size_t> exact_count; // RS draws exactly this many
};

inline StudyDesign build_design(const Scenario& sc, DesignKind kind) {
    const double n = sc.n_subjects;
    StudyDesign d;
    d.kind = kind;
    switch (kind) {
    case DesignKind::rs:
        d.spec = design::uniform_design(design::SummaryKind::intercept, rs_sample_size / n);
        d.exact_count = static_cast<std::size_t>(rs_sample_size);
        break;
    case DesignKind::ods_i:
    case DesignKind::ods_s: {
        const auto summary = kind == DesignKind::ods_i ? design::SummaryKind::intercept : design::SummaryKind::slope;
        const auto cut = design::population_cutoffs(sc, {summary}, {tail_percentile, 1.0 - tail_percentile});
        const auto pi = design::calibrate_probabilities({tail_percentile, central_mass, tail_percentile}, {90, 70, 90}, n);
        d.spec = design::interval_design(summary, cut, pi);
        break;
    }
    case DesignKind::ods_b: {
        const auto r = design::bivariate_central_region(sc, central_mass);
        const auto pi = design::calibrate_probabilities({central_mass, 1.0 - central_mass}, {70, 180}, n);
        d.spec = design::rectangle_design(r.region, pi[0], pi[1]);
        break;
    }
    }
    return d;
}

inline std::vector<bool> draw_design_sample(const lmm::Cohort& cohort, const StudyDesign& d, Rng& rng) {
    if (d.exact_count) {
        return design::draw_sample_exact(cohort, d.spec, {std::min(*d.exact_count, cohort.size())}, rng);
    }
    return design::draw_sample(cohort, d.spec, rng);
}

// ---------------------------------------------------------------------------
// End-of-study mean E(Y | G=1, C=1, t=2)

inline Vector end_of_study_contrast(const lmm::ModelSpec& spec) {
    Vector a(spec.p());
    Eigen::Index k = 0;
    for (const auto& term : spec.terms()) {
        switch (term.kind) {
        case lmm::TermKind::intercept: a[k] = 1.0; break;
        case lmm::TermKind::time: a[k] = 2.0; break;
        case lmm::TermKind::exposure: a[k] = 1.0; break;
        case lmm::TermKind::exposure_time: a[k] = 2.0; break;
        case lmm::TermKind::covariate: a[k] = term.covariate == "c" ? 1.0 : 0.0; break;
        }
        ++k;
    }
    return a;
}

inline double end_of_study_mean(const Vector& beta, const lmm::ModelSpec& spec) {
    const Vector a = end_of_study_contrast(spec);
    if (beta.size() != a.size()) throw SpecError("end_of_study_mean: estimate length does not match the model");
    return a.dot(beta);
}

inline double end_of_study_se(const Matrix& beta_cov, const lmm::ModelSpec& spec) {
    const Vector a = end_of_study_contrast(spec);
    return std::sqrt(a.dot(beta_cov.topLeftCorner(a.size(), a.size()) * a));
}

// ---------------------------------------------------------------------------
// One replication

struct CellEstimate {
    bool ok = false;
    std::string message;
    Vector estimate; // natural scale: beta, sigma0, sigma1, rho, sigma_e, eos_mean
    Vector se;
    std::size_t n_sampled = 0;
};

inline std::vector<std::string> estimate_names(const lmm::ModelSpec& spec) {
    auto names = lmm::natural_parameter_names(spec);
    names.emplace_back("eos_mean");
    return names;
}

inline CellEstimate pack_estimate(const lmm::Theta& theta, const Matrix& cov, const lmm::ModelSpec& spec) {
    CellEstimate c;
    const Vector nat = theta.natural();
    const Matrix ncov = lmm::natural_covariance(theta, cov);
    c.estimate.resize(nat.size() + 1);
    c.se.resize(nat.size() + 1);
    c.estimate.head(nat.size()) = nat;
    c.se.head(nat.size()) = ncov.diagonal().cwiseMax(0.0).cwiseSqrt();
    c.estimate[nat.size()] = end_of_study_mean(theta.beta, spec);
    c.se[nat.size()] = end_of_study_se(cov, spec);
    c.ok = c.estimate.allFinite() && c.se.allFinite() && (c.se.array() > 0.0).all();
    if (!c.ok) c.message = "non-finite estimate or standard error";
    return c;
}

inline CellEstimate analyze(const lmm::Cohort& sampled, const StudyDesign& d, AnalysisKind analysis, int m_imputations,
                            Rng& rng) {
    try {
        CellEstimate out;
        if (analysis == AnalysisKind::cd) {
            const auto fit = d.kind == DesignKind::rs ? lmm::fit_ml(sampled, lmm::Subset::sampled)
                                                      : acl::fit_cd(sampled, d.spec);
            if (!fit.converged) {
                out.message = "fit did not converge: " + fit.message;
                return out;
            }
            out = pack_estimate(fit.theta_hat, fit.covariance.matrix(), sampled.spec);
        } else {
            const auto method = analysis == AnalysisKind::cdmi ? mi::Method::cdmi : mi::Method::dmi;
            const auto r = mi::run_mi_analysis(sampled, d.spec, method, m_imputations, rng);
            out = pack_estimate(lmm::Theta::from_vector(r.theta_hat), r.total_cov, sampled.spec);
        }
        out.n_sampled = sampled.n_sampled();
        return out;
    } catch (const Error& e) {
        CellEstimate out;
        out.message = e.what();
        out.n_sampled = sampled.n_sampled();
        return out;
    }
}

struct Cell {
    DesignKind design;
    AnalysisKind analysis;
    bool operator<(const Cell& o) const { return std::pair(design, analysis) < std::pair(o.design, o.analysis); }
    bool operator==(const Cell&) const = default;
};

inline std::string cell_label(const Cell& c) { return to_string(c.design) + "/" + to_string(c.analysis); }

struct ReplicationResult {
    std::size_t index = 0;
    std::map<Cell, CellEstimate> cells;
};

// Streams: cohort <- rep/"cohort"; sample <- rep/design/"sample";
// analysis <- rep/design/analysis. No stream depends on another's draws.
inline ReplicationResult run_replication(const Scenario& sc, const std::vector<StudyDesign>& designs,
                                         const std::vector<AnalysisKind>& analyses, int m_imputations,
                                         const SeedTree& rep_node) {
    ReplicationResult res;
    Rng cohort_rng = rep_node.child("cohort").rng();
    const auto cohort = generate_cohort(sc, cohort_rng);
    for (const auto& d : designs) {
        const auto dnode = rep_node.child(to_string(d.kind));
        Rng srng = dnode.child("sample").rng();
        const auto sampled = design::apply_sample(cohort, draw_design_sample(cohort, d, srng));
        for (auto a : analyses) {
            Rng arng = dnode.child(to_string(a)).rng();
            res.cells[{d.kind, a}] = analyze(sampled, d, a, m_imputations, arng);
        }
    }
    return res;
}

// Single design x analysis convenience form.
inline CellEstimate run_replication(const Scenario& sc, DesignKind design, AnalysisKind analysis, int m_imputations,
                                    const SeedTree& rep_node) {
    const auto rr = run_replication(sc, {build_design(sc, design)}, {analysis}, m_imputations, rep_node);
    return rr.cells.at({design, analysis});
}

// ---------------------------------------------------------------------------
// Study

struct StudyConfig {
    Scenario scenario = scenario_preset("a");
    std::vector<DesignKind> designs = all_designs();
    std::vector<AnalysisKind> analyses = all_analyses();
    int replications = 1000;
    std::optional<int> imputations; // default 25 for N <= 750, 35 above
    std::uint64_t master_seed = 20240101;

    int m() const { return imputations ? *imputations : (scenario.n_subjects > 750 ? 35 : 25); }

    void validate() const {
        scenario.validate();
        if (replications < 1) throw SpecError("config: replications must be at least 1");
        if (designs.empty() || analyses.empty()) throw SpecError("config: designs and analyses must be non-empty");
        if (m() < 2) throw SpecError("config: imputations must be at least 2");
        if (std::find(designs.begin(), designs.end(), DesignKind::rs) == designs.end() ||
            std::find(analyses.begin(), analyses.end(), AnalysisKind::cd) == analyses.end()) {
            throw SpecError("config: the rs/cd baseline cell must be part of the study");
        }
    }
};

inline SeedTree replication_node(const StudyConfig& cfg, std::size_t r) {
    return SeedTree(cfg.master_seed).child(cfg.scenario.name).child(static_cast<std::uint64_t>(r));
}

// Replications are distributed over `threads` workers; results are stored
// by index, so the outcome does not depend on the thread count.
inline std::vector<ReplicationResult> run_study(const StudyConfig& cfg, int threads = 1) {
    cfg.validate();
    std::vector<StudyDesign> designs;
    for (auto d : cfg.designs) designs.push_back(build_design(cfg.scenario, d));
    const auto n = static_cast<std::size_t>(cfg.replications);
    std::vector<ReplicationResult> results(n);
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    auto worker = [&] {
        for (;;) {
            const std::size_t r = next.fetch_add(1);
            if (r >= n) return;
            try {
                results[r] = run_replication(cfg.scenario, designs, cfg.analyses, cfg.m(), replication_node(cfg, r));
                results[r].index = r;
            } catch (...) {
                std::lock_guard lock(failure_mutex);
                if (!failure) failure = std::current_exception();
                next = n;
            }
        }
    };
    const int nt = std::max(1, std::min<int>(threads, cfg.replications));
    if (nt == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int i = 0; i < nt; ++i) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }
    if (failure) std::rethrow_exception(failure);
    return results;
}

// ---------------------------------------------------------------------------
// Efficiency report

struct ParameterSummary {
    std::string name;
    double truth = 0.0;
    double mean = 0.0;
    double empirical_var = 0.0;
    double mean_se = 0.0;
    double bias_pct = 0.0;    // 100 (mean - truth) / |truth|, NaN when truth = 0
    double se_bias_pct = 0.0; // 100 (mean SE - empirical SD) / empirical SD
    double rel_eff = 0.0;     // var(baseline) / var(cell)
    double rel_eff_mcse = 0.0;
};

struct CellSummary {
    Cell cell;
    bool available = false;
    std::size_t n_ok = 0;
    std::size_t n_excluded = 0;
    double mean_sample_size = 0.0;
    std::vector<ParameterSummary> parameters;
    std::vector<std::string> exclusion_messages; // first few, for the audit trail
};

struct EfficiencyReport {
    std::string scenario;
    std::size_t replications = 0;
    int imputations = 0;
    std::uint64_t master_seed = 0;
    std::vector<std::string> parameter_names;
    std::vector<CellSummary> cells;
    double exclusion_rate = 0.0;
    bool failed = false; // exclusion rate above the 2 % limit

    const CellSummary* find(DesignKind d, AnalysisKind a) const {
        for (const auto& c : cells) {
            if (c.cell == Cell{d, a}) return &c;
        }
        return nullptr;
    }

    const ParameterSummary* find(DesignKind d, AnalysisKind a, const std::string& param) const {
        const auto* c = find(d, a);
        if (!c || !c->available) return nullptr;
        for (const auto& p : c->parameters) {
            if (p.name == param) return &p;
        }
        return nullptr;
    }
};

inline constexpr double max_exclusion_rate = 0.02;

inline double sample_variance(const std::vector<double>& x) {
    const double n = static_cast<double>(x.size());
    double m = 0.0;
    for (double v : x) m += v;
    m /= n;
    double ss = 0.0;
    for (double v : x) ss += (v - m) * (v - m);
    return ss / (n - 1.0);
}

// Delete-one jackknife standard error of var(a) / var(b) over paired draws.
inline double jackknife_ratio_se(const std::vector<double>& a, const std::vector<double>& b) {
    const std::size_t n = a.size();
    if (n < 3) return std::numeric_limits<double>::quiet_NaN();
    auto moments = [](const std::vector<double>& x) {
        double s = 0, s2 = 0;
        for (double v : x) {
            s += v;
            s2 += v * v;
        }
        return std::pair{s, s2};
    };
    const auto [sa, sa2] = moments(a);
    const auto [sb, sb2] = moments(b);
    const double m = static_cast<double>(n - 1);
    // centred sums keep the leave-one-out variances accurate
    const double ma = sa / n, mb = sb / n;
    double ca2 = 0, cb2 = 0;
    for (std::size_t i = 0; i < n; ++i) {
        ca2 += (a[i] - ma) * (a[i] - ma);
        cb2 += (b[i] - mb) * (b[i] - mb);
    }
    (void)sa2;
    (void)sb2;
    std::vector<double> theta(n);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        // leave-one-out sum of squares: SS - n/(n-1) (x_i - mean)^2
        const double da = a[i] - ma, db = b[i] - mb;
        const double va = (ca2 - n / m * da * da) / (m - 1.0);
        const double vb = (cb2 - n / m * db * db) / (m - 1.0);
        theta[i] = va / vb;
        mean += theta[i];
    }
    mean /= static_cast<double>(n);
    double ss = 0.0;
    for (double t : theta) ss += (t - mean) * (t - mean);
    return std::sqrt(m / static_cast<double>(n) * ss);
}

inline Vector truth_vector(const Scenario& sc) {
    const auto th = sc.truth();
    Vector t(th.size() + 1);
    t.head(th.size()) = th.natural();
    t[th.size()] = end_of_study_mean(th.beta, sc.model_spec());
    return t;
}

inline EfficiencyReport efficiency_report(const StudyConfig& cfg, const std::vector<ReplicationResult>& results) {
    EfficiencyReport rep;
    rep.scenario = cfg.scenario.name;
    rep.replications = results.size();
    rep.imputations = cfg.m();
    rep.master_seed = cfg.master_seed;
    const auto spec = cfg.scenario.model_spec();
    rep.parameter_names = estimate_names(spec);
    const Vector truth = truth_vector(cfg.scenario);
    const auto np = rep.parameter_names.size();
    const Cell baseline{DesignKind::rs, AnalysisKind::cd};

    auto ok_indices = [&](const Cell& c) {
        std::vector<std::size_t> idx;
        for (std::size_t r = 0; r < results.size(); ++r) {
            const auto it = results[r].cells.find(c);
            if (it != results[r].cells.end() && it->second.ok) idx.push_back(r);
        }
        return idx;
    };
    auto column = [&](const Cell& c, const std::vector<std::size_t>& idx, std::size_t k) {
        std::vector<double> v;
        v.reserve(idx.size());
        for (auto r : idx) v.push_back(results[r].cells.at(c).estimate[static_cast<Eigen::Index>(k)]);
        return v;
    };

    const auto base_idx = ok_indices(baseline);
    std::size_t total = 0, excluded = 0;
    for (auto d : cfg.designs) {
        for (auto a : cfg.analyses) {
            const Cell cell{d, a};
            CellSummary cs;
            cs.cell = cell;
            const auto idx = ok_indices(cell);
            cs.n_ok = idx.size();
            cs.n_excluded = results.size() - idx.size();
            total += results.size();
            excluded += cs.n_excluded;
            for (const auto& rr : results) {
                const auto it = rr.cells.find(cell);
                if (it != rr.cells.end() && !it->second.ok && cs.exclusion_messages.size() < 5) {
                    cs.exclusion_messages.push_back("replication " + std::to_string(rr.index) + ": " + it->second.message);
                }
            }
            cs.available = idx.size() >= 2 && base_idx.size() >= 2;
            if (cs.available) {
                double ns = 0.0;
                for (auto r : idx) ns += static_cast<double>(results[r].cells.at(cell).n_sampled);
                cs.mean_sample_size = ns / static_cast<double>(idx.size());
                // replications where both this cell and the baseline succeeded
                std::vector<std::size_t> paired;
                std::set_intersection(idx.begin(), idx.end(), base_idx.begin(), base_idx.end(), std::back_inserter(paired));
                for (std::size_t k = 0; k < np; ++k) {
                    ParameterSummary ps;
                    ps.name = rep.parameter_names[k];
                    ps.truth = truth[static_cast<Eigen::Index>(k)];
                    const auto est = column(cell, idx, k);
                    double mean = 0.0, se = 0.0;
                    for (std::size_t i = 0; i < idx.size(); ++i) {
                        mean += est[i];
                        se += results[idx[i]].cells.at(cell).se[static_cast<Eigen::Index>(k)];
                    }
                    mean /= static_cast<double>(idx.size());
                    se /= static_cast<double>(idx.size());
                    ps.mean = mean;
                    ps.mean_se = se;
                    ps.empirical_var = sample_variance(est);
                    ps.bias_pct = ps.truth != 0.0 ? 100.0 * (mean - ps.truth) / std::abs(ps.truth)
                                                  : std::numeric_limits<double>::quiet_NaN();
                    const double sd = std::sqrt(ps.empirical_var);
                    ps.se_bias_pct = 100.0 * (se - sd) / sd;
                    if (paired.size() >= 2) {
                        const auto b = column(baseline, paired, k);
                        const auto c = column(cell, paired, k);
                        ps.rel_eff = cell == baseline ? 1.0 : sample_variance(b) / sample_variance(c);
                        ps.rel_eff_mcse = cell == baseline ? 0.0 : jackknife_ratio_se(b, c);
                    } else {
                        ps.rel_eff = ps.rel_eff_mcse = std::numeric_limits<double>::quiet_NaN();
                    }
                    cs.parameters.push_back(ps);
                }
            }
            rep.cells.push_back(std::move(cs));
        }
    }
    rep.exclusion_rate = total ? static_cast<double>(excluded) / static_cast<double>(total) : 0.0;
    rep.failed = rep.exclusion_rate > max_exclusion_rate;
    return rep;
}

} // namespace odsmi::simulate

#endif
