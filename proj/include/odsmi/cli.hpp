#ifndef ODSMI_CLI_HPP
#define ODSMI_CLI_HPP

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "odsmi/acl.hpp"
#include "odsmi/design.hpp"
#include "odsmi/errors.hpp"
#include "odsmi/io.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/mi.hpp"
#include "odsmi/simulate.hpp"

namespace odsmi::cli {

using io::json;

inline constexpr int exit_ok = 0;
inline constexpr int exit_runtime = 1;
inline constexpr int exit_usage = 2;

struct Options {
    std::string config;
    std::string scenario;
    std::string cohort;
    std::string design;
    std::string analysis = "cdmi";
    std::string summary = "intercept";
    std::vector<double> percentiles;
    std::optional<double> target_mass;
    std::vector<double> targets;
    std::optional<int> replications;
    std::optional<int> imputations;
    std::optional<std::uint64_t> seed;
    int threads = 1;
    std::string output;
    std::string format = "json";
    std::string report;
};

inline std::string slurp(const std::string& path, const std::string& what) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw SpecError("cannot open " + what + " '" + path + "'");
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write '" + path + "'");
    out << content;
    if (!out) throw Error("write failed for '" + path + "'");
}

// Exposure-bearing rows count as sampled when the file has no sampled column.
inline lmm::Cohort load_cohort(const std::string& path) {
    std::istringstream in(slurp(path, "cohort file"));
    auto cohort = io::read_cohort_csv(in);
    for (auto& s : cohort.subjects) {
        if (!s.sampled) s.sampled = s.exposure.has_value();
    }
    cohort.validate();
    return cohort;
}

inline std::string file_hash(const std::string& path) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(slurp(path, "file"));
    return s.str();
}

inline void emit(const Options& o, std::ostream& out, const std::string& content) {
    if (o.output.empty()) {
        out << content;
    } else {
        write_file(o.output, content);
    }
}

// ---------------------------------------------------------------------------
// simulate

inline int cmd_simulate(const Options& o, std::ostream& out) {
    json cj = o.config.empty() ? json::object() : json::parse(slurp(o.config, "config file"), nullptr, false);
    if (cj.is_discarded()) throw SpecError("config file '" + o.config + "': invalid JSON");
    if (!o.scenario.empty()) cj["scenario"] = o.scenario;
    if (o.replications) cj["replications"] = *o.replications;
    if (o.imputations) cj["imputations"] = *o.imputations;
    if (o.seed) cj["master_seed"] = *o.seed;
    if (o.threads < 1) throw SpecError("--threads must be at least 1");
    std::string prefix = o.output;
    if (cj.is_object() && cj.contains("output")) {
        if (!cj["output"].is_string()) throw SpecError("config.output: wrong type");
        if (prefix.empty()) prefix = cj["output"].get<std::string>();
    }
    const auto cfg = io::config_from_json(cj);
    const json canonical = io::to_json(cfg);
    const auto results = simulate::run_study(cfg, o.threads);
    const auto rep = simulate::efficiency_report(cfg, results);
    const json doc = {{"config", canonical},
                      {"config_hash", io::config_hash(canonical)},
                      {"seed", cfg.master_seed},
                      {"report", io::to_json(rep)}};
    if (!prefix.empty()) {
        write_file(prefix + ".json", doc.dump(2) + "\n");
        std::ostringstream csv;
        io::write_report_csv(csv, rep);
        write_file(prefix + ".csv", csv.str());
    }
    io::write_report_table(out, rep);
    out << "config_hash " << io::config_hash(canonical) << ", seed " << cfg.master_seed << "\n";
    return rep.failed ? exit_runtime : exit_ok;
}

// ---------------------------------------------------------------------------
// design

inline int cmd_design(const Options& o, std::ostream& out) {
    if (o.cohort.empty()) throw SpecError("design: --cohort is required");
    if (o.targets.empty()) throw SpecError("design: --targets is required");
    const auto cohort = load_cohort(o.cohort);
    const design::SummarySpec spec{design::summary_kind_from_string(o.summary)};
    const auto summaries = design::cohort_summaries(cohort, spec);
    const double n = static_cast<double>(cohort.size());
    design::DesignSpec d;
    json extra;
    if (spec.kind == design::SummaryKind::bivariate) {
        if (!o.percentiles.empty()) throw SpecError("design: bivariate summaries take --target-mass, not --percentiles");
        const double mass = o.target_mass.value_or(0.68);
        const auto central = design::bivariate_central_region(summaries, mass);
        if (o.targets.size() != 2) throw SpecError("design: bivariate design needs 2 targets (central, outer)");
        d = design::rectangle_design(central.region, 1.0, 1.0);
        extra["tail_level"] = central.tail_level;
    } else {
        if (o.target_mass) throw SpecError("design: --target-mass applies to the bivariate summary only");
        if (o.percentiles.empty()) throw SpecError("design: --percentiles is required for a scalar summary");
        if (!std::is_sorted(o.percentiles.begin(), o.percentiles.end())) {
            throw SpecError("design: --percentiles must be increasing");
        }
        const auto cut = design::empirical_cutoffs(cohort, spec, o.percentiles);
        if (o.targets.size() != cut.size() + 1) {
            throw SpecError("design: " + std::to_string(cut.size() + 1) + " targets required, one per region");
        }
        d = design::interval_design(spec.kind, cut, std::vector<double>(cut.size() + 1, 1.0));
        extra["cutoffs"] = cut;
    }
    const auto masses = design::empirical_region_masses(d, summaries);
    d.probabilities = design::calibrate_probabilities(masses, o.targets, n);
    d.validate();
    std::vector<double> expected;
    for (std::size_t k = 0; k < masses.size(); ++k) expected.push_back(n * masses[k] * d.probabilities[k]);
    json doc = io::to_json(d);
    for (auto& [k, v] : extra.items()) doc[k] = v;
    doc["region_masses"] = masses;
    doc["expected_counts"] = expected;
    doc["n_subjects"] = cohort.size();
    const json args = {{"command", "design"},
                       {"cohort", file_hash(o.cohort)},
                       {"summary", o.summary},
                       {"percentiles", o.percentiles},
                       {"target_mass", o.target_mass ? json(*o.target_mass) : json(nullptr)},
                       {"targets", o.targets}};
    doc["config_hash"] = io::config_hash(args);
    doc["seed"] = o.seed ? json(*o.seed) : json(nullptr);
    emit(o, out, doc.dump(2) + "\n");
    if (!o.output.empty()) {
        out << "probabilities";
        for (double p : d.probabilities) out << ' ' << io::format_double(p);
        out << "\n";
    }
    return exit_ok;
}

// ---------------------------------------------------------------------------
// sample

inline int cmd_sample(const Options& o, std::ostream& out) {
    if (o.cohort.empty() || o.design.empty()) throw SpecError("sample: --cohort and --design are required");
    auto cohort = load_cohort(o.cohort);
    for (const auto& s : cohort.subjects) {
        if (!s.exposure) throw SpecError("sample: subject '" + s.id + "' has no exposure to ascertain");
    }
    const auto d = io::read_design(o.design);
    const std::uint64_t seed = o.seed.value_or(1);
    Rng rng = SeedTree(seed).child("sample").rng();
    const auto flags = design::draw_sample(cohort, d, rng);
    const auto sampled = design::apply_sample(cohort, flags);
    std::ostringstream csv;
    io::write_cohort_csv(csv, sampled);
    emit(o, out, csv.str());
    if (!o.output.empty()) {
        out << "sampled " << sampled.n_sampled() << " of " << sampled.size() << " subjects, seed " << seed << "\n";
    }
    return exit_ok;
}

// ---------------------------------------------------------------------------
// fit

inline void print_estimates(std::ostream& out, const std::vector<std::string>& names, const Vector& est, const Vector& se,
                            const Vector* df = nullptr) {
    out << std::left << std::setw(16) << "parameter" << std::right << std::setw(14) << "estimate" << std::setw(14) << "se";
    if (df) out << std::setw(12) << "df";
    out << "\n";
    for (std::size_t k = 0; k < names.size(); ++k) {
        const auto i = static_cast<Eigen::Index>(k);
        std::ostringstream e, s;
        e << std::fixed << std::setprecision(5) << est[i];
        s << std::fixed << std::setprecision(5) << se[i];
        out << std::left << std::setw(16) << names[k] << std::right << std::setw(14) << e.str() << std::setw(14) << s.str();
        if (df) {
            std::ostringstream d;
            if (std::isinf((*df)[i])) {
                d << "inf";
            } else {
                d << std::fixed << std::setprecision(1) << (*df)[i];
            }
            out << std::setw(12) << d.str();
        }
        out << "\n";
    }
}

inline int cmd_fit(const Options& o, std::ostream& out) {
    if (o.cohort.empty()) throw SpecError("fit: --cohort is required");
    if (o.analysis != "ml" && o.analysis != "cd" && o.analysis != "cdmi" && o.analysis != "dmi") {
        throw SpecError("fit: --analysis must be ml, cd, cdmi or dmi");
    }
    if ((o.analysis == "cd" || o.analysis == "cdmi") && o.design.empty()) {
        throw SpecError("fit: analysis '" + o.analysis + "' needs --design (the ascertainment correction is undefined without it)");
    }
    if (o.format != "json" && o.format != "csv") throw SpecError("fit: --format must be json or csv");
    const auto cohort = load_cohort(o.cohort);
    const std::optional<design::DesignSpec> d =
        o.design.empty() ? std::nullopt : std::optional<design::DesignSpec>(io::read_design(o.design));
    const int m = o.imputations.value_or(25);
    const std::uint64_t seed = o.seed.value_or(1);
    const std::size_t excluded = cohort.size() - cohort.n_sampled();
    const json args = {{"command", "fit"},
                       {"cohort", file_hash(o.cohort)},
                       {"design", d ? io::to_json(*d) : json(nullptr)},
                       {"analysis", o.analysis},
                       {"imputations", m},
                       {"seed", seed}};
    json doc;
    std::ostringstream table;
    if (o.analysis == "ml" || o.analysis == "cd") {
        const auto fit = o.analysis == "ml" ? lmm::fit_ml(cohort, lmm::Subset::sampled) : acl::fit_cd(cohort, *d);
        if (!fit.converged) throw ConvergenceError("fit: optimizer did not converge (" + fit.message + ")");
        doc = io::to_json(fit, cohort.spec);
        const Matrix cov = fit.covariance.matrix();
        print_estimates(table, lmm::parameter_names(cohort.spec), fit.theta_hat.to_vector(),
                        cov.diagonal().cwiseMax(0.0).cwiseSqrt());
        table << "subjects used " << fit.n_subjects_used << ", excluded (exposure not ascertained) " << excluded << "\n";
    } else {
        const auto design_used = d ? *d : design::uniform_design(design::SummaryKind::intercept, 1.0);
        Rng rng = SeedTree(seed).child("fit").rng();
        const auto r = mi::run_mi_analysis(cohort, design_used, o.analysis == "cdmi" ? mi::Method::cdmi : mi::Method::dmi,
                                           m, rng);
        doc = io::to_json(r, cohort.spec);
        print_estimates(table, r.names, r.theta_hat, r.total_var.cwiseSqrt(), &r.df);
        table << "imputed " << r.n_imputed << " exposures, M = " << r.m << "\n";
    }
    doc["analysis"] = o.analysis;
    doc["n_excluded"] = excluded;
    doc["config_hash"] = io::config_hash(args);
    doc["seed"] = seed;
    if (o.format == "json") {
        emit(o, out, doc.dump(2) + "\n");
    } else {
        std::ostringstream csv;
        csv << "parameter,estimate,se\n";
        for (const auto& name : doc["parameters"]) {
            const auto n = name.get<std::string>();
            csv << io::csv_field(n) << ',' << io::format_double(doc["estimate"][n].get<double>()) << ','
                << io::format_double(doc["se"][n].get<double>()) << '\n';
        }
        emit(o, out, csv.str());
    }
    out << table.str();
    return exit_ok;
}

// ---------------------------------------------------------------------------
// report

inline int cmd_report(const Options& o, std::ostream& out) {
    if (o.report.empty()) throw SpecError("report: a report JSON file is required");
    const json doc = json::parse(slurp(o.report, "report file"), nullptr, false);
    if (doc.is_discarded() || !doc.is_object()) throw SpecError("report file '" + o.report + "': invalid JSON");
    const auto rep = io::report_from_json(doc.contains("report") ? doc["report"] : doc);
    std::ostringstream s;
    if (o.format == "csv") {
        io::write_report_csv(s, rep);
    } else if (o.format == "json") {
        s << io::to_json(rep).dump(2) << "\n";
    } else if (o.format == "table") {
        io::write_report_table(s, rep);
    } else {
        throw SpecError("report: --format must be json, csv or table");
    }
    emit(o, out, s.str());
    return exit_ok;
}

// ---------------------------------------------------------------------------

inline int run(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"Outcome-dependent sampling designs with multiple imputation for longitudinal data", "odsmi"};
    app.require_subcommand(1);
    Options o;
    auto seed_opt = [&](CLI::App* c) { c->add_option("--seed", o.seed, "Master seed"); };

    auto* sim = app.add_subcommand("simulate", "Run a simulation study and report relative efficiencies");
    sim->add_option("--config", o.config, "StudyConfig JSON");
    sim->add_option("--scenario", o.scenario, "Scenario preset (a-e), overrides the config");
    sim->add_option("--replications", o.replications);
    sim->add_option("--imputations", o.imputations);
    seed_opt(sim);
    sim->add_option("--threads", o.threads, "Worker threads");
    sim->add_option("--output", o.output, "Output prefix for <prefix>.json and <prefix>.csv");

    auto* des = app.add_subcommand("design", "Compute a sampling design from a cohort");
    des->add_option("--cohort", o.cohort)->required();
    des->add_option("--summary", o.summary)->check(CLI::IsMember({"intercept", "slope", "bivariate"}));
    des->add_option("--percentiles", o.percentiles, "Cutoff percentiles, e.g. 0.16,0.84")->delimiter(',');
    des->add_option("--target-mass", o.target_mass, "Central region mass (bivariate)");
    des->add_option("--targets", o.targets, "Expected sample count per region")->delimiter(',');
    seed_opt(des);
    des->add_option("--output", o.output);

    auto* smp = app.add_subcommand("sample", "Draw a design sample and mask unsampled exposures");
    smp->add_option("--cohort", o.cohort)->required();
    smp->add_option("--design", o.design)->required();
    seed_opt(smp);
    smp->add_option("--output", o.output);

    auto* fit = app.add_subcommand("fit", "Fit ml, cd, cdmi or dmi on a cohort");
    fit->add_option("--cohort", o.cohort)->required();
    fit->add_option("--design", o.design);
    fit->add_option("--analysis", o.analysis)->check(CLI::IsMember({"ml", "cd", "cdmi", "dmi"}));
    fit->add_option("--imputations", o.imputations);
    seed_opt(fit);
    fit->add_option("--output", o.output);
    fit->add_option("--format", o.format)->check(CLI::IsMember({"json", "csv"}));

    auto* rep = app.add_subcommand("report", "Re-emit a simulation report");
    rep->add_option("report", o.report, "Report JSON written by simulate")->required();
    rep->add_option("--format", o.format)->check(CLI::IsMember({"json", "csv", "table"}));
    rep->add_option("--output", o.output);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e, out, err);
        return code == 0 ? exit_ok : exit_usage;
    }
    try {
        if (sim->parsed()) return cmd_simulate(o, out);
        if (des->parsed()) return cmd_design(o, out);
        if (smp->parsed()) return cmd_sample(o, out);
        if (fit->parsed()) return cmd_fit(o, out);
        return cmd_report(o, out);
    } catch (const SpecError& e) {
        err << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const DesignError& e) {
        err << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return exit_runtime;
    }
}

} // namespace odsmi::cli

#endif
