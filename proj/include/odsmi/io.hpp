#ifndef ODSMI_IO_HPP
#define ODSMI_IO_HPP

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "odsmi/design.hpp"
#include "odsmi/errors.hpp"
#include "odsmi/lmm.hpp"
#include "odsmi/mi.hpp"
#include "odsmi/rng.hpp"
#include "odsmi/simulate.hpp"

namespace odsmi::io {

using json = nlohmann::json;

// Shortest representation that reads back to the same double.
inline std::string format_double(double x) {
    if (std::isnan(x)) return "nan";
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    char buf[32];
    const auto r = std::to_chars(buf, buf + sizeof buf, x);
    return {buf, r.ptr};
}

inline bool parse_double(const std::string& s, double& out) {
    if (s.empty()) return false;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto r = std::from_chars(first, s.data() + s.size(), out);
    return r.ec == std::errc() && r.ptr == s.data() + s.size();
}

// ---------------------------------------------------------------------------
// CSV: UTF-8, header row, "." decimal, empty field = missing.

inline std::vector<std::string> split_csv_line(const std::string& line, std::size_t row) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < line.size() && line[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (quoted) throw SpecError("row " + std::to_string(row) + ": unterminated quoted field");
    out.push_back(std::move(cur));
    return out;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string q = "\"";
    for (char c : s) {
        if (c == '"') q += '"';
        q += c;
    }
    return q + "\"";
}

// Long format: subject_id, time, outcome, covariate columns, optional
// exposure and sampled columns. Subjects keep their first-appearance order
// and each subject's rows are sorted by time. Row numbers in messages count
// the header as row 1.
inline lmm::Cohort read_cohort_csv(std::istream& in, const std::optional<std::vector<std::string>>& model_covariates = std::nullopt) {
    std::string line;
    if (!std::getline(in, line)) throw SpecError("cohort CSV: empty file (header row required)");
    if (line.size() >= 3 && line.compare(0, 3, "\xEF\xBB\xBF") == 0) line.erase(0, 3);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    const auto header = split_csv_line(line, 1);
    std::map<std::string, std::size_t> col;
    for (std::size_t j = 0; j < header.size(); ++j) {
        if (header[j].empty()) throw SpecError("cohort CSV: empty column name in header (column " + std::to_string(j + 1) + ")");
        if (!col.emplace(header[j], j).second) throw SpecError("cohort CSV: duplicate column '" + header[j] + "'");
    }
    for (const char* req : {"subject_id", "time", "outcome"}) {
        if (!col.contains(req)) throw SpecError(std::string("cohort CSV: missing required column '") + req + "'");
    }
    std::vector<std::pair<std::string, std::size_t>> cov_cols;
    for (std::size_t j = 0; j < header.size(); ++j) {
        const auto& h = header[j];
        if (h != "subject_id" && h != "time" && h != "outcome" && h != "exposure" && h != "sampled") cov_cols.emplace_back(h, j);
    }

    struct Obs {
        double t, y;
        std::size_t row;
    };
    struct Pending {
        lmm::Subject s;
        std::vector<Obs> obs;
        bool first = true;
    };
    std::vector<Pending> subjects;
    std::map<std::string, std::size_t> index;

    auto fail = [](std::size_t row, const std::string& msg) { throw SpecError("row " + std::to_string(row) + ": " + msg); };

    std::size_t row = 1;
    while (std::getline(in, line)) {
        ++row;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        const auto f = split_csv_line(line, row);
        if (f.size() != header.size()) {
            fail(row, "expected " + std::to_string(header.size()) + " fields, found " + std::to_string(f.size()));
        }
        const auto& id = f[col["subject_id"]];
        if (id.empty()) fail(row, "empty subject_id");
        double t = 0, y = 0;
        if (!parse_double(f[col["time"]], t) || !std::isfinite(t)) fail(row, "time is not a finite number");
        if (!parse_double(f[col["outcome"]], y) || !std::isfinite(y)) fail(row, "outcome is not a finite number");

        auto [it, fresh] = index.emplace(id, subjects.size());
        if (fresh) subjects.emplace_back();
        auto& p = subjects[it->second];
        p.s.id = id;
        p.obs.push_back({t, y, row});

        std::optional<int> exposure;
        if (col.contains("exposure") && !f[col["exposure"]].empty()) {
            const auto& e = f[col["exposure"]];
            if (e != "0" && e != "1") fail(row, "exposure must be 0, 1 or empty");
            exposure = e == "1" ? 1 : 0;
        }
        std::optional<bool> sampled;
        if (col.contains("sampled") && !f[col["sampled"]].empty()) {
            const auto& v = f[col["sampled"]];
            if (v != "0" && v != "1") fail(row, "sampled must be 0, 1 or empty");
            sampled = v == "1";
        }
        std::map<std::string, double> covs;
        for (const auto& [name, j] : cov_cols) {
            if (f[j].empty()) fail(row, "covariate '" + name + "' is empty (cheap covariates must be observed)");
            double v = 0;
            if (!parse_double(f[j], v) || !std::isfinite(v)) fail(row, "covariate '" + name + "' is not a finite number");
            covs[name] = v;
        }
        if (p.first) {
            p.s.exposure = exposure;
            p.s.sampled = sampled;
            p.s.covariates = covs;
            p.first = false;
        } else {
            if (p.s.exposure != exposure) fail(row, "exposure differs within subject '" + id + "'");
            if (p.s.sampled != sampled) fail(row, "sampled differs within subject '" + id + "'");
            if (p.s.covariates != covs) fail(row, "covariates differ within subject '" + id + "'");
        }
    }

    lmm::Cohort cohort;
    for (auto& p : subjects) {
        std::stable_sort(p.obs.begin(), p.obs.end(), [](const Obs& a, const Obs& b) { return a.t < b.t; });
        const auto n = static_cast<Eigen::Index>(p.obs.size());
        p.s.times.resize(n);
        p.s.outcomes.resize(n);
        for (Eigen::Index j = 0; j < n; ++j) {
            const auto& o = p.obs[static_cast<std::size_t>(j)];
            if (j > 0 && o.t == p.s.times[j - 1]) {
                fail(o.row, "duplicate time within subject '" + p.s.id + "'");
            }
            p.s.times[j] = o.t;
            p.s.outcomes[j] = o.y;
        }
        cohort.subjects.push_back(std::move(p.s));
    }
    cohort.spec = lmm::ModelSpec::standard(model_covariates ? *model_covariates : cohort.covariate_names());
    cohort.validate();
    return cohort;
}

inline lmm::Cohort read_cohort_csv(const std::string& path,
                                   const std::optional<std::vector<std::string>>& model_covariates = std::nullopt) {
    std::ifstream in(path);
    if (!in) throw SpecError("cannot open cohort file '" + path + "'");
    return read_cohort_csv(in, model_covariates);
}

inline void write_cohort_csv(std::ostream& out, const lmm::Cohort& cohort) {
    const auto covs = cohort.covariate_names();
    const bool has_sampled =
        std::any_of(cohort.subjects.begin(), cohort.subjects.end(), [](const lmm::Subject& s) { return s.sampled.has_value(); });
    out << "subject_id,time,outcome";
    for (const auto& c : covs) out << ',' << csv_field(c);
    out << ",exposure";
    if (has_sampled) out << ",sampled";
    out << '\n';
    for (const auto& s : cohort.subjects) {
        for (Eigen::Index j = 0; j < s.n_obs(); ++j) {
            out << csv_field(s.id) << ',' << format_double(s.times[j]) << ',' << format_double(s.outcomes[j]);
            for (const auto& c : covs) {
                out << ',';
                if (const auto it = s.covariates.find(c); it != s.covariates.end()) out << format_double(it->second);
            }
            out << ',';
            if (s.exposure) out << *s.exposure;
            if (has_sampled) {
                out << ',';
                if (s.sampled) out << (*s.sampled ? 1 : 0);
            }
            out << '\n';
        }
    }
}

// ---------------------------------------------------------------------------
// JSON helpers

inline json bound_to_json(double x) {
    if (std::isinf(x)) return x > 0 ? "inf" : "-inf";
    return x;
}

inline double bound_from_json(const json& j, const std::string& field) {
    if (j.is_number()) return j.get<double>();
    if (j.is_string()) {
        if (j == "inf") return std::numeric_limits<double>::infinity();
        if (j == "-inf") return -std::numeric_limits<double>::infinity();
    }
    throw SpecError(field + ": expected a number, \"inf\" or \"-inf\"");
}

inline json vector_json(const Vector& v) {
    json a = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
    return a;
}

inline json matrix_json(const Matrix& m) {
    json a = json::array();
    for (Eigen::Index i = 0; i < m.rows(); ++i) a.push_back(vector_json(m.row(i).transpose()));
    return a;
}

inline json named_json(const std::vector<std::string>& names, const Vector& v) {
    json o = json::object();
    for (std::size_t i = 0; i < names.size(); ++i) o[names[i]] = v[static_cast<Eigen::Index>(i)];
    return o;
}

// ---------------------------------------------------------------------------
// DesignSpec

inline json to_json(const design::DesignSpec& d) {
    json regions = json::array();
    for (std::size_t k = 0; k < d.regions.size(); ++k) {
        json r;
        r["complement"] = d.regions[k].complement;
        json b = json::array();
        for (const auto& iv : d.regions[k].bounds) b.push_back({bound_to_json(iv.lo), bound_to_json(iv.hi)});
        r["bounds"] = b;
        r["probability"] = d.probabilities[k];
        regions.push_back(r);
    }
    return {{"summary", design::to_string(d.summary.kind)}, {"regions", regions}};
}

inline design::DesignSpec design_from_json(const json& j) {
    if (!j.is_object()) throw SpecError("design: expected a JSON object");
    if (!j.contains("summary") || !j["summary"].is_string()) throw SpecError("design.summary: required string");
    if (!j.contains("regions") || !j["regions"].is_array()) throw SpecError("design.regions: required array");
    design::DesignSpec d;
    d.summary = {design::summary_kind_from_string(j["summary"].get<std::string>())};
    for (std::size_t k = 0; k < j["regions"].size(); ++k) {
        const auto& r = j["regions"][k];
        const std::string at = "design.regions[" + std::to_string(k) + "]";
        if (!r.is_object()) throw SpecError(at + ": expected an object");
        design::Region reg;
        reg.complement = r.value("complement", false);
        if (!reg.complement) {
            if (!r.contains("bounds") || !r["bounds"].is_array()) throw SpecError(at + ".bounds: required array");
            for (const auto& b : r["bounds"]) {
                if (!b.is_array() || b.size() != 2) throw SpecError(at + ".bounds: each entry must be [lo, hi]");
                reg.bounds.push_back({bound_from_json(b[0], at + ".bounds"), bound_from_json(b[1], at + ".bounds")});
            }
        }
        if (!r.contains("probability") || !r["probability"].is_number()) throw SpecError(at + ".probability: required number");
        d.regions.push_back(reg);
        d.probabilities.push_back(r["probability"].get<double>());
    }
    d.validate();
    return d;
}

inline design::DesignSpec read_design(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("cannot open design file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SpecError("design file '" + path + "': " + e.what());
    }
    return design_from_json(j);
}

// ---------------------------------------------------------------------------
// Fit and MI results

inline json to_json(const lmm::FitResult& fit, const lmm::ModelSpec& spec) {
    const Matrix cov = fit.covariance.matrix();
    const Matrix ncov = lmm::natural_covariance(fit.theta_hat, cov);
    const auto names = lmm::parameter_names(spec);
    return {{"kind", "fit"},
            {"parameters", names},
            {"estimate", named_json(names, fit.theta_hat.to_vector())},
            {"se", named_json(names, cov.diagonal().cwiseMax(0.0).cwiseSqrt())},
            {"natural_estimate", named_json(lmm::natural_parameter_names(spec), fit.theta_hat.natural())},
            {"natural_se", named_json(lmm::natural_parameter_names(spec), ncov.diagonal().cwiseMax(0.0).cwiseSqrt())},
            {"covariance", matrix_json(cov)},
            {"loglik", fit.loglik},
            {"converged", fit.converged},
            {"iterations", fit.iterations},
            {"n_subjects_used", fit.n_subjects_used},
            {"message", fit.message}};
}

inline json to_json(const mi::MIResult& r, const lmm::ModelSpec& spec) {
    const auto theta = lmm::Theta::from_vector(r.theta_hat);
    const Matrix ncov = lmm::natural_covariance(theta, r.total_cov);
    json df = json::object();
    for (std::size_t i = 0; i < r.names.size(); ++i) {
        const double v = r.df[static_cast<Eigen::Index>(i)];
        df[r.names[i]] = std::isinf(v) ? json("inf") : json(v);
    }
    json per = json::array();
    for (const auto& e : r.estimates) per.push_back(vector_json(e));
    return {{"kind", "mi"},
            {"parameters", r.names},
            {"m", r.m},
            {"estimate", named_json(r.names, r.theta_hat)},
            {"se", named_json(r.names, r.total_var.cwiseSqrt())},
            {"within_var", named_json(r.names, r.within_var)},
            {"between_var", named_json(r.names, r.between_var)},
            {"total_var", named_json(r.names, r.total_var)},
            {"df", df},
            {"natural_estimate", named_json(lmm::natural_parameter_names(spec), theta.natural())},
            {"natural_se", named_json(lmm::natural_parameter_names(spec), ncov.diagonal().cwiseMax(0.0).cwiseSqrt())},
            {"total_covariance", matrix_json(r.total_cov)},
            {"per_imputation", per},
            {"n_imputed", r.n_imputed},
            {"n_saturated", r.n_saturated}};
}

// One row per imputation, columns are the transformed-scale parameters.
inline void write_imputation_csv(std::ostream& out, const mi::MIResult& r) {
    out << "imputation";
    for (const auto& n : r.names) out << ',' << csv_field(n);
    out << '\n';
    for (std::size_t m = 0; m < r.estimates.size(); ++m) {
        out << m + 1;
        for (Eigen::Index k = 0; k < r.estimates[m].size(); ++k) out << ',' << format_double(r.estimates[m][k]);
        out << '\n';
    }
}

// ---------------------------------------------------------------------------
// StudyConfig

inline json to_json(const Scenario& sc) {
    return {{"name", sc.name},
            {"N", sc.n_subjects},
            {"beta", vector_json(sc.beta)},
            {"delta_c", sc.delta_c},
            {"include_c_in_model", sc.include_c_in_model},
            {"sigma0", sc.sigma0},
            {"sigma1", sc.sigma1},
            {"rho", sc.rho},
            {"sigma_e", sc.sigma_e},
            {"n_obs", sc.n_obs},
            {"pr_c", sc.pr_c},
            {"pr_g_base", sc.pr_g_base}};
}

namespace detail {

template <class T>
T field(const json& j, const std::string& key, const std::string& path) {
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw SpecError(path + "." + key + ": wrong type");
    }
}

inline void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& path) {
    for (const auto& [k, v] : j.items()) {
        if (!known.contains(k)) throw SpecError(path + "." + k + ": unknown field");
    }
}

} // namespace detail

// A scenario is a preset name or an object {"preset": name, overrides...}.
inline Scenario scenario_from_json(const json& j) {
    if (j.is_string()) return scenario_preset(j.get<std::string>());
    if (!j.is_object()) throw SpecError("config.scenario: expected a preset name or an object");
    detail::reject_unknown(j,
                           {"preset", "name", "N", "beta", "delta_c", "include_c_in_model", "sigma0", "sigma1", "rho",
                            "sigma_e", "n_obs", "pr_c", "pr_g_base"},
                           "config.scenario");
    Scenario sc = scenario_preset(j.contains("preset") ? detail::field<std::string>(j, "preset", "config.scenario") : "a");
    const std::string p = "config.scenario";
    if (j.contains("name")) sc.name = detail::field<std::string>(j, "name", p);
    if (j.contains("N")) sc.n_subjects = detail::field<int>(j, "N", p);
    if (j.contains("beta")) {
        const auto b = detail::field<std::vector<double>>(j, "beta", p);
        if (b.size() != 5) throw SpecError("config.scenario.beta: expected 5 entries (b0, bt, bg, bgt, bc)");
        sc.beta = Eigen::Map<const Vector>(b.data(), 5);
    }
    if (j.contains("delta_c")) sc.delta_c = detail::field<double>(j, "delta_c", p);
    if (j.contains("include_c_in_model")) sc.include_c_in_model = detail::field<bool>(j, "include_c_in_model", p);
    if (j.contains("sigma0")) sc.sigma0 = detail::field<double>(j, "sigma0", p);
    if (j.contains("sigma1")) sc.sigma1 = detail::field<double>(j, "sigma1", p);
    if (j.contains("rho")) sc.rho = detail::field<double>(j, "rho", p);
    if (j.contains("sigma_e")) sc.sigma_e = detail::field<double>(j, "sigma_e", p);
    if (j.contains("n_obs")) sc.n_obs = detail::field<int>(j, "n_obs", p);
    if (j.contains("pr_c")) sc.pr_c = detail::field<double>(j, "pr_c", p);
    if (j.contains("pr_g_base")) sc.pr_g_base = detail::field<double>(j, "pr_g_base", p);
    try {
        sc.validate();
    } catch (const SpecError& e) {
        throw SpecError(std::string("config.") + e.what());
    }
    return sc;
}

inline json to_json(const simulate::StudyConfig& cfg) {
    json d = json::array(), a = json::array();
    for (auto x : cfg.designs) d.push_back(simulate::to_string(x));
    for (auto x : cfg.analyses) a.push_back(simulate::to_string(x));
    return {{"scenario", to_json(cfg.scenario)},
            {"designs", d},
            {"analyses", a},
            {"replications", cfg.replications},
            {"imputations", cfg.m()},
            {"master_seed", cfg.master_seed}};
}

inline simulate::StudyConfig config_from_json(const json& j) {
    if (!j.is_object()) throw SpecError("config: expected a JSON object");
    detail::reject_unknown(j, {"scenario", "designs", "analyses", "replications", "imputations", "master_seed", "output"},
                           "config");
    simulate::StudyConfig cfg;
    if (j.contains("scenario")) cfg.scenario = scenario_from_json(j["scenario"]);
    if (j.contains("designs")) {
        cfg.designs.clear();
        for (const auto& s : detail::field<std::vector<std::string>>(j, "designs", "config")) {
            cfg.designs.push_back(simulate::design_kind_from_string(s));
        }
    }
    if (j.contains("analyses")) {
        cfg.analyses.clear();
        for (const auto& s : detail::field<std::vector<std::string>>(j, "analyses", "config")) {
            cfg.analyses.push_back(simulate::analysis_kind_from_string(s));
        }
    }
    if (j.contains("replications")) cfg.replications = detail::field<int>(j, "replications", "config");
    if (j.contains("imputations")) cfg.imputations = detail::field<int>(j, "imputations", "config");
    if (j.contains("master_seed")) cfg.master_seed = detail::field<std::uint64_t>(j, "master_seed", "config");
    cfg.validate();
    return cfg;
}

inline simulate::StudyConfig read_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SpecError("cannot open config file '" + path + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw SpecError("config file '" + path + "': " + e.what());
    }
    return config_from_json(j);
}

// FNV-1a of the canonical JSON dump, as 16 hex digits.
inline std::string config_hash(const json& canonical) {
    std::ostringstream s;
    s << std::hex << std::setw(16) << std::setfill('0') << fnv1a64(canonical.dump());
    return s.str();
}

// ---------------------------------------------------------------------------
// Efficiency report

inline json nan_null(double x) { return std::isfinite(x) ? json(x) : json(nullptr); }

inline json to_json(const simulate::EfficiencyReport& rep) {
    json cells = json::array();
    for (const auto& c : rep.cells) {
        json params = json::array();
        for (const auto& p : c.parameters) {
            params.push_back({{"name", p.name},
                              {"truth", p.truth},
                              {"mean", p.mean},
                              {"bias_pct", nan_null(p.bias_pct)},
                              {"empirical_var", p.empirical_var},
                              {"mean_se", p.mean_se},
                              {"se_bias_pct", nan_null(p.se_bias_pct)},
                              {"rel_eff", nan_null(p.rel_eff)},
                              {"rel_eff_mcse", nan_null(p.rel_eff_mcse)}});
        }
        cells.push_back({{"design", simulate::to_string(c.cell.design)},
                         {"analysis", simulate::to_string(c.cell.analysis)},
                         {"available", c.available},
                         {"n_ok", c.n_ok},
                         {"n_excluded", c.n_excluded},
                         {"mean_sample_size", c.mean_sample_size},
                         {"exclusions", c.exclusion_messages},
                         {"parameters", params}});
    }
    return {{"scenario", rep.scenario},
            {"replications", rep.replications},
            {"imputations", rep.imputations},
            {"master_seed", rep.master_seed},
            {"parameters", rep.parameter_names},
            {"exclusion_rate", rep.exclusion_rate},
            {"failed", rep.failed},
            {"cells", cells}};
}

inline double null_nan(const json& j) {
    return j.is_number() ? j.get<double>() : std::numeric_limits<double>::quiet_NaN();
}

inline simulate::EfficiencyReport report_from_json(const json& j) {
    try {
        simulate::EfficiencyReport rep;
        rep.scenario = j.at("scenario").get<std::string>();
        rep.replications = j.at("replications").get<std::size_t>();
        rep.imputations = j.at("imputations").get<int>();
        rep.master_seed = j.at("master_seed").get<std::uint64_t>();
        rep.parameter_names = j.at("parameters").get<std::vector<std::string>>();
        rep.exclusion_rate = j.at("exclusion_rate").get<double>();
        rep.failed = j.at("failed").get<bool>();
        for (const auto& c : j.at("cells")) {
            simulate::CellSummary cs;
            cs.cell = {simulate::design_kind_from_string(c.at("design").get<std::string>()),
                       simulate::analysis_kind_from_string(c.at("analysis").get<std::string>())};
            cs.available = c.at("available").get<bool>();
            cs.n_ok = c.at("n_ok").get<std::size_t>();
            cs.n_excluded = c.at("n_excluded").get<std::size_t>();
            cs.mean_sample_size = c.at("mean_sample_size").get<double>();
            cs.exclusion_messages = c.at("exclusions").get<std::vector<std::string>>();
            for (const auto& p : c.at("parameters")) {
                simulate::ParameterSummary ps;
                ps.name = p.at("name").get<std::string>();
                ps.truth = p.at("truth").get<double>();
                ps.mean = p.at("mean").get<double>();
                ps.bias_pct = null_nan(p.at("bias_pct"));
                ps.empirical_var = p.at("empirical_var").get<double>();
                ps.mean_se = p.at("mean_se").get<double>();
                ps.se_bias_pct = null_nan(p.at("se_bias_pct"));
                ps.rel_eff = null_nan(p.at("rel_eff"));
                ps.rel_eff_mcse = null_nan(p.at("rel_eff_mcse"));
                cs.parameters.push_back(ps);
            }
            rep.cells.push_back(std::move(cs));
        }
        return rep;
    } catch (const json::exception& e) {
        throw SpecError(std::string("report: malformed document (") + e.what() + ")");
    }
}

inline void write_report_csv(std::ostream& out, const simulate::EfficiencyReport& rep) {
    out << "scenario,design,analysis,parameter,truth,mean,bias_pct,empirical_var,mean_se,se_bias_pct,rel_eff,rel_eff_mcse,"
           "n_ok,n_excluded\n";
    auto num = [](double x) { return std::isfinite(x) ? format_double(x) : std::string(); };
    for (const auto& c : rep.cells) {
        for (const auto& p : c.parameters) {
            out << csv_field(rep.scenario) << ',' << simulate::to_string(c.cell.design) << ','
                << simulate::to_string(c.cell.analysis) << ',' << csv_field(p.name) << ',' << num(p.truth) << ','
                << num(p.mean) << ',' << num(p.bias_pct) << ',' << num(p.empirical_var) << ',' << num(p.mean_se) << ','
                << num(p.se_bias_pct) << ',' << num(p.rel_eff) << ',' << num(p.rel_eff_mcse) << ',' << c.n_ok << ','
                << c.n_excluded << '\n';
        }
    }
}

// Relative efficiencies with MC-SEs in parentheses, one row per cell.
inline void write_report_table(std::ostream& out, const simulate::EfficiencyReport& rep) {
    std::ostringstream rate;
    rate << std::fixed << std::setprecision(4) << rep.exclusion_rate;
    out << "scenario " << rep.scenario << ": " << rep.replications << " replications, M = " << rep.imputations
        << ", exclusion rate " << rate.str() << (rep.failed ? " (above 2 %, run FAILED)" : "") << "\n";
    out << std::left << std::setw(12) << "design" << std::setw(7) << "anal.";
    for (const auto& n : rep.parameter_names) out << std::right << std::setw(18) << n;
    out << "\n";
    for (const auto& c : rep.cells) {
        out << std::left << std::setw(12) << simulate::to_string(c.cell.design) << std::setw(7)
            << simulate::to_string(c.cell.analysis);
        if (!c.available) {
            out << "  unavailable (" << c.n_ok << " successful replications)\n";
            continue;
        }
        for (const auto& p : c.parameters) {
            std::ostringstream cell;
            cell << std::fixed << std::setprecision(2) << p.rel_eff << " (" << p.rel_eff_mcse << ")";
            out << std::right << std::setw(18) << cell.str();
        }
        out << "\n";
    }
}

} // namespace odsmi::io

#endif
