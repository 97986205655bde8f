#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "lmed/bootstrap.hpp"
#include "lmed/data.hpp"
#include "lmed/effects.hpp"
#include "lmed/error.hpp"
#include "lmed/expansion.hpp"
#include "lmed/glm.hpp"
#include "lmed/nem.hpp"
#include "lmed/sim.hpp"
#include "lmed/weights.hpp"

namespace lmed {

namespace fs = std::filesystem;

struct RunConfig {
    std::string raw_text; // config file bytes, echoed into the output directory
    fs::path base_dir;    // relative data/model/out paths resolve against this

    std::string data;
    std::optional<VariableSchema> schema;
    bool unit_exposure_weights = false;
    std::vector<std::string> exposure_terms;
    std::vector<std::vector<std::string>> mediator_terms;
    GlmControl working_ctl; // exposure and mediator models
    bool write_expanded = false;
    NemFormula formula = NemFormula::standard();
    std::optional<double> truncate_q;
    TruncationPool pool = TruncationPool::Pooled;
    WeightOptions weight_opt;
    TimeLabels time_labels = TimeLabels::Index;
    BootstrapConfig bootstrap;
    bool bootstrap_configured = false;
    std::optional<std::vector<double>> effect_times;
    EffectOptions effect_opt;
    std::string out = "out";
    std::size_t hist_bins = 30;

    // simulate / oracle
    std::string model = "longitudinal_t2_binary";
    std::size_t n = 1000;
    std::uint64_t seed = 1;
    std::optional<std::vector<int>> oracle_times;

    fs::path resolve(const std::string& p) const {
        const fs::path path(p);
        return path.is_absolute() || base_dir.empty() ? path : base_dir / path;
    }

    std::string model_ref() const {
        const auto names = preset_names();
        if (std::find(names.begin(), names.end(), model) != names.end()) return model;
        return resolve(model).string();
    }
};

namespace pipeline_detail {

inline TruncationPool parse_pool(const std::string& s) {
    if (s == "pooled") return TruncationPool::Pooled;
    if (s == "per-time") return TruncationPool::PerTime;
    if (s == "exposure") return TruncationPool::Exposure;
    fail(ErrorCode::InvalidConfig, "unknown truncation pool '" + s + "'");
}

inline Link parse_link(const std::string& s) {
    if (s == "logit") return Link::Logit;
    if (s == "identity") return Link::Identity;
    fail(ErrorCode::InvalidConfig, "unknown link '" + s + "'");
}

// Rethrows with the stage name in front so users know where it broke.
template <class F>
auto stage(const char* name, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const Error& e) {
        throw Error(e.code(), std::string(name) + ": " + e.message());
    }
}

} // namespace pipeline_detail

inline RunConfig config_from_json(const nlohmann::json& j, std::string raw_text = {}, fs::path base_dir = {}) {
    using namespace pipeline_detail;
    RunConfig c;
    c.raw_text = std::move(raw_text);
    c.base_dir = std::move(base_dir);
    try {
        c.data = j.value("data", std::string());
        if (j.contains("schema")) c.schema = schema_from_json(j.at("schema"));
        if (j.contains("exposure_model")) {
            const auto& e = j.at("exposure_model");
            c.unit_exposure_weights = e.value("unit_weights", false);
            c.exposure_terms = e.value("terms", std::vector<std::string>{});
        }
        if (j.contains("glm")) {
            const auto& g = j.at("glm");
            c.working_ctl.ridge = g.value("ridge", 0.0);
            c.working_ctl.max_iter = g.value("max_iter", c.working_ctl.max_iter);
            if (c.working_ctl.ridge < 0.0) fail(ErrorCode::InvalidConfig, "glm.ridge must be >= 0");
        }
        c.write_expanded = j.value("write_expanded", false);
        if (j.contains("mediator_models")) {
            for (const auto& m : j.at("mediator_models")) c.mediator_terms.push_back(m.at("terms").get<std::vector<std::string>>());
        }
        if (j.contains("nem")) {
            const auto& n = j.at("nem");
            const Link link = parse_link(n.value("link", std::string("logit")));
            c.formula = NemFormula::parse(n.value("formula", std::string("a + a_star + t + t:a + t:a_star")), link);
        }
        if (j.contains("weights")) {
            const auto& w = j.at("weights");
            if (w.contains("truncate") && !w.at("truncate").is_null()) c.truncate_q = w.at("truncate").get<double>();
            c.pool = parse_pool(w.value("pool", std::string("pooled")));
            c.weight_opt.positivity_eps = w.value("positivity_eps", 1e-6);
            const auto pos = w.value("positivity", std::string("error"));
            if (pos != "error" && pos != "warn") fail(ErrorCode::InvalidConfig, "weights.positivity must be 'error' or 'warn'");
            c.weight_opt.positivity_error = pos == "error";
            c.hist_bins = w.value("histogram_bins", std::size_t{30});
        }
        const auto labels = j.value("time_labels", std::string("index"));
        if (labels != "index" && labels != "schema") fail(ErrorCode::InvalidConfig, "time_labels must be 'index' or 'schema'");
        c.time_labels = labels == "index" ? TimeLabels::Index : TimeLabels::Schema;
        if (j.contains("bootstrap")) {
            const auto& b = j.at("bootstrap");
            c.bootstrap_configured = true;
            if (b.contains("B")) c.bootstrap.B = b.at("B").get<int>();
            if (b.contains("seed")) c.bootstrap.seed = b.at("seed").get<std::uint64_t>();
            const auto mode = b.value("mode", std::string("joint"));
            if (mode != "joint" && mode != "blockwise") fail(ErrorCode::InvalidConfig, "bootstrap.mode must be 'joint' or 'blockwise'");
            c.bootstrap.mode = mode == "joint" ? PerturbMode::Joint : PerturbMode::Blockwise;
            const auto tr = b.value("truncation", std::string("reapply"));
            if (tr != "reapply" && tr != "freeze") fail(ErrorCode::InvalidConfig, "bootstrap.truncation must be 'reapply' or 'freeze'");
            c.bootstrap.truncation = tr == "reapply" ? TruncationReplay::Reapply : TruncationReplay::Freeze;
            c.bootstrap.threads = b.value("threads", 1);
            c.bootstrap.target_terms = b.value("terms", std::vector<std::string>{});
        }
        if (j.contains("effects")) {
            const auto& e = j.at("effects");
            if (e.contains("times")) c.effect_times = e.at("times").get<std::vector<double>>();
            c.effect_opt.z = e.value("z", 1.96);
            c.effect_opt.covariates = e.value("covariates", std::map<std::string, double>{});
        }
        c.out = j.value("out", std::string("out"));
        if (j.contains("simulate")) {
            const auto& s = j.at("simulate");
            c.model = s.value("model", c.model);
            c.n = s.value("n", c.n);
            c.seed = s.value("seed", c.seed);
        }
        if (j.contains("oracle")) {
            const auto& o = j.at("oracle");
            c.model = o.value("model", c.model);
            if (o.contains("times")) c.oracle_times = o.at("times").get<std::vector<int>>();
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("malformed config: ") + e.what());
    }
    if (c.truncate_q && !(*c.truncate_q > 0.0 && *c.truncate_q <= 1.0)) {
        fail(ErrorCode::InvalidConfig, "weights.truncate must lie in (0, 1]");
    }
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::InvalidConfig, "cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(ss.str());
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidConfig, std::string("config is not valid JSON: ") + e.what());
    }
    return config_from_json(j, ss.str(), fs::path(path).parent_path());
}

// ---------------------------------------------------------------------------
// Fitting
// ---------------------------------------------------------------------------

struct PipelineResult {
    WorkingModels models;
    WeightTable weights;
    WeightWarnings warnings;
    ExpandedData expanded;
    NaturalEffectFit fit;
    std::vector<double> times;
    std::vector<EffectSummary> effects;
};

inline ExpansionOptions expansion_options(const RunConfig& c) {
    ExpansionOptions o;
    o.time_labels = c.time_labels;
    o.truncate_q = c.truncate_q;
    o.pool = c.pool;
    return o;
}

inline LongDataset load_config_data(const RunConfig& c) {
    if (c.data.empty()) fail(ErrorCode::InvalidConfig, "config has no data path");
    if (!c.schema) fail(ErrorCode::InvalidConfig, "config has no schema section");
    return pipeline_detail::stage("data", [&] { return load_dataset(c.resolve(c.data).string(), *c.schema); });
}

inline WorkingModels fit_working_models(const RunConfig& c, const LongDataset& ds) {
    using pipeline_detail::stage;
    WorkingModels m;
    if (!c.unit_exposure_weights) {
        m.exposure = stage("exposure model", [&] {
            return fit_binary_logit(ds, ds.schema().exposure, DesignSpec::parse(c.exposure_terms), std::nullopt, c.working_ctl);
        });
    }
    if (c.mediator_terms.size() != ds.n_times()) {
        fail(ErrorCode::InvalidConfig, "need one mediator model per time point (" + std::to_string(ds.n_times()) + ")");
    }
    for (std::size_t t = 0; t < ds.n_times(); ++t) {
        const auto& tp = ds.schema().times[t];
        m.mediators.push_back(stage("mediator model", [&] {
            return fit_multinomial_logit(ds, tp.mediator, DesignSpec::parse(c.mediator_terms[t]), ds.mediator_levels(t),
                                        std::nullopt, c.working_ctl);
        }));
    }
    return m;
}

inline std::vector<double> effect_times(const RunConfig& c, const LongDataset& ds, const ExpandedData& ex) {
    if (c.effect_times) return *c.effect_times;
    std::vector<double> t;
    for (const auto& r : ex.records) {
        if (std::find(t.begin(), t.end(), r.t) == t.end()) t.push_back(r.t);
    }
    (void)ds;
    return t;
}

inline PipelineResult run_pipeline(const RunConfig& c, const LongDataset& ds) {
    using pipeline_detail::stage;
    PipelineResult r;
    r.models = fit_working_models(c, ds);
    r.weights = stage("weights", [&] { return build_weight_table(r.models, ds, c.weight_opt, &r.warnings); });
    r.expanded = stage("expansion", [&] { return expand(ds, r.weights, expansion_options(c)); });
    r.fit = stage("natural effect model", [&] { return fit_nem(r.expanded, c.formula); });
    r.times = effect_times(c, ds, r.expanded);
    r.effects = stage("effects", [&] { return decompose(r.fit, r.times, c.effect_opt); });
    return r;
}

// ---------------------------------------------------------------------------
// Writers
// ---------------------------------------------------------------------------

namespace pipeline_detail {

inline std::string num(double v) {
    if (std::isnan(v)) return "NA";
    return detail::format_number(v);
}

inline void write_text(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    if (!out) fail(ErrorCode::InvalidConfig, "cannot write '" + p.string() + "'");
    out << text;
}

inline std::string time_label(double t) { return num(t); }

inline nlohmann::json glm_json(const FittedGlm& f) {
    nlohmann::json j;
    j["response"] = f.response;
    j["family"] = f.family == Family::BinaryLogit ? "binary-logit" : "multinomial-logit";
    j["coef_names"] = f.design.coef_names();
    j["coefficients"] = nlohmann::json::array();
    for (Eigen::Index k = 0; k < f.coefficients.rows(); ++k) {
        std::vector<double> row(static_cast<std::size_t>(f.coefficients.cols()));
        for (Eigen::Index c = 0; c < f.coefficients.cols(); ++c) row[static_cast<std::size_t>(c)] = f.coefficients(k, c);
        j["coefficients"].push_back(row);
    }
    j["iterations"] = f.iterations;
    j["loglik"] = f.loglik;
    return j;
}

} // namespace pipeline_detail

inline void write_fit_json(const PipelineResult& r, const fs::path& path) {
    using namespace pipeline_detail;
    nlohmann::json j;
    j["formula"] = r.fit.formula.text();
    j["link"] = r.fit.formula.link == Link::Logit ? "logit" : "identity";
    j["n_records"] = r.fit.n_records;
    j["n_clusters"] = r.fit.n_clusters;
    j["max_cluster_size"] = r.fit.max_cluster_size;
    j["converged"] = r.fit.converged;
    j["iterations"] = r.fit.iterations;
    j["scale"] = r.fit.scale;
    j["terms"] = nlohmann::json::array();
    for (const auto& w : wald_tests(r.fit)) {
        j["terms"].push_back({{"term", w.term}, {"estimate", w.estimate}, {"robust_se", w.se}, {"wald", w.wald}, {"p", w.p_value}});
    }
    j["truncation_thresholds"] = r.expanded.truncation_thresholds;
    j["positivity_breaches"] = r.warnings.positivity_breaches;
    nlohmann::json wm;
    if (r.models.exposure) wm["exposure"] = glm_json(*r.models.exposure);
    wm["mediators"] = nlohmann::json::array();
    for (const auto& m : r.models.mediators) wm["mediators"].push_back(glm_json(m));
    j["working_models"] = wm;
    write_text(path, j.dump(2) + "\n");
}

inline std::string effects_csv(const std::vector<EffectSummary>& effects) {
    using pipeline_detail::num;
    std::ostringstream out;
    out << "t,effect,log_est,se,or,lo95,hi95\n";
    for (const auto& s : effects) {
        const std::pair<const char*, const EffectEstimate*> rows[] = {{"direct", &s.direct}, {"indirect", &s.indirect}, {"total", &s.total}};
        for (const auto& [name, e] : rows) {
            out << num(s.t) << ',' << name << ',' << num(e->estimate) << ',' << num(e->se) << ',' << num(e->ratio) << ','
                << num(e->lo) << ',' << num(e->hi) << '\n';
        }
    }
    return out.str();
}

inline std::string probabilities_csv(const std::vector<EffectSummary>& effects) {
    using pipeline_detail::num;
    std::ostringstream out;
    out << "t,P00,P01,P10,P11,proportion_mediated\n";
    for (const auto& s : effects) {
        out << num(s.t) << ',' << num(s.probs[0][0]) << ',' << num(s.probs[0][1]) << ',' << num(s.probs[1][0]) << ','
            << num(s.probs[1][1]) << ',' << (s.proportion_mediated ? num(*s.proportion_mediated) : "NA") << '\n';
    }
    return out.str();
}

/// Six-number summaries of each weight kind:
///   exposure  per subject
///   mediator  cumulative ratio per time and a*, rows with a* != A
///   combined  expanded-record weights before truncation, per time and pooled
///   truncated the same after truncation (only when truncation is on)
inline std::string weights_summary_csv(const PipelineResult& r, bool truncated) {
    using pipeline_detail::num;
    std::ostringstream out;
    out << "kind,t,a_star,stat,value\n";
    auto emit = [&](const std::string& kind, const std::string& t, const std::string& a_star, const std::vector<double>& w) {
        if (w.empty()) return;
        const auto v = summary_values(summarize(w));
        for (std::size_t k = 0; k < v.size(); ++k) {
            out << kind << ',' << t << ',' << a_star << ',' << kSummaryLabels[k] << ',' << num(v[k]) << '\n';
        }
    };
    emit("exposure", "all", "all", std::vector<double>(r.weights.exposure.data(), r.weights.exposure.data() + r.weights.exposure.size()));
    const auto& ex = r.expanded;
    std::vector<double> times;
    for (const auto& rec : ex.records) {
        if (std::find(times.begin(), times.end(), rec.t) == times.end()) times.push_back(rec.t);
    }
    for (std::size_t ti = 0; ti < r.weights.n_times(); ++ti) {
        for (int s = 0; s <= 1; ++s) {
            std::vector<double> w;
            for (std::size_t i = 0; i < r.weights.n_subjects(); ++i) {
                if (r.weights.observed_exposure(static_cast<Eigen::Index>(i)) != s) w.push_back(r.weights.mediator_weight(i, ti, s));
            }
            emit("mediator", std::to_string(ti), std::to_string(s), w);
        }
    }
    const char* kinds[] = {"combined", "truncated"};
    for (int which = 0; which < (truncated ? 2 : 1); ++which) {
        std::vector<double> all;
        for (double t : times) {
            std::vector<double> w;
            for (const auto& rec : ex.records) {
                if (rec.t == t) w.push_back(which == 0 ? rec.w_untruncated : rec.w);
            }
            emit(kinds[which], pipeline_detail::time_label(t), "all", w);
            all.insert(all.end(), w.begin(), w.end());
        }
        emit(kinds[which], "all", "all", all);
    }
    return out.str();
}

inline std::string weights_hist_csv(const PipelineResult& r, std::size_t bins) {
    using pipeline_detail::num;
    std::ostringstream out;
    out << "t,bin_lo,bin_hi,count\n";
    std::vector<double> times;
    for (const auto& rec : r.expanded.records) {
        if (std::find(times.begin(), times.end(), rec.t) == times.end()) times.push_back(rec.t);
    }
    auto emit = [&](const std::string& label, const std::vector<double>& w) {
        for (const auto& b : histogram(w, bins)) out << label << ',' << num(b.lo) << ',' << num(b.hi) << ',' << b.count << '\n';
    };
    std::vector<double> all;
    for (double t : times) {
        std::vector<double> w;
        for (const auto& rec : r.expanded.records) {
            if (rec.t == t) w.push_back(rec.w_untruncated);
        }
        emit(pipeline_detail::time_label(t), w);
        all.insert(all.end(), w.begin(), w.end());
    }
    emit("all", all);
    return out.str();
}

inline void echo_config(const RunConfig& c, const fs::path& out_dir) {
    if (!c.raw_text.empty()) pipeline_detail::write_text(out_dir / "config.json", c.raw_text);
}

inline fs::path prepare_out(const RunConfig& c) {
    const fs::path dir = c.resolve(c.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorCode::InvalidConfig, "cannot create output directory '" + c.out + "'");
    return dir;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

inline PipelineResult cmd_fit(const RunConfig& c) {
    const LongDataset ds = load_config_data(c);
    PipelineResult r = run_pipeline(c, ds);
    const fs::path dir = prepare_out(c);
    write_fit_json(r, dir / "fit.json");
    pipeline_detail::write_text(dir / "effects.csv", effects_csv(r.effects));
    pipeline_detail::write_text(dir / "probabilities.csv", probabilities_csv(r.effects));
    pipeline_detail::write_text(dir / "weights_summary.csv", weights_summary_csv(r, c.truncate_q.has_value()));
    pipeline_detail::write_text(dir / "weights_hist.csv", weights_hist_csv(r, c.hist_bins));
    if (c.write_expanded) {
        std::ostringstream os;
        write_expanded_csv(r.expanded, os);
        pipeline_detail::write_text(dir / "expanded.csv", os.str());
    }
    echo_config(c, dir);
    return r;
}

inline nlohmann::json bootstrap_json(const BootstrapResult& b, double z) {
    nlohmann::json j;
    j["B"] = b.requested;
    j["succeeded"] = b.alpha_draws.rows();
    j["terms"] = nlohmann::json::array();
    for (const auto& term : b.target_terms) {
        const int k = b.index_of(term);
        const auto ci = bootstrap_ci(b, k, z);
        j["terms"].push_back({{"term", term},
                              {"estimate", b.estimate(k)},
                              {"se_fixed", b.se_fixed(k)},
                              {"se_total", b.se_total(k)},
                              {"ci", {ci.first, ci.second}}});
    }
    j["failures"] = nlohmann::json::array();
    for (const auto& f : b.failures) j["failures"].push_back({{"replicate", f.replicate}, {"message", f.message}});
    return j;
}

struct BootstrapRun {
    PipelineResult base;
    BootstrapResult boot;
    std::vector<EffectSummary> effects; // effects with the combined covariance
};

inline BootstrapRun cmd_bootstrap(const RunConfig& c) {
    if (!c.bootstrap_configured) fail(ErrorCode::InvalidConfig, "bootstrap command needs a bootstrap section (B, seed)");
    const LongDataset ds = load_config_data(c);
    BootstrapRun run;
    run.base = run_pipeline(c, ds);
    run.boot = pipeline_detail::stage("bootstrap", [&] {
        return run_perturbed_bootstrap(ds, run.base.models, c.formula, c.bootstrap, expansion_options(c), c.weight_opt);
    });
    NaturalEffectFit adjusted = run.base.fit;
    adjusted.robust_cov = run.boot.total_cov;
    run.effects = decompose(adjusted, run.base.times, c.effect_opt);
    const fs::path dir = prepare_out(c);
    pipeline_detail::write_text(dir / "bootstrap.json", bootstrap_json(run.boot, c.effect_opt.z).dump(2) + "\n");
    pipeline_detail::write_text(dir / "effects_bootstrap.csv", effects_csv(run.effects));
    echo_config(c, dir);
    return run;
}

inline LongDataset cmd_simulate(const RunConfig& c) {
    const StructuralModel model = pipeline_detail::stage("simulate", [&] { return resolve_model(c.model_ref()); });
    const LongDataset ds = simulate(model, c.n, c.seed);
    const fs::path dir = prepare_out(c);
    export_dataset(ds, (dir / "data.csv").string());
    pipeline_detail::write_text(dir / "schema.json", schema_to_json(ds.schema()).dump(2) + "\n");
    pipeline_detail::write_text(dir / "model.json", model_to_json(model).dump(2) + "\n");
    echo_config(c, dir);
    return ds;
}

inline nlohmann::json oracle_json(const StructuralModel& model, const std::vector<int>& times, const OracleOptions& opt = {}) {
    nlohmann::json j;
    j["model"] = model.name;
    j["values"] = nlohmann::json::array();
    j["effects"] = nlohmann::json::array();
    for (const auto& e : true_effects(model, times, opt)) {
        for (int a = 0; a <= 1; ++a) {
            for (int s = 0; s <= 1; ++s) {
                j["values"].push_back({{"t", e.time_index}, {"a", a}, {"a_star", s},
                                       {"value", e.probs[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)]}});
            }
        }
        j["effects"].push_back({{"t", e.time_index},
                                {"design_t", e.design_t},
                                {"direct_log_or", e.direct_log},
                                {"indirect_log_or", e.indirect_log},
                                {"total_log_or", e.total_log},
                                {"direct_or", std::exp(e.direct_log)},
                                {"indirect_or", std::exp(e.indirect_log)}});
    }
    return j;
}

inline nlohmann::json cmd_oracle(const RunConfig& c) {
    const StructuralModel model = pipeline_detail::stage("oracle", [&] { return resolve_model(c.model_ref()); });
    const auto times = c.oracle_times.value_or(all_times(model));
    const nlohmann::json j = pipeline_detail::stage("oracle", [&] { return oracle_json(model, times); });
    const fs::path dir = prepare_out(c);
    pipeline_detail::write_text(dir / "oracle.json", j.dump(2) + "\n");
    echo_config(c, dir);
    return j;
}

} // namespace lmed
