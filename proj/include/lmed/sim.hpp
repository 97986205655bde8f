#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <map>
#include <numbers>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "lmed/data.hpp"
#include "lmed/error.hpp"
#include "lmed/stats.hpp"

namespace lmed {

enum class Role { Baseline, Exposure, Confounder, Mediator, Outcome };
enum class Dist { Bernoulli, Categorical, Normal, Table };

/// One node of the structural model. Discrete nodes take values 0..levels;
/// logistic-linear nodes use a baseline-category parameterisation with level 0
/// as reference; table nodes list a probability vector per parent configuration.
struct VariableSpec {
    std::string name;
    Role role = Role::Baseline;
    int time = 0;
    Dist dist = Dist::Bernoulli;
    int levels = 1;

    // Logistic-linear (Bernoulli/Categorical): one intercept and one slope per
    // non-reference level. Normal: a single mean intercept and slopes.
    std::vector<double> intercepts;
    std::vector<std::pair<std::string, std::vector<double>>> coefficients;
    double sd = 1.0;

    std::vector<std::string> table_parents;
    std::map<std::vector<int>, std::vector<double>> table;

    std::vector<std::string> parents() const {
        if (dist == Dist::Table) return table_parents;
        std::vector<std::string> out;
        for (const auto& [p, c] : coefficients) out.push_back(p);
        return out;
    }

    bool discrete() const { return dist != Dist::Normal; }
};

struct StructuralModel {
    std::string name;
    int n_times = 1;
    std::vector<VariableSpec> variables;

    int index_of(const std::string& n) const {
        for (std::size_t i = 0; i < variables.size(); ++i) {
            if (variables[i].name == n) return static_cast<int>(i);
        }
        return -1;
    }

    int exposure_index() const {
        for (std::size_t i = 0; i < variables.size(); ++i) {
            if (variables[i].role == Role::Exposure) return static_cast<int>(i);
        }
        return -1;
    }

    int find_role(Role role, int t) const {
        for (std::size_t i = 0; i < variables.size(); ++i) {
            if (variables[i].role == role && variables[i].time == t) return static_cast<int>(i);
        }
        return -1;
    }

    int outcome_index(int t) const { return find_role(Role::Outcome, t); }
    int mediator_index(int t) const { return find_role(Role::Mediator, t); }

    bool discrete() const {
        return std::all_of(variables.begin(), variables.end(), [](const auto& v) { return v.discrete(); });
    }

    void validate() const;

    VariableSchema schema() const {
        VariableSchema s;
        s.id_column = "id";
        for (const auto& v : variables) {
            if (v.role == Role::Baseline) s.baseline.push_back(v.name);
            if (v.role == Role::Exposure) s.exposure = v.name;
        }
        for (int t = 1; t <= n_times; ++t) {
            TimePoint tp;
            tp.code = t;
            for (const auto& v : variables) {
                if (v.time != t) continue;
                if (v.role == Role::Confounder) tp.confounders.push_back(v.name);
                if (v.role == Role::Mediator) {
                    tp.mediator = v.name;
                    tp.mediator_levels = v.levels;
                }
                if (v.role == Role::Outcome) tp.outcome = v.name;
            }
            s.times.push_back(tp);
        }
        s.strict_levels = false;
        return s;
    }
};

namespace sim_detail {

inline bool parent_allowed(const VariableSpec& child, const VariableSpec& parent) {
    switch (child.role) {
    case Role::Baseline: return parent.role == Role::Baseline;
    case Role::Exposure: return parent.role == Role::Baseline;
    case Role::Confounder:
        if (parent.role == Role::Baseline || parent.role == Role::Exposure) return true;
        if (parent.role == Role::Confounder) return parent.time <= child.time;
        return parent.time < child.time; // M_s, Y_s for s < t
    case Role::Mediator:
        if (parent.role == Role::Baseline || parent.role == Role::Exposure) return true;
        if (parent.role == Role::Confounder) return parent.time <= child.time;
        return parent.time < child.time;
    case Role::Outcome:
        if (parent.role == Role::Baseline || parent.role == Role::Exposure) return true;
        if (parent.role == Role::Confounder || parent.role == Role::Mediator) return parent.time <= child.time;
        return parent.time < child.time;
    }
    return false;
}

inline int role_rank(Role r) {
    switch (r) {
    case Role::Baseline: return 0;
    case Role::Exposure: return 1;
    case Role::Confounder: return 2;
    case Role::Mediator: return 3;
    case Role::Outcome: return 4;
    }
    return 5;
}

} // namespace sim_detail

inline void StructuralModel::validate() const {
    auto bad = [&](const std::string& msg) { fail(ErrorCode::InvalidModel, name + ": " + msg); };
    if (n_times < 1) bad("time_points must be >= 1");
    if (exposure_index() < 0) bad("no exposure variable");
    int exposures = 0;
    std::pair<int, int> last_pos{0, -1};
    for (std::size_t i = 0; i < variables.size(); ++i) {
        const auto& v = variables[i];
        if (v.name.empty()) bad("variable without a name");
        if (index_of(v.name) != static_cast<int>(i)) bad("duplicate variable '" + v.name + "'");
        if (v.role == Role::Exposure) {
            ++exposures;
            if (v.levels != 1 || v.dist == Dist::Normal || v.dist == Dist::Categorical) bad("exposure must be binary");
        }
        const bool timed = v.role == Role::Confounder || v.role == Role::Mediator || v.role == Role::Outcome;
        if (timed && (v.time < 1 || v.time > n_times)) bad("variable '" + v.name + "' has time outside 1..T");
        if (!timed && v.time != 0) bad("baseline/exposure variable '" + v.name + "' must have time 0");
        // Baseline block, exposure, then per time: L_t..., M_t, Y_t.
        const std::pair<int, int> pos{v.time, sim_detail::role_rank(v.role)};
        if (pos < last_pos) bad("variable '" + v.name + "' is out of causal order");
        last_pos = pos;
        if (v.dist == Dist::Normal && v.role != Role::Baseline && v.role != Role::Confounder) {
            bad("normal variables are only allowed as baseline or time-varying confounders");
        }
        if (v.levels < 1) bad("variable '" + v.name + "' needs at least two levels");
        if (v.dist == Dist::Bernoulli && v.levels != 1) bad("bernoulli variable '" + v.name + "' must have levels = 1");
        if (v.dist == Dist::Bernoulli || v.dist == Dist::Categorical) {
            if (static_cast<int>(v.intercepts.size()) != v.levels) bad("variable '" + v.name + "' needs one intercept per non-reference level");
            for (const auto& [p, c] : v.coefficients) {
                if (static_cast<int>(c.size()) != v.levels) bad("coefficient for '" + p + "' in '" + v.name + "' has wrong length");
            }
        }
        if (v.dist == Dist::Normal) {
            if (v.intercepts.size() != 1) bad("normal variable '" + v.name + "' needs one mean intercept");
            if (!(v.sd > 0.0)) bad("normal variable '" + v.name + "' needs sd > 0");
        }
        for (const auto& p : v.parents()) {
            const int pi = index_of(p);
            if (pi < 0) bad("unknown parent '" + p + "' of '" + v.name + "'");
            if (pi >= static_cast<int>(i)) bad("parent '" + p + "' of '" + v.name + "' is not earlier in causal order");
            if (!sim_detail::parent_allowed(v, variables[static_cast<std::size_t>(pi)])) {
                bad("edge '" + p + "' -> '" + v.name + "' violates the longitudinal DAG ordering");
            }
        }
        if (v.dist == Dist::Table) {
            std::size_t configs = 1;
            for (const auto& p : v.table_parents) {
                const auto& pv = variables[static_cast<std::size_t>(index_of(p))];
                if (!pv.discrete()) bad("table parent '" + p + "' must be discrete");
                configs *= static_cast<std::size_t>(pv.levels + 1);
            }
            if (v.table.size() != configs) bad("table for '" + v.name + "' must cover every parent configuration");
            for (const auto& [given, probs] : v.table) {
                if (given.size() != v.table_parents.size()) bad("table row for '" + v.name + "' has wrong key length");
                if (static_cast<int>(probs.size()) != v.levels + 1) bad("table row for '" + v.name + "' has wrong width");
                double s = 0.0;
                for (double q : probs) {
                    if (q < 0.0) bad("negative probability in '" + v.name + "'");
                    s += q;
                }
                if (std::abs(s - 1.0) > 1e-12) bad("table row for '" + v.name + "' does not sum to 1");
            }
        }
    }
    if (exposures != 1) bad("exactly one exposure variable required");
    for (int t = 1; t <= n_times; ++t) {
        int m = 0;
        int y = 0;
        for (const auto& v : variables) {
            if (v.time == t && v.role == Role::Mediator) ++m;
            if (v.time == t && v.role == Role::Outcome) ++y;
        }
        if (m != 1) bad("time " + std::to_string(t) + " needs exactly one mediator");
        if (y != 1) bad("time " + std::to_string(t) + " needs exactly one outcome");
    }
}

// ---------------------------------------------------------------------------
// JSON model files
// ---------------------------------------------------------------------------

namespace sim_detail {

inline Role parse_role(const std::string& s) {
    if (s == "baseline") return Role::Baseline;
    if (s == "exposure") return Role::Exposure;
    if (s == "confounder") return Role::Confounder;
    if (s == "mediator") return Role::Mediator;
    if (s == "outcome") return Role::Outcome;
    fail(ErrorCode::InvalidModel, "unknown role '" + s + "'");
}

inline const char* role_name(Role r) {
    switch (r) {
    case Role::Baseline: return "baseline";
    case Role::Exposure: return "exposure";
    case Role::Confounder: return "confounder";
    case Role::Mediator: return "mediator";
    case Role::Outcome: return "outcome";
    }
    return "?";
}

inline std::vector<double> as_vector(const nlohmann::json& j) {
    if (j.is_array()) return j.get<std::vector<double>>();
    return {j.get<double>()};
}

} // namespace sim_detail

inline StructuralModel model_from_json(const nlohmann::json& j) {
    StructuralModel m;
    try {
        m.name = j.value("name", std::string("model"));
        m.n_times = j.at("time_points").get<int>();
        for (const auto& vj : j.at("variables")) {
            VariableSpec v;
            v.name = vj.at("name").get<std::string>();
            v.role = sim_detail::parse_role(vj.at("role").get<std::string>());
            v.time = vj.value("time", 0);
            const auto dist = vj.value("dist", std::string("bernoulli"));
            if (dist == "bernoulli") {
                v.dist = Dist::Bernoulli;
                v.levels = 1;
            } else if (dist == "categorical") {
                v.dist = Dist::Categorical;
                v.levels = vj.at("levels").get<int>();
            } else if (dist == "normal") {
                v.dist = Dist::Normal;
                v.levels = 1;
            } else if (dist == "table") {
                v.dist = Dist::Table;
                v.levels = vj.value("levels", 1);
            } else {
                fail(ErrorCode::InvalidModel, "unknown dist '" + dist + "'");
            }
            if (v.dist == Dist::Table) {
                v.table_parents = vj.value("parents", std::vector<std::string>{});
                for (const auto& row : vj.at("table")) {
                    v.table[row.at("given").get<std::vector<int>>()] = row.at("probs").get<std::vector<double>>();
                }
            } else if (v.dist == Dist::Normal) {
                v.intercepts = {vj.value("mean", 0.0)};
                v.sd = vj.value("sd", 1.0);
                if (vj.contains("coefficients")) {
                    for (const auto& [k, c] : vj.at("coefficients").items()) v.coefficients.emplace_back(k, std::vector<double>{c.get<double>()});
                }
            } else {
                if (vj.contains("p") && v.dist == Dist::Bernoulli) {
                    v.intercepts = {logit(vj.at("p").get<double>())};
                } else {
                    v.intercepts = sim_detail::as_vector(vj.at("intercept"));
                }
                if (vj.contains("coefficients")) {
                    for (const auto& [k, c] : vj.at("coefficients").items()) v.coefficients.emplace_back(k, sim_detail::as_vector(c));
                }
            }
            m.variables.push_back(std::move(v));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidModel, std::string("malformed model JSON: ") + e.what());
    }
    m.validate();
    return m;
}

inline nlohmann::json model_to_json(const StructuralModel& m) {
    nlohmann::json j;
    j["name"] = m.name;
    j["time_points"] = m.n_times;
    j["variables"] = nlohmann::json::array();
    for (const auto& v : m.variables) {
        nlohmann::json vj;
        vj["name"] = v.name;
        vj["role"] = sim_detail::role_name(v.role);
        if (v.time != 0) vj["time"] = v.time;
        switch (v.dist) {
        case Dist::Bernoulli:
            vj["dist"] = "bernoulli";
            vj["intercept"] = v.intercepts.front();
            vj["coefficients"] = nlohmann::json::object();
            for (const auto& [p, c] : v.coefficients) vj["coefficients"][p] = c.front();
            break;
        case Dist::Categorical:
            vj["dist"] = "categorical";
            vj["levels"] = v.levels;
            vj["intercept"] = v.intercepts;
            vj["coefficients"] = nlohmann::json::object();
            for (const auto& [p, c] : v.coefficients) vj["coefficients"][p] = c;
            break;
        case Dist::Normal:
            vj["dist"] = "normal";
            vj["mean"] = v.intercepts.front();
            vj["sd"] = v.sd;
            vj["coefficients"] = nlohmann::json::object();
            for (const auto& [p, c] : v.coefficients) vj["coefficients"][p] = c.front();
            break;
        case Dist::Table:
            vj["dist"] = "table";
            vj["levels"] = v.levels;
            vj["parents"] = v.table_parents;
            vj["table"] = nlohmann::json::array();
            for (const auto& [given, probs] : v.table) vj["table"].push_back({{"given", given}, {"probs", probs}});
            break;
        }
        j["variables"].push_back(vj);
    }
    return j;
}

inline StructuralModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::InvalidModel, "cannot open model file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidModel, std::string("model file is not valid JSON: ") + e.what());
    }
    return model_from_json(j);
}

// ---------------------------------------------------------------------------
// Presets
// ---------------------------------------------------------------------------

namespace sim_detail {

inline VariableSpec logistic(std::string name, Role role, int time, double intercept,
                             std::vector<std::pair<std::string, double>> coefs) {
    VariableSpec v;
    v.name = std::move(name);
    v.role = role;
    v.time = time;
    v.dist = Dist::Bernoulli;
    v.levels = 1;
    v.intercepts = {intercept};
    for (auto& [p, c] : coefs) v.coefficients.emplace_back(p, std::vector<double>{c});
    return v;
}

} // namespace sim_detail

/// Single time point, binary A/M/Y with C1 ~ N(0,1) and C2 ~ Bernoulli(0.4).
inline StructuralModel preset_appendix3_single() {
    using sim_detail::logistic;
    StructuralModel m;
    m.name = "appendix3_single";
    m.n_times = 1;
    VariableSpec c1;
    c1.name = "C1";
    c1.role = Role::Baseline;
    c1.dist = Dist::Normal;
    c1.intercepts = {0.0};
    c1.sd = 1.0;
    m.variables.push_back(c1);
    m.variables.push_back(logistic("C2", Role::Baseline, 0, logit(0.4), {}));
    m.variables.push_back(logistic("A", Role::Exposure, 0, 0.05, {{"C1", 0.1}, {"C2", 0.2}}));
    m.variables.push_back(logistic("M", Role::Mediator, 1, 0.05, {{"A", 0.1}, {"C1", -0.1}, {"C2", -0.2}}));
    m.variables.push_back(logistic("Y", Role::Outcome, 1, 0.05, {{"A", 0.1}, {"M", 0.1}, {"C1", -0.1}, {"C2", -0.2}}));
    m.validate();
    return m;
}

/// Two time points, everything binary, with exposure-induced time-varying
/// confounders and the earlier outcome feeding later mediators.
inline StructuralModel preset_longitudinal_t2_binary() {
    using sim_detail::logistic;
    StructuralModel m;
    m.name = "longitudinal_t2_binary";
    m.n_times = 2;
    m.variables = {
        logistic("L0", Role::Baseline, 0, 0.0, {}),
        logistic("A", Role::Exposure, 0, -0.2, {{"L0", 0.6}}),
        logistic("L1", Role::Confounder, 1, -0.3, {{"A", 0.5}, {"L0", 0.4}}),
        logistic("M1", Role::Mediator, 1, -0.2, {{"A", 0.8}, {"L0", 0.3}, {"L1", 0.5}}),
        logistic("Y1", Role::Outcome, 1, -1.0, {{"A", 0.4}, {"L0", 0.3}, {"L1", 0.3}, {"M1", 0.7}}),
        logistic("L2", Role::Confounder, 2, -0.2, {{"A", 0.4}, {"L0", 0.2}, {"L1", 0.6}, {"M1", 0.3}, {"Y1", 0.4}}),
        logistic("M2", Role::Mediator, 2, -0.3,
                 {{"A", 0.7}, {"L0", 0.2}, {"L1", 0.2}, {"M1", 0.9}, {"Y1", 0.3}, {"L2", 0.4}}),
        logistic("Y2", Role::Outcome, 2, -0.8,
                 {{"A", 0.3}, {"L0", 0.2}, {"L1", 0.2}, {"M1", 0.3}, {"Y1", 0.5}, {"L2", 0.2}, {"M2", 0.6}}),
    };
    m.validate();
    return m;
}

inline std::vector<std::string> preset_names() { return {"appendix3_single", "longitudinal_t2_binary"}; }

inline StructuralModel preset(const std::string& name) {
    if (name == "appendix3_single") return preset_appendix3_single();
    if (name == "longitudinal_t2_binary") return preset_longitudinal_t2_binary();
    fail(ErrorCode::InvalidModel, "unknown preset '" + name + "'");
}

// Preset name or path to a JSON model file.
inline StructuralModel resolve_model(const std::string& name_or_path) {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), name_or_path) != names.end()) return preset(name_or_path);
    return load_model(name_or_path);
}

// ---------------------------------------------------------------------------
// Conditional distributions
// ---------------------------------------------------------------------------

/// Probabilities of levels 0..K of a discrete node given values of earlier
/// nodes. `value_of(i)` returns the value of variable i.
template <class ValueOf>
std::vector<double> conditional_probs(const StructuralModel& model, const VariableSpec& v, ValueOf&& value_of) {
    if (v.dist == Dist::Table) {
        std::vector<int> key;
        key.reserve(v.table_parents.size());
        for (const auto& p : v.table_parents) key.push_back(static_cast<int>(value_of(model.index_of(p))));
        const auto it = v.table.find(key);
        if (it == v.table.end()) fail(ErrorCode::InvalidModel, "table for '" + v.name + "' misses a parent configuration");
        return it->second;
    }
    std::vector<double> eta(static_cast<std::size_t>(v.levels), 0.0);
    for (int k = 0; k < v.levels; ++k) eta[static_cast<std::size_t>(k)] = v.intercepts[static_cast<std::size_t>(k)];
    for (const auto& [p, c] : v.coefficients) {
        const double x = value_of(model.index_of(p));
        for (int k = 0; k < v.levels; ++k) eta[static_cast<std::size_t>(k)] += c[static_cast<std::size_t>(k)] * x;
    }
    std::vector<double> probs(static_cast<std::size_t>(v.levels) + 1);
    if (v.levels == 1) {
        probs[1] = expit(eta[0]);
        probs[0] = 1.0 - probs[1];
        return probs;
    }
    double mx = 0.0;
    for (double e : eta) mx = std::max(mx, e);
    double denom = std::exp(-mx);
    probs[0] = denom;
    for (int k = 0; k < v.levels; ++k) {
        probs[static_cast<std::size_t>(k) + 1] = std::exp(eta[static_cast<std::size_t>(k)] - mx);
        denom += probs[static_cast<std::size_t>(k) + 1];
    }
    for (double& q : probs) q /= denom;
    return probs;
}

template <class ValueOf>
double normal_mean(const StructuralModel& model, const VariableSpec& v, ValueOf&& value_of) {
    double mu = v.intercepts.front();
    for (const auto& [p, c] : v.coefficients) mu += c.front() * value_of(model.index_of(p));
    return mu;
}

// ---------------------------------------------------------------------------
// Simulation
// ---------------------------------------------------------------------------

inline std::mt19937_64 subject_rng(std::uint64_t seed, std::uint64_t subject) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(subject & 0xffffffffu), static_cast<std::uint32_t>(subject >> 32),
                      0x73696d75u};
    return std::mt19937_64(seq);
}

/// n i.i.d. subjects drawn in causal order; subject i uses its own stream.
inline LongDataset simulate(const StructuralModel& model, std::size_t n, std::uint64_t seed) {
    model.validate();
    const std::size_t nv = model.variables.size();
    Eigen::MatrixXd values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(nv));
    std::vector<double> state(nv, 0.0);
    auto value_of = [&](int idx) { return state[static_cast<std::size_t>(idx)]; };
    for (std::size_t i = 0; i < n; ++i) {
        auto rng = subject_rng(seed, i);
        std::uniform_real_distribution<double> unif(0.0, 1.0);
        std::normal_distribution<double> norm(0.0, 1.0);
        for (std::size_t k = 0; k < nv; ++k) {
            const auto& v = model.variables[k];
            if (v.dist == Dist::Normal) {
                state[k] = normal_mean(model, v, value_of) + v.sd * norm(rng);
                continue;
            }
            const auto probs = conditional_probs(model, v, value_of);
            const double u = unif(rng);
            double cum = 0.0;
            int level = static_cast<int>(probs.size()) - 1;
            for (std::size_t l = 0; l + 1 < probs.size(); ++l) {
                cum += probs[l];
                if (u < cum) {
                    level = static_cast<int>(l);
                    break;
                }
            }
            state[k] = level;
        }
        for (std::size_t k = 0; k < nv; ++k) values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = state[k];
    }
    std::vector<std::string> names;
    for (const auto& v : model.variables) names.push_back(v.name);
    return LongDataset::from_columns(model.schema(), std::move(names), std::move(values));
}

// ---------------------------------------------------------------------------
// Exact oracles by enumeration
// ---------------------------------------------------------------------------

struct OracleOptions {
    double state_cap = 1e7;
    int hermite_nodes = 64;
};

/// Nodes and weights for E[f(Z)], Z ~ N(0,1): Golub-Welsch on the Hermite
/// Jacobi matrix, rescaled from weight exp(-x^2).
inline std::pair<std::vector<double>, std::vector<double>> gauss_hermite_normal(int n) {
    Eigen::MatrixXd jac = Eigen::MatrixXd::Zero(n, n);
    for (int k = 1; k < n; ++k) {
        jac(k, k - 1) = jac(k - 1, k) = std::sqrt(static_cast<double>(k) / 2.0);
    }
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(jac);
    std::vector<double> nodes(static_cast<std::size_t>(n)), weights(static_cast<std::size_t>(n));
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        const double v0 = es.eigenvectors()(0, i);
        nodes[static_cast<std::size_t>(i)] = std::numbers::sqrt2 * es.eigenvalues()(i);
        weights[static_cast<std::size_t>(i)] = v0 * v0;
        total += v0 * v0;
    }
    for (double& w : weights) w /= total;
    return {nodes, weights};
}

namespace sim_detail {

inline double count_states(const StructuralModel& model, int upto, bool include_exposure, const OracleOptions& opt) {
    double states = 1.0;
    for (int k = 0; k < upto; ++k) {
        const auto& v = model.variables[static_cast<std::size_t>(k)];
        if (v.role == Role::Exposure && !include_exposure) continue;
        states *= v.dist == Dist::Normal ? opt.hermite_nodes : (v.levels + 1);
    }
    return states;
}

inline void check_oracle_model(const StructuralModel& model, int t, const OracleOptions& opt, bool include_exposure) {
    model.validate();
    for (const auto& v : model.variables) {
        if (v.dist == Dist::Normal && v.role != Role::Baseline) {
            fail(ErrorCode::NonDiscrete, "oracle needs discrete post-baseline variables ('" + v.name + "')");
        }
    }
    if (t < 1 || t > model.n_times) fail(ErrorCode::InvalidModel, "time index outside 1..T");
    const int target = model.outcome_index(t);
    if (count_states(model, target, include_exposure, opt) > opt.state_cap) {
        fail(ErrorCode::StateSpaceTooLarge, "enumeration exceeds the configured state cap");
    }
}

inline double outcome_mean(const std::vector<double>& probs) {
    double m = 0.0;
    for (std::size_t l = 1; l < probs.size(); ++l) m += static_cast<double>(l) * probs[l];
    return m;
}

} // namespace sim_detail

/// E[Y_{t, a, Mbar_{t, a*}}] by summing over every history: mediators are
/// drawn from their conditionals with exposure a*, everything else with
/// exposure a. `t` is the 1-based time index.
inline double gformula_value(const StructuralModel& model, int t, int a, int a_star, const OracleOptions& opt = {}) {
    sim_detail::check_oracle_model(model, t, opt, false);
    const int target = model.outcome_index(t);
    const int exposure = model.exposure_index();
    const auto gh = gauss_hermite_normal(opt.hermite_nodes);
    std::vector<double> state(model.variables.size(), 0.0);
    state[static_cast<std::size_t>(exposure)] = a;

    std::function<double(int)> recurse = [&](int k) -> double {
        const auto& v = model.variables[static_cast<std::size_t>(k)];
        const bool mediator = v.role == Role::Mediator;
        auto value_of = [&](int idx) {
            if (idx == exposure) return static_cast<double>(mediator ? a_star : a);
            return state[static_cast<std::size_t>(idx)];
        };
        if (k == target) return sim_detail::outcome_mean(conditional_probs(model, v, value_of));
        if (k == exposure) return recurse(k + 1);
        if (v.dist == Dist::Normal) {
            const double mu = normal_mean(model, v, value_of);
            double acc = 0.0;
            for (std::size_t j = 0; j < gh.first.size(); ++j) {
                state[static_cast<std::size_t>(k)] = mu + v.sd * gh.first[j];
                acc += gh.second[j] * recurse(k + 1);
            }
            return acc;
        }
        const auto probs = conditional_probs(model, v, value_of);
        double acc = 0.0;
        for (std::size_t l = 0; l < probs.size(); ++l) {
            if (probs[l] == 0.0) continue;
            state[static_cast<std::size_t>(k)] = static_cast<double>(l);
            acc += probs[l] * recurse(k + 1);
        }
        return acc;
    };
    return recurse(0);
}

/// E[Y_t I(A = a) W] over the observed-data law, W = 1/P(A = a | L0) times
/// the product over mediators up to t of P(M_s | a*, history) / P(M_s | a, history),
/// all from the model's true conditionals.
inline double ipw_population_value(const StructuralModel& model, int t, int a, int a_star,
                                   const OracleOptions& opt = {}) {
    sim_detail::check_oracle_model(model, t, opt, true);
    const int target = model.outcome_index(t);
    const int exposure = model.exposure_index();
    const auto gh = gauss_hermite_normal(opt.hermite_nodes);
    std::vector<double> state(model.variables.size(), 0.0);
    auto natural = [&](int idx) { return state[static_cast<std::size_t>(idx)]; };

    // Accumulates path probability and weight separately.
    std::function<double(int, double, double)> recurse = [&](int k, double path, double weight) -> double {
        const auto& v = model.variables[static_cast<std::size_t>(k)];
        if (k == target) {
            return path * weight * sim_detail::outcome_mean(conditional_probs(model, v, natural));
        }
        if (v.dist == Dist::Normal) {
            const double mu = normal_mean(model, v, natural);
            double acc = 0.0;
            for (std::size_t j = 0; j < gh.first.size(); ++j) {
                state[static_cast<std::size_t>(k)] = mu + v.sd * gh.first[j];
                acc += recurse(k + 1, path * gh.second[j], weight);
            }
            return acc;
        }
        const auto probs = conditional_probs(model, v, natural);
        if (k == exposure) {
            const double pa = probs[static_cast<std::size_t>(a)];
            if (pa <= 0.0) fail(ErrorCode::PositivityViolation, "P(A = a | L0) is zero on a support point");
            state[static_cast<std::size_t>(k)] = a; // I(A = a) removes the other branch
            return recurse(k + 1, path * pa, weight / pa);
        }
        std::vector<double> counterfactual;
        if (v.role == Role::Mediator) {
            counterfactual = conditional_probs(model, v, [&](int idx) {
                return idx == exposure ? static_cast<double>(a_star) : state[static_cast<std::size_t>(idx)];
            });
        }
        double acc = 0.0;
        for (std::size_t l = 0; l < probs.size(); ++l) {
            double ratio = 1.0;
            if (v.role == Role::Mediator) {
                if (probs[l] <= 0.0) {
                    if (counterfactual[l] > 0.0) fail(ErrorCode::PositivityViolation, "mediator level has zero probability under the observed exposure");
                    continue;
                }
                ratio = counterfactual[l] / probs[l];
            } else if (probs[l] == 0.0) {
                continue;
            }
            state[static_cast<std::size_t>(k)] = static_cast<double>(l);
            acc += recurse(k + 1, path * probs[l], weight * ratio);
        }
        return acc;
    };
    return recurse(0, 1.0, 1.0);
}

struct OracleEffects {
    int time_index = 1;    // 1-based
    double design_t = 0.0; // 0-based time code used by the natural effect model
    std::array<std::array<double, 2>, 2> probs{}; // [a][a*]
    double direct_log = 0.0;
    double indirect_log = 0.0;
    double total_log = 0.0;
};

/// Nested counterfactual means and the implied log-OR contrasts:
/// direct = logit P10 - logit P00, indirect = logit P11 - logit P10.
inline std::vector<OracleEffects> true_effects(const StructuralModel& model, const std::vector<int>& times,
                                               const OracleOptions& opt = {}) {
    std::vector<OracleEffects> out;
    for (int t : times) {
        OracleEffects e;
        e.time_index = t;
        e.design_t = t - 1;
        for (int a = 0; a <= 1; ++a) {
            for (int s = 0; s <= 1; ++s) e.probs[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)] = gformula_value(model, t, a, s, opt);
        }
        e.direct_log = logit(e.probs[1][0]) - logit(e.probs[0][0]);
        e.indirect_log = logit(e.probs[1][1]) - logit(e.probs[1][0]);
        e.total_log = e.direct_log + e.indirect_log;
        out.push_back(e);
    }
    return out;
}

inline std::vector<int> all_times(const StructuralModel& model) {
    std::vector<int> t(static_cast<std::size_t>(model.n_times));
    for (int k = 0; k < model.n_times; ++k) t[static_cast<std::size_t>(k)] = k + 1;
    return t;
}

} // namespace lmed
