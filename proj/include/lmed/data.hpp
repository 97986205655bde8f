#pragma once

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "lmed/error.hpp"

namespace lmed {

enum class OutcomeMode { PerTime, EndOfStudy };

struct TimePoint {
    double code = 0.0;
    std::string mediator;
    std::vector<std::string> confounders;
    std::optional<std::string> outcome;
    // Declared highest mediator level K; inferred from data when absent.
    std::optional<int> mediator_levels;
};

struct VariableSchema {
    std::string id_column = "id";
    std::vector<std::string> baseline;
    std::string exposure = "A";
    std::vector<TimePoint> times;
    OutcomeMode outcome_mode = OutcomeMode::PerTime;
    bool strict_levels = true;

    std::size_t n_times() const { return times.size(); }

    // Every column the schema names, in declaration order, without duplicates.
    std::vector<std::string> columns() const {
        std::vector<std::string> out;
        auto add = [&](const std::string& c) {
            if (std::find(out.begin(), out.end(), c) == out.end()) out.push_back(c);
        };
        for (const auto& c : baseline) add(c);
        add(exposure);
        for (const auto& tp : times) {
            for (const auto& c : tp.confounders) add(c);
            add(tp.mediator);
            if (tp.outcome) add(*tp.outcome);
        }
        return out;
    }

    void check() const {
        if (exposure.empty()) fail(ErrorCode::InvalidSchema, "exposure column not declared");
        if (times.empty()) fail(ErrorCode::InvalidSchema, "no time points declared");
        for (std::size_t t = 0; t < times.size(); ++t) {
            const auto& tp = times[t];
            if (tp.mediator.empty()) {
                fail(ErrorCode::InvalidSchema, "time point " + std::to_string(t + 1) + " has no mediator column");
            }
            if (t > 0 && !(tp.code > times[t - 1].code)) {
                fail(ErrorCode::InvalidSchema, "time codes must be strictly increasing");
            }
            const bool last = (t + 1 == times.size());
            if (outcome_mode == OutcomeMode::PerTime && !tp.outcome) {
                fail(ErrorCode::InvalidSchema,
                     "per-time outcome mode requires an outcome at time point " + std::to_string(t + 1));
            }
            if (outcome_mode == OutcomeMode::EndOfStudy && last && !tp.outcome) {
                fail(ErrorCode::InvalidSchema, "end-of-study mode requires an outcome at the last time point");
            }
            if (outcome_mode == OutcomeMode::EndOfStudy && !last && tp.outcome) {
                fail(ErrorCode::InvalidSchema,
                     "end-of-study mode allows an outcome only at the last time point");
            }
            if (tp.mediator_levels && *tp.mediator_levels < 1) {
                fail(ErrorCode::InvalidSchema, "mediator " + tp.mediator + " must have at least two levels");
            }
        }
    }
};

inline VariableSchema schema_from_json(const nlohmann::json& j) {
    VariableSchema s;
    try {
        s.id_column = j.value("id", std::string("id"));
        s.baseline = j.value("baseline", std::vector<std::string>{});
        s.exposure = j.at("exposure").get<std::string>();
        const auto mode = j.value("outcome_mode", std::string("per-time"));
        if (mode == "per-time") {
            s.outcome_mode = OutcomeMode::PerTime;
        } else if (mode == "end-of-study") {
            s.outcome_mode = OutcomeMode::EndOfStudy;
        } else {
            fail(ErrorCode::InvalidSchema, "unknown outcome_mode '" + mode + "'");
        }
        s.strict_levels = j.value("strict_levels", true);
        for (const auto& tj : j.at("time_points")) {
            TimePoint tp;
            tp.code = tj.at("code").get<double>();
            tp.mediator = tj.at("mediator").get<std::string>();
            tp.confounders = tj.value("confounders", std::vector<std::string>{});
            if (tj.contains("outcome") && !tj.at("outcome").is_null()) {
                tp.outcome = tj.at("outcome").get<std::string>();
            }
            if (tj.contains("levels")) tp.mediator_levels = tj.at("levels").get<int>();
            s.times.push_back(std::move(tp));
        }
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorCode::InvalidSchema, std::string("malformed schema: ") + e.what());
    }
    s.check();
    return s;
}

inline nlohmann::json schema_to_json(const VariableSchema& s) {
    nlohmann::json j;
    j["id"] = s.id_column;
    j["baseline"] = s.baseline;
    j["exposure"] = s.exposure;
    j["outcome_mode"] = s.outcome_mode == OutcomeMode::PerTime ? "per-time" : "end-of-study";
    j["strict_levels"] = s.strict_levels;
    j["time_points"] = nlohmann::json::array();
    for (const auto& tp : s.times) {
        nlohmann::json tj;
        tj["code"] = tp.code;
        tj["mediator"] = tp.mediator;
        tj["confounders"] = tp.confounders;
        if (tp.outcome) tj["outcome"] = *tp.outcome;
        if (tp.mediator_levels) tj["levels"] = *tp.mediator_levels;
        j["time_points"].push_back(tj);
    }
    return j;
}

struct ValidationIssue {
    ErrorCode code;
    std::optional<std::size_t> row; // 0-based data row
    std::string column;
    std::string message;
};

struct ValidationReport {
    std::vector<ValidationIssue> issues;

    bool empty() const { return issues.empty(); }

    bool has(ErrorCode code) const {
        return std::any_of(issues.begin(), issues.end(), [&](const auto& i) { return i.code == code; });
    }
};

/// Subject-level longitudinal data. One row per subject; per-time variables
/// live in their own suffixed columns as the schema declares.
class LongDataset {
public:
    LongDataset() = default;

    // No validation beyond shape; see validate() and load_dataset().
    static LongDataset from_columns(VariableSchema schema, std::vector<std::string> names,
                                    Eigen::MatrixXd values, std::vector<long long> ids = {}) {
        if (static_cast<Eigen::Index>(names.size()) != values.cols()) {
            fail(ErrorCode::SchemaMismatch, "column name count does not match value matrix");
        }
        LongDataset ds;
        ds.schema_ = std::move(schema);
        ds.names_ = std::move(names);
        ds.values_ = std::move(values);
        if (ids.empty()) {
            ids.resize(static_cast<std::size_t>(ds.values_.rows()));
            for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<long long>(i + 1);
        }
        if (static_cast<Eigen::Index>(ids.size()) != ds.values_.rows()) {
            fail(ErrorCode::SchemaMismatch, "id count does not match row count");
        }
        ds.ids_ = std::move(ids);
        for (std::size_t c = 0; c < ds.names_.size(); ++c) {
            ds.index_[ds.names_[c]] = static_cast<Eigen::Index>(c);
        }
        ds.infer_levels();
        return ds;
    }

    const VariableSchema& schema() const { return schema_; }
    std::size_t n_subjects() const { return static_cast<std::size_t>(values_.rows()); }
    std::size_t n_times() const { return schema_.n_times(); }
    const std::vector<std::string>& column_names() const { return names_; }
    const std::vector<long long>& ids() const { return ids_; }
    const Eigen::MatrixXd& values() const { return values_; }

    bool has_column(const std::string& name) const { return index_.count(name) != 0; }

    Eigen::Index column_index(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) fail(ErrorCode::MissingColumn, "column '" + name + "' not found");
        return it->second;
    }

    auto column(const std::string& name) const { return values_.col(column_index(name)); }

    double value(std::size_t row, const std::string& name) const {
        return values_(static_cast<Eigen::Index>(row), column_index(name));
    }

    Eigen::VectorXd exposure() const { return column(schema_.exposure); }

    // Highest mediator level K at time index t (0-based); levels are 0..K.
    int mediator_levels(std::size_t t) const { return levels_.at(t); }

    // Copy with one column's values replaced.
    LongDataset with_column(const std::string& name, const Eigen::VectorXd& v) const {
        LongDataset out = *this;
        out.values_.col(column_index(name)) = v;
        out.infer_levels();
        return out;
    }

    LongDataset subset(const std::vector<std::size_t>& rows) const {
        Eigen::MatrixXd v(static_cast<Eigen::Index>(rows.size()), values_.cols());
        std::vector<long long> ids;
        ids.reserve(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) {
            v.row(static_cast<Eigen::Index>(r)) = values_.row(static_cast<Eigen::Index>(rows[r]));
            ids.push_back(ids_[rows[r]]);
        }
        return from_columns(schema_, names_, std::move(v), std::move(ids));
    }

private:
    void infer_levels() {
        levels_.assign(schema_.n_times(), 0);
        for (std::size_t t = 0; t < schema_.n_times(); ++t) {
            const auto& tp = schema_.times[t];
            if (tp.mediator_levels && schema_.strict_levels) {
                levels_[t] = *tp.mediator_levels;
                continue;
            }
            const auto it = index_.find(tp.mediator);
            if (it == index_.end() || values_.rows() == 0) {
                levels_[t] = tp.mediator_levels.value_or(1);
                continue;
            }
            double mx = 0.0;
            for (Eigen::Index i = 0; i < values_.rows(); ++i) {
                const double v = values_(i, it->second);
                if (std::isfinite(v)) mx = std::max(mx, v);
            }
            levels_[t] = std::max(1, static_cast<int>(mx));
        }
    }

    VariableSchema schema_;
    std::vector<std::string> names_;
    std::unordered_map<std::string, Eigen::Index> index_;
    Eigen::MatrixXd values_;
    std::vector<long long> ids_;
    std::vector<int> levels_;
};

namespace detail {

inline bool is_integer_value(double v) { return std::isfinite(v) && std::floor(v) == v; }

inline std::string row_label(const LongDataset& ds, std::size_t row) {
    return "subject " + std::to_string(ds.ids()[row]) + " (row " + std::to_string(row + 1) + ")";
}

} // namespace detail

inline ValidationReport validate(const LongDataset& ds) {
    ValidationReport report;
    const auto& schema = ds.schema();
    auto add = [&](ErrorCode code, std::optional<std::size_t> row, const std::string& col, std::string msg) {
        report.issues.push_back(ValidationIssue{code, row, col, std::move(msg)});
    };

    bool missing_any = false;
    for (const auto& c : schema.columns()) {
        if (!ds.has_column(c)) {
            add(ErrorCode::MissingColumn, std::nullopt, c, "column '" + c + "' declared by the schema is absent");
            missing_any = true;
        }
    }
    if (missing_any) return report;

    const std::size_t n = ds.n_subjects();
    for (const auto& c : schema.columns()) {
        const auto col = ds.column(c);
        for (std::size_t i = 0; i < n; ++i) {
            if (!std::isfinite(col(static_cast<Eigen::Index>(i)))) {
                add(ErrorCode::MissingValue, i, c, "missing value in column '" + c + "' for " + detail::row_label(ds, i));
            }
        }
    }

    const auto a = ds.column(schema.exposure);
    for (std::size_t i = 0; i < n; ++i) {
        const double v = a(static_cast<Eigen::Index>(i));
        if (std::isfinite(v) && v != 0.0 && v != 1.0) {
            add(ErrorCode::NonBinaryExposure, i, schema.exposure,
                "exposure '" + schema.exposure + "' has non-binary value for " + detail::row_label(ds, i));
        }
    }

    for (std::size_t t = 0; t < schema.n_times(); ++t) {
        const auto& tp = schema.times[t];
        const auto m = ds.column(tp.mediator);
        const int declared = tp.mediator_levels.value_or(-1);
        std::set<int> seen;
        int mx = 0;
        for (std::size_t i = 0; i < n; ++i) {
            const double v = m(static_cast<Eigen::Index>(i));
            if (!std::isfinite(v)) continue;
            if (!detail::is_integer_value(v) || v < 0.0 || (declared >= 0 && v > declared)) {
                add(ErrorCode::OutOfRangeCategory, i, tp.mediator,
                    "mediator '" + tp.mediator + "' value out of range for " + detail::row_label(ds, i));
                continue;
            }
            seen.insert(static_cast<int>(v));
            mx = std::max(mx, static_cast<int>(v));
        }
        if (schema.strict_levels) {
            const int top = declared >= 0 ? declared : mx;
            for (int k = 0; k <= top; ++k) {
                if (!seen.count(k)) {
                    add(ErrorCode::OutOfRangeCategory, std::nullopt, tp.mediator,
                        "mediator '" + tp.mediator + "' level " + std::to_string(k) + " is never observed");
                }
            }
        }
    }

    // Degenerate exposure overall, or within a stratum of a discrete L0.
    if (n > 0 && !report.has(ErrorCode::NonBinaryExposure) && !report.has(ErrorCode::MissingValue)) {
        const double total = a.sum();
        if (total == 0.0 || total == static_cast<double>(n)) {
            add(ErrorCode::PositivityViolation, std::nullopt, schema.exposure,
                "exposure takes a single value in the whole sample");
        } else if (!schema.baseline.empty()) {
            bool discrete = true;
            for (const auto& c : schema.baseline) {
                std::set<double> distinct;
                const auto col = ds.column(c);
                for (std::size_t i = 0; i < n && distinct.size() <= 10; ++i) distinct.insert(col(static_cast<Eigen::Index>(i)));
                if (distinct.size() > 10) discrete = false;
            }
            if (discrete) {
                std::map<std::vector<double>, std::pair<std::size_t, std::size_t>> strata;
                for (std::size_t i = 0; i < n; ++i) {
                    std::vector<double> key;
                    for (const auto& c : schema.baseline) key.push_back(ds.value(i, c));
                    auto& cell = strata[key];
                    (a(static_cast<Eigen::Index>(i)) == 1.0 ? cell.first : cell.second) += 1;
                }
                for (const auto& [key, cnt] : strata) {
                    if (cnt.first == 0 || cnt.second == 0) {
                        std::ostringstream os;
                        os << "baseline stratum (";
                        for (std::size_t k = 0; k < key.size(); ++k) os << (k ? "," : "") << key[k];
                        os << ") has a single exposure level";
                        add(ErrorCode::PositivityViolation, std::nullopt, schema.exposure, os.str());
                    }
                }
            }
        }
    }
    return report;
}

namespace detail {

inline std::string trim(std::string s) {
    const auto not_space = [](unsigned char c) { return !std::isspace(c); };
    s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
    s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
    if (s.size() >= 2 && s.front() == '"' && s.back() == '"') s = s.substr(1, s.size() - 2);
    return s;
}

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (char ch : line) {
        if (ch == '"') {
            quoted = !quoted;
            cur.push_back(ch);
        } else if (ch == ',' && !quoted) {
            out.push_back(trim(cur));
            cur.clear();
        } else if (ch != '\r') {
            cur.push_back(ch);
        }
    }
    out.push_back(trim(cur));
    return out;
}

inline std::optional<double> parse_number(const std::string& s) {
    if (s.empty() || s == "NA" || s == "NaN" || s == "nan" || s == ".") return std::nullopt;
    double v = 0.0;
    const char* first = s.data();
    if (*first == '+') ++first;
    const auto [ptr, ec] = std::from_chars(first, s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) return std::nullopt;
    return v;
}

inline std::string format_number(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    if (ec != std::errc()) return "NaN";
    return std::string(buf, ptr);
}

} // namespace detail

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) fail(ErrorCode::InvalidConfig, "cannot open '" + path + "'");
    CsvTable table;
    std::string line;
    if (!std::getline(in, line)) fail(ErrorCode::MissingColumn, "'" + path + "' has no header row");
    table.header = detail::split_csv_line(line);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (detail::trim(line).empty()) continue;
        auto cells = detail::split_csv_line(line);
        if (cells.size() != table.header.size()) {
            fail(ErrorCode::MissingValue, "'" + path + "' line " + std::to_string(line_no) + " has " +
                                              std::to_string(cells.size()) + " cells, header has " +
                                              std::to_string(table.header.size()));
        }
        table.rows.push_back(std::move(cells));
    }
    return table;
}

/// Reads a header-bearing CSV and validates it against the schema. Throws the
/// first error-class issue found (MissingColumn, MissingValue,
/// NonBinaryExposure, OutOfRangeCategory).
inline LongDataset load_dataset(const std::string& path, const VariableSchema& schema) {
    schema.check();
    const CsvTable table = read_csv(path);
    for (const auto& c : schema.columns()) {
        if (std::find(table.header.begin(), table.header.end(), c) == table.header.end()) {
            fail(ErrorCode::MissingColumn, "column '" + c + "' declared by the schema is absent from '" + path + "'");
        }
    }
    const auto id_it = std::find(table.header.begin(), table.header.end(), schema.id_column);
    const bool has_id = id_it != table.header.end();
    const auto id_pos = static_cast<std::size_t>(id_it - table.header.begin());

    std::vector<std::string> names;
    std::vector<std::size_t> source;
    for (std::size_t c = 0; c < table.header.size(); ++c) {
        if (has_id && c == id_pos) continue;
        names.push_back(table.header[c]);
        source.push_back(c);
    }
    const auto n = static_cast<Eigen::Index>(table.rows.size());
    Eigen::MatrixXd values(n, static_cast<Eigen::Index>(names.size()));
    std::vector<long long> ids;
    std::set<long long> seen_ids;
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = table.rows[static_cast<std::size_t>(i)];
        for (std::size_t c = 0; c < names.size(); ++c) {
            const auto v = detail::parse_number(row[source[c]]);
            values(i, static_cast<Eigen::Index>(c)) = v.value_or(std::numeric_limits<double>::quiet_NaN());
        }
        if (has_id) {
            const auto v = detail::parse_number(row[id_pos]);
            if (!v || !detail::is_integer_value(*v)) {
                fail(ErrorCode::MissingValue, "id column '" + schema.id_column + "' invalid at row " + std::to_string(i + 1));
            }
            const auto id = static_cast<long long>(*v);
            if (!seen_ids.insert(id).second) {
                fail(ErrorCode::InvalidSchema, "duplicate subject id " + std::to_string(id));
            }
            ids.push_back(id);
        }
    }
    auto ds = LongDataset::from_columns(schema, std::move(names), std::move(values), std::move(ids));
    const auto report = validate(ds);
    for (const auto& issue : report.issues) {
        if (issue.code != ErrorCode::PositivityViolation) throw Error(issue.code, issue.message);
    }
    return ds;
}

inline void write_dataset_csv(const LongDataset& ds, std::ostream& out) {
    out << ds.schema().id_column;
    for (const auto& name : ds.column_names()) out << ',' << name;
    out << '\n';
    const auto& v = ds.values();
    for (Eigen::Index i = 0; i < v.rows(); ++i) {
        out << ds.ids()[static_cast<std::size_t>(i)];
        for (Eigen::Index c = 0; c < v.cols(); ++c) out << ',' << detail::format_number(v(i, c));
        out << '\n';
    }
}

inline void export_dataset(const LongDataset& ds, const std::string& path) {
    std::ofstream out(path);
    if (!out) fail(ErrorCode::InvalidConfig, "cannot write '" + path + "'");
    write_dataset_csv(ds, out);
}

} // namespace lmed
