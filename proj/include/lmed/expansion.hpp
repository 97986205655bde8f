#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmed/data.hpp"
#include "lmed/error.hpp"
#include "lmed/weights.hpp"

namespace lmed {

struct ExpandedRecord {
    long long id = 0;
    std::size_t subject = 0; // row in the source dataset
    int A = 0;
    int a = 0;
    int a_star = 0;
    double t = 0.0;
    double y = 0.0;
    double w = 0.0;           // weight used for fitting
    double w_untruncated = 0.0;
};

enum class TimeLabels { Index, Schema };

// Which pool of weights the truncation percentile is taken over.
//   Pooled:   all expanded record weights
//   PerTime:  expanded record weights at each time separately
//   Exposure: per-subject exposure weights, truncated before multiplying
//             by the mediator weights
enum class TruncationPool { Pooled, PerTime, Exposure };

struct ExpansionOptions {
    TimeLabels time_labels = TimeLabels::Index;
    std::optional<double> truncate_q;
    TruncationPool pool = TruncationPool::Pooled;
    // Reuse these thresholds instead of recomputing quantiles (one entry for
    // Pooled/Exposure, one per time for PerTime).
    std::optional<std::vector<double>> frozen_thresholds;
};

struct ExpandedData {
    std::vector<ExpandedRecord> records;
    std::vector<std::string> baseline_names;
    Eigen::MatrixXd baseline; // n_subjects x baseline covariates
    std::vector<double> truncation_thresholds;
    std::size_t n_subjects = 0;
    std::size_t n_times = 0;
};

namespace expansion_detail {

inline double time_code(const LongDataset& ds, std::size_t t, const ExpansionOptions& opt) {
    return opt.time_labels == TimeLabels::Index ? static_cast<double>(t) : ds.schema().times[t].code;
}

inline void check_table(const LongDataset& ds, const WeightTable& w) {
    if (w.n_subjects() != ds.n_subjects() || w.n_times() != ds.n_times() ||
        w.mediator[1].cols() != w.mediator[0].cols()) {
        fail(ErrorCode::WeightMissing, "weight table does not cover every subject and time point");
    }
}

inline void fill_baseline(const LongDataset& ds, ExpandedData& out) {
    out.baseline_names = ds.schema().baseline;
    out.baseline.resize(static_cast<Eigen::Index>(ds.n_subjects()), static_cast<Eigen::Index>(out.baseline_names.size()));
    for (std::size_t c = 0; c < out.baseline_names.size(); ++c) {
        out.baseline.col(static_cast<Eigen::Index>(c)) = ds.column(out.baseline_names[c]);
    }
    out.n_subjects = ds.n_subjects();
}

inline double threshold_for(const std::vector<double>& values, std::size_t slot, const ExpansionOptions& opt) {
    if (opt.frozen_thresholds) {
        if (slot >= opt.frozen_thresholds->size()) fail(ErrorCode::InvalidConfig, "missing frozen truncation threshold");
        return (*opt.frozen_thresholds)[slot];
    }
    return quantile(values, *opt.truncate_q);
}

inline void apply_truncation(ExpandedData& out, const WeightTable& table, const ExpansionOptions& opt,
                             const std::vector<std::size_t>& time_index) {
    auto& recs = out.records;
    for (auto& r : recs) r.w = r.w_untruncated;
    if (!opt.truncate_q && !opt.frozen_thresholds) return;
    switch (opt.pool) {
    case TruncationPool::Pooled: {
        std::vector<double> all;
        all.reserve(recs.size());
        for (const auto& r : recs) all.push_back(r.w_untruncated);
        const double thr = threshold_for(all, 0, opt);
        for (auto& r : recs) r.w = std::min(r.w_untruncated, thr);
        out.truncation_thresholds = {thr};
        break;
    }
    case TruncationPool::PerTime: {
        std::vector<std::vector<double>> per(out.n_times);
        for (std::size_t k = 0; k < recs.size(); ++k) per[time_index[k]].push_back(recs[k].w_untruncated);
        out.truncation_thresholds.assign(out.n_times, 0.0);
        for (std::size_t t = 0; t < out.n_times; ++t) {
            if (!per[t].empty()) out.truncation_thresholds[t] = threshold_for(per[t], t, opt);
        }
        for (std::size_t k = 0; k < recs.size(); ++k) {
            recs[k].w = std::min(recs[k].w_untruncated, out.truncation_thresholds[time_index[k]]);
        }
        break;
    }
    case TruncationPool::Exposure: {
        std::vector<double> wa(table.exposure.data(), table.exposure.data() + table.exposure.size());
        const double thr = threshold_for(wa, 0, opt);
        for (std::size_t k = 0; k < recs.size(); ++k) {
            auto& r = recs[k];
            const double wa_i = table.exposure(static_cast<Eigen::Index>(r.subject));
            const double wm = r.a_star == r.A ? 1.0 : table.mediator_weight(r.subject, time_index[k], r.a_star);
            r.w = std::min(wa_i, thr) * wm;
        }
        out.truncation_thresholds = {thr};
        break;
    }
    }
}

} // namespace expansion_detail

/// Two records per subject per time (a* = A, then a* = 1 - A), grouped by
/// subject. The a* = A row carries w_a; the other carries w_a * w_m(t, 1 - A).
inline ExpandedData expand_per_time(const LongDataset& ds, const WeightTable& weights,
                                    const ExpansionOptions& opt = {}) {
    if (ds.schema().outcome_mode != OutcomeMode::PerTime) {
        fail(ErrorCode::SchemaMismatch, "per-time expansion requires per-time outcomes");
    }
    expansion_detail::check_table(ds, weights);
    ExpandedData out;
    out.n_times = ds.n_times();
    expansion_detail::fill_baseline(ds, out);
    const std::size_t n = ds.n_subjects();
    const std::size_t nt = ds.n_times();
    out.records.reserve(2 * n * nt);
    std::vector<std::size_t> time_index;
    time_index.reserve(2 * n * nt);
    std::vector<Eigen::Index> ycols(nt);
    for (std::size_t t = 0; t < nt; ++t) ycols[t] = ds.column_index(*ds.schema().times[t].outcome);
    const Eigen::Index acol = ds.column_index(ds.schema().exposure);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const int a_obs = static_cast<int>(ds.values()(row, acol));
        for (std::size_t t = 0; t < nt; ++t) {
            ExpandedRecord base;
            base.id = ds.ids()[i];
            base.subject = i;
            base.A = a_obs;
            base.a = a_obs;
            base.t = expansion_detail::time_code(ds, t, opt);
            base.y = ds.values()(row, ycols[t]);

            ExpandedRecord same = base;
            same.a_star = a_obs;
            same.w_untruncated = weights.exposure(row);
            ExpandedRecord flip = base;
            flip.a_star = 1 - a_obs;
            flip.w_untruncated = weights.combined(i, t, 1 - a_obs);
            if (!(same.w_untruncated > 0.0) || !(flip.w_untruncated > 0.0) || !std::isfinite(flip.w_untruncated)) {
                fail(ErrorCode::WeightMissing, "non-positive or missing weight for subject " + std::to_string(base.id));
            }
            out.records.push_back(same);
            out.records.push_back(flip);
            time_index.push_back(t);
            time_index.push_back(t);
        }
    }
    expansion_detail::apply_truncation(out, weights, opt, time_index);
    return out;
}

/// Two records per subject carrying the final outcome and the mediator weight
/// accumulated through the last time point.
inline ExpandedData expand_end_of_study(const LongDataset& ds, const WeightTable& weights,
                                        const ExpansionOptions& opt = {}) {
    expansion_detail::check_table(ds, weights);
    const auto& last = ds.schema().times.back();
    if (!last.outcome) fail(ErrorCode::SchemaMismatch, "end-of-study expansion requires an outcome at the last time");
    ExpandedData out;
    out.n_times = 1;
    expansion_detail::fill_baseline(ds, out);
    const std::size_t n = ds.n_subjects();
    const std::size_t t_last = ds.n_times() - 1;
    const Eigen::Index ycol = ds.column_index(*last.outcome);
    const Eigen::Index acol = ds.column_index(ds.schema().exposure);
    out.records.reserve(2 * n);
    std::vector<std::size_t> time_index(2 * n, 0);
    for (std::size_t i = 0; i < n; ++i) {
        const auto row = static_cast<Eigen::Index>(i);
        const int a_obs = static_cast<int>(ds.values()(row, acol));
        ExpandedRecord base;
        base.id = ds.ids()[i];
        base.subject = i;
        base.A = a_obs;
        base.a = a_obs;
        base.t = expansion_detail::time_code(ds, t_last, opt);
        base.y = ds.values()(row, ycol);
        ExpandedRecord same = base;
        same.a_star = a_obs;
        same.w_untruncated = weights.exposure(row);
        ExpandedRecord flip = base;
        flip.a_star = 1 - a_obs;
        flip.w_untruncated = weights.combined(i, t_last, 1 - a_obs);
        if (!(same.w_untruncated > 0.0) || !(flip.w_untruncated > 0.0) || !std::isfinite(flip.w_untruncated)) {
            fail(ErrorCode::WeightMissing, "non-positive or missing weight for subject " + std::to_string(base.id));
        }
        out.records.push_back(same);
        out.records.push_back(flip);
    }
    // Exposure pooling needs the last-time mediator weights.
    if (opt.pool == TruncationPool::Exposure) {
        for (auto& ti : time_index) ti = t_last;
    }
    expansion_detail::apply_truncation(out, weights, opt, time_index);
    return out;
}

inline ExpandedData expand(const LongDataset& ds, const WeightTable& weights, const ExpansionOptions& opt = {}) {
    return ds.schema().outcome_mode == OutcomeMode::PerTime ? expand_per_time(ds, weights, opt)
                                                           : expand_end_of_study(ds, weights, opt);
}

inline void write_expanded_csv(const ExpandedData& data, std::ostream& out) {
    out << "id,A,a,a_star,t,Y,w\n";
    for (const auto& r : data.records) {
        out << r.id << ',' << r.A << ',' << r.a << ',' << r.a_star << ',' << detail::format_number(r.t) << ','
            << detail::format_number(r.y) << ',' << detail::format_number(r.w) << '\n';
    }
}

} // namespace lmed
