#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmed/data.hpp"
#include "lmed/error.hpp"
#include "lmed/glm.hpp"
#include "lmed/stats.hpp"

namespace lmed {

struct WeightOptions {
    double positivity_eps = 1e-6;
    // When false, positivity breaches are counted in `warnings` instead of thrown.
    bool positivity_error = true;
};

struct WeightWarnings {
    std::size_t positivity_breaches = 0;
};

namespace weight_detail {

inline void guard(double p, const std::string& what, std::size_t row, const WeightOptions& opt,
                  WeightWarnings* warn) {
    if (p >= opt.positivity_eps && p <= 1.0 - opt.positivity_eps && std::isfinite(p)) return;
    if (opt.positivity_error) {
        fail(ErrorCode::PositivityViolation,
             what + " probability " + std::to_string(p) + " outside [eps, 1 - eps] at row " + std::to_string(row + 1));
    }
    if (warn) ++warn->positivity_breaches;
}

} // namespace weight_detail

/// Unstabilized inverse probability of exposure weights: 1/p if A = 1,
/// 1/(1 - p) if A = 0, with p the fitted P(A = 1 | L0).
inline Eigen::VectorXd exposure_weights(const FittedGlm& fit, const LongDataset& ds, const WeightOptions& opt = {},
                                        WeightWarnings* warn = nullptr) {
    if (fit.family != Family::BinaryLogit) fail(ErrorCode::SchemaMismatch, "exposure model must be a binary logit");
    const Eigen::MatrixXd probs = predict_probs(fit, ds);
    const Eigen::VectorXd a = ds.exposure();
    Eigen::VectorXd w(a.size());
    for (Eigen::Index i = 0; i < a.size(); ++i) {
        const double p = probs(i, 1);
        weight_detail::guard(p, "exposure", static_cast<std::size_t>(i), opt, warn);
        w(i) = a(i) == 1.0 ? 1.0 / p : 1.0 / (1.0 - p);
    }
    return w;
}

// For natural effect models that adjust for L0 by regression.
inline Eigen::VectorXd unit_exposure_weights(const LongDataset& ds) {
    return Eigen::VectorXd::Ones(static_cast<Eigen::Index>(ds.n_subjects()));
}

/// Per-subject ratio P(M_t = m | A = a*, history) / P(M_t = m | A = A_i, history)
/// for the observed mediator level m. Exactly 1 where a* equals the observed exposure.
inline Eigen::VectorXd mediator_ratio(const FittedGlm& fit, const LongDataset& ds, int a_star,
                                      const WeightOptions& opt = {}, WeightWarnings* warn = nullptr) {
    const std::string& exposure = ds.schema().exposure;
    const auto n = static_cast<Eigen::Index>(ds.n_subjects());
    const Eigen::VectorXd a = ds.exposure();
    const Eigen::VectorXd denom = observed_probs(fit, ds);
    const ColumnOverride cf{exposure, Eigen::VectorXd::Constant(n, static_cast<double>(a_star))};
    const Eigen::VectorXd numer = observed_probs(fit, ds, std::span<const ColumnOverride>(&cf, 1));
    Eigen::VectorXd ratio(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        if (a(i) == static_cast<double>(a_star)) {
            ratio(i) = 1.0;
            continue;
        }
        weight_detail::guard(denom(i), "mediator", static_cast<std::size_t>(i), opt, warn);
        ratio(i) = numer(i) / denom(i);
    }
    return ratio;
}

/// n x T matrix of running products of mediator ratios through each time.
inline Eigen::MatrixXd cumulative_mediator_weights(std::span<const FittedGlm> fits, const LongDataset& ds, int a_star,
                                                   const WeightOptions& opt = {}, WeightWarnings* warn = nullptr) {
    const auto n = static_cast<Eigen::Index>(ds.n_subjects());
    Eigen::MatrixXd w(n, static_cast<Eigen::Index>(fits.size()));
    Eigen::VectorXd running = Eigen::VectorXd::Ones(n);
    for (std::size_t t = 0; t < fits.size(); ++t) {
        running.array() *= mediator_ratio(fits[t], ds, a_star, opt, warn).array();
        w.col(static_cast<Eigen::Index>(t)) = running;
    }
    return w;
}

struct WeightTable {
    Eigen::VectorXd exposure;                // w_a, per subject
    std::array<Eigen::MatrixXd, 2> mediator; // w_m(t, a*), n x T, indexed by a*
    Eigen::VectorXd observed_exposure;       // A_i

    std::size_t n_subjects() const { return static_cast<std::size_t>(exposure.size()); }
    std::size_t n_times() const { return static_cast<std::size_t>(mediator[0].cols()); }

    double mediator_weight(std::size_t i, std::size_t t, int a_star) const {
        return mediator[static_cast<std::size_t>(a_star)](static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(t));
    }

    double combined(std::size_t i, std::size_t t, int a_star) const {
        return exposure(static_cast<Eigen::Index>(i)) * mediator_weight(i, t, a_star);
    }
};

/// Exposure weights from `exposure_fit` (unit weights when absent) and
/// cumulative mediator weights for both values of a*.
inline WeightTable build_weight_table(const FittedGlm* exposure_fit, std::span<const FittedGlm> mediator_fits,
                                      const LongDataset& ds, const WeightOptions& opt = {},
                                      WeightWarnings* warn = nullptr) {
    if (mediator_fits.size() != ds.n_times()) {
        fail(ErrorCode::WeightMissing, "need one mediator model per time point");
    }
    WeightTable table;
    table.exposure = exposure_fit ? exposure_weights(*exposure_fit, ds, opt, warn) : unit_exposure_weights(ds);
    table.mediator[0] = cumulative_mediator_weights(mediator_fits, ds, 0, opt, warn);
    table.mediator[1] = cumulative_mediator_weights(mediator_fits, ds, 1, opt, warn);
    table.observed_exposure = ds.exposure();
    return table;
}

struct Truncated {
    std::vector<double> weights;
    double threshold = 0.0;
};

/// Resets values above the empirical q-quantile (type 7) to that quantile.
inline Truncated truncate_weights(std::span<const double> w, double q) {
    if (w.empty()) fail(ErrorCode::WeightMissing, "cannot truncate an empty weight vector");
    if (!(q > 0.0 && q <= 1.0)) fail(ErrorCode::InvalidConfig, "truncation percentile must lie in (0, 1]");
    Truncated out;
    out.threshold = quantile(w, q);
    out.weights.assign(w.begin(), w.end());
    for (double& v : out.weights) v = std::min(v, out.threshold);
    return out;
}

inline Truncated truncate_weights_at(std::span<const double> w, double threshold) {
    Truncated out;
    out.threshold = threshold;
    out.weights.assign(w.begin(), w.end());
    for (double& v : out.weights) v = std::min(v, threshold);
    return out;
}

struct WeightSummary {
    WeightStats stats;
    std::vector<HistogramBin> bins;
};

inline WeightSummary weight_summary(std::span<const double> w, std::size_t bins = 30) {
    return WeightSummary{summarize(w), histogram(w, bins)};
}

inline constexpr std::array<const char*, 6> kSummaryLabels{"Min.", "1st Qu.", "Median", "Mean", "3rd Qu.", "Max."};

inline std::array<double, 6> summary_values(const WeightStats& s) {
    return {s.min, s.q1, s.median, s.mean, s.q3, s.max};
}

} // namespace lmed
