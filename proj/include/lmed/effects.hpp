#pragma once

#include <array>
#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmed/error.hpp"
#include "lmed/nem.hpp"
#include "lmed/stats.hpp"

namespace lmed {

struct EffectEstimate {
    double estimate = 0.0; // link scale (log-OR for logit)
    double se = 0.0;
    double ratio = std::numeric_limits<double>::quiet_NaN(); // exp(estimate), logit link only
    double lo = 0.0;
    double hi = 0.0;
};

// P[a][a_star] on the response scale.
using ProbabilityTable = std::array<std::array<double, 2>, 2>;

struct EffectSummary {
    double t = 0.0;
    EffectEstimate direct;
    EffectEstimate indirect;
    EffectEstimate total;
    ProbabilityTable probs{};
    std::optional<double> proportion_mediated;
};

struct EffectOptions {
    double z = 1.96;
    // Covariate values at which conditional effects are evaluated (default 0).
    std::map<std::string, double> covariates;
};

namespace effects_detail {

inline EffectEstimate combine(const Eigen::VectorXd& c, const NaturalEffectFit& fit, Link link, double z) {
    EffectEstimate e;
    e.estimate = c.dot(fit.alpha);
    e.se = std::sqrt(std::max(0.0, c.dot(fit.robust_cov * c)));
    if (link == Link::Logit) {
        e.ratio = std::exp(e.estimate);
        e.lo = std::exp(e.estimate - z * e.se);
        e.hi = std::exp(e.estimate + z * e.se);
    } else {
        e.lo = e.estimate - z * e.se;
        e.hi = e.estimate + z * e.se;
    }
    return e;
}

inline double inverse_link(Link link, double eta) { return link == Link::Logit ? expit(eta) : eta; }

} // namespace effects_detail

/// Counterfactual means for the four (a, a*) settings at time t:
/// g^{-1}(x(a, a*, t)' alpha).
inline ProbabilityTable counterfactual_probs(const NaturalEffectFit& fit, double t, const EffectOptions& opt = {}) {
    ProbabilityTable p{};
    for (int a = 0; a <= 1; ++a) {
        for (int s = 0; s <= 1; ++s) {
            const double eta = fit.formula.row(a, s, t, opt.covariates).dot(fit.alpha);
            p[static_cast<std::size_t>(a)][static_cast<std::size_t>(s)] = effects_detail::inverse_link(fit.formula.link, eta);
        }
    }
    return p;
}

/// (P11 - P10) / (P11 - P00).
inline double proportion_mediated(const ProbabilityTable& p) {
    const double total = p[1][1] - p[0][0];
    if (std::abs(total) < 1e-12) fail(ErrorCode::DegenerateTotalEffect, "P11 and P00 coincide; proportion mediated undefined");
    return (p[1][1] - p[1][0]) / total;
}

inline double proportion_mediated(const NaturalEffectFit& fit, double t, const EffectOptions& opt = {}) {
    return proportion_mediated(counterfactual_probs(fit, t, opt));
}

/// Direct, indirect and total effects at each time on the link scale.
/// direct = x(1,0,t) - x(0,0,t), indirect = x(1,1,t) - x(1,0,t), applied to
/// alpha; for the standard model these are a + t:a and a_star + t:a_star.
inline std::vector<EffectSummary> decompose(const NaturalEffectFit& fit, const std::vector<double>& times,
                                            const EffectOptions& opt = {}) {
    const auto& f = fit.formula;
    if (f.find({"a"}) < 0) fail(ErrorCode::MissingTerm, "natural effect model lacks the term 'a'");
    if (f.find({"a_star"}) < 0) fail(ErrorCode::MissingTerm, "natural effect model lacks the term 'a_star'");
    std::vector<EffectSummary> out;
    for (double t : times) {
        EffectSummary s;
        s.t = t;
        const Eigen::VectorXd x00 = f.row(0, 0, t, opt.covariates);
        const Eigen::VectorXd x10 = f.row(1, 0, t, opt.covariates);
        const Eigen::VectorXd x11 = f.row(1, 1, t, opt.covariates);
        const Eigen::VectorXd c_direct = x10 - x00;
        const Eigen::VectorXd c_indirect = x11 - x10;
        const Eigen::VectorXd c_total = c_direct + c_indirect;
        s.direct = effects_detail::combine(c_direct, fit, f.link, opt.z);
        s.indirect = effects_detail::combine(c_indirect, fit, f.link, opt.z);
        s.total = effects_detail::combine(c_total, fit, f.link, opt.z);
        // Keep the additive decomposition exact on the link scale.
        s.total.estimate = s.direct.estimate + s.indirect.estimate;
        if (f.link == Link::Logit) {
            s.total.ratio = std::exp(s.total.estimate);
            s.total.lo = std::exp(s.total.estimate - opt.z * s.total.se);
            s.total.hi = std::exp(s.total.estimate + opt.z * s.total.se);
        } else {
            s.total.lo = s.total.estimate - opt.z * s.total.se;
            s.total.hi = s.total.estimate + opt.z * s.total.se;
        }
        s.probs = counterfactual_probs(fit, t, opt);
        if (std::abs(s.probs[1][1] - s.probs[0][0]) >= 1e-12) s.proportion_mediated = proportion_mediated(s.probs);
        out.push_back(s);
    }
    return out;
}

/// Builds a fit carrying only a coefficient vector and covariance; used to
/// report effects for externally supplied coefficients.
inline NaturalEffectFit fit_from_coefficients(const NemFormula& formula, const Eigen::VectorXd& alpha,
                                              const Eigen::MatrixXd& cov = {}) {
    if (alpha.size() != static_cast<Eigen::Index>(formula.terms.size()) + 1) {
        fail(ErrorCode::SchemaMismatch, "coefficient vector length does not match formula");
    }
    NaturalEffectFit fit;
    fit.formula = formula;
    fit.coef_names = formula.coef_names();
    fit.alpha = alpha;
    fit.robust_cov = cov.size() == 0 ? Eigen::MatrixXd::Zero(alpha.size(), alpha.size()) : cov;
    fit.model_cov = fit.robust_cov;
    fit.converged = true;
    return fit;
}

} // namespace lmed
