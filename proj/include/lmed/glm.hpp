#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "lmed/data.hpp"
#include "lmed/error.hpp"
#include "lmed/stats.hpp"

namespace lmed {

// ---------------------------------------------------------------------------
// Design specification
// ---------------------------------------------------------------------------

struct Term {
    enum class Kind { Column, Interaction, Categorical };

    Kind kind = Kind::Column;
    std::vector<std::string> columns;
    // Categorical only: highest level K; expands to indicators for 1..K.
    int levels = 0;

    std::string label() const {
        switch (kind) {
        case Kind::Column: return columns.front();
        case Kind::Categorical: return "factor(" + columns.front() + ")";
        case Kind::Interaction: {
            std::string s;
            for (std::size_t i = 0; i < columns.size(); ++i) s += (i ? ":" : "") + columns[i];
            return s;
        }
        }
        return {};
    }

    bool uses(const std::string& column) const {
        return std::find(columns.begin(), columns.end(), column) != columns.end();
    }

    // "A", "A:L1", "factor(M1)"
    static Term parse(const std::string& text) {
        const std::string s = detail::trim(text);
        if (s.empty()) fail(ErrorCode::InvalidConfig, "empty design term");
        Term t;
        if (s.rfind("factor(", 0) == 0 && s.back() == ')') {
            t.kind = Kind::Categorical;
            t.columns.push_back(detail::trim(s.substr(7, s.size() - 8)));
            return t;
        }
        std::size_t start = 0;
        while (true) {
            const auto pos = s.find(':', start);
            t.columns.push_back(detail::trim(s.substr(start, pos == std::string::npos ? std::string::npos : pos - start)));
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        for (const auto& c : t.columns) {
            if (c.empty() || c.find('(') != std::string::npos) {
                fail(ErrorCode::InvalidConfig, "unsupported design term '" + s + "'");
            }
        }
        t.kind = t.columns.size() == 1 ? Kind::Column : Kind::Interaction;
        return t;
    }
};

struct DesignSpec {
    bool intercept = true;
    std::vector<Term> terms;

    static DesignSpec parse(const std::vector<std::string>& terms, bool intercept = true) {
        DesignSpec d;
        d.intercept = intercept;
        for (const auto& t : terms) d.terms.push_back(Term::parse(t));
        return d;
    }

    std::vector<std::string> coef_names() const {
        std::vector<std::string> names;
        if (intercept) names.emplace_back("(Intercept)");
        for (const auto& t : terms) {
            if (t.kind == Term::Kind::Categorical) {
                for (int k = 1; k <= t.levels; ++k) names.push_back(t.label() + std::to_string(k));
            } else {
                names.push_back(t.label());
            }
        }
        return names;
    }

    Eigen::Index n_columns() const { return static_cast<Eigen::Index>(coef_names().size()); }

    bool uses(const std::string& column) const {
        return std::any_of(terms.begin(), terms.end(), [&](const Term& t) { return t.uses(column); });
    }
};

/// Replacement values for one column, used to build counterfactual designs
/// without copying the dataset.
struct ColumnOverride {
    std::string column;
    Eigen::VectorXd values;
};

// Fills in categorical level counts from the data where the spec leaves them open.
inline DesignSpec resolve_design(DesignSpec spec, const LongDataset& ds) {
    for (auto& t : spec.terms) {
        for (const auto& c : t.columns) {
            if (!ds.has_column(c)) fail(ErrorCode::MissingColumn, "design column '" + c + "' not found");
        }
        if (t.kind == Term::Kind::Categorical && t.levels == 0) {
            const auto col = ds.column(t.columns.front());
            t.levels = std::max(1, static_cast<int>(col.maxCoeff()));
        }
    }
    return spec;
}

inline Eigen::MatrixXd build_design(const DesignSpec& spec, const LongDataset& ds,
                                    std::span<const ColumnOverride> overrides = {}) {
    const auto n = static_cast<Eigen::Index>(ds.n_subjects());
    auto source = [&](const std::string& name) -> Eigen::VectorXd {
        for (const auto& o : overrides) {
            if (o.column == name) {
                if (o.values.size() != n) fail(ErrorCode::SchemaMismatch, "override for '" + name + "' has wrong length");
                return o.values;
            }
        }
        if (!ds.has_column(name)) fail(ErrorCode::SchemaMismatch, "design column '" + name + "' not in data");
        return ds.column(name);
    };
    Eigen::MatrixXd x(n, spec.n_columns());
    Eigen::Index c = 0;
    if (spec.intercept) x.col(c++).setOnes();
    for (const auto& t : spec.terms) {
        switch (t.kind) {
        case Term::Kind::Column:
            x.col(c++) = source(t.columns.front());
            break;
        case Term::Kind::Interaction: {
            Eigen::VectorXd prod = source(t.columns.front());
            for (std::size_t k = 1; k < t.columns.size(); ++k) prod.array() *= source(t.columns[k]).array();
            x.col(c++) = prod;
            break;
        }
        case Term::Kind::Categorical: {
            const Eigen::VectorXd v = source(t.columns.front());
            for (Eigen::Index i = 0; i < n; ++i) {
                if (!(v(i) >= 0.0 && v(i) <= t.levels && std::floor(v(i)) == v(i))) {
                    fail(ErrorCode::SchemaMismatch, "value of '" + t.columns.front() + "' outside fitted levels");
                }
            }
            for (int k = 1; k <= t.levels; ++k) {
                x.col(c++) = (v.array() == static_cast<double>(k)).cast<double>();
            }
            break;
        }
        }
    }
    return x;
}

// ---------------------------------------------------------------------------
// Likelihood pieces on plain matrices
// ---------------------------------------------------------------------------

struct GlmControl {
    int max_iter = 100;
    double score_tol = 1e-8;
    double rel_tol = 1e-12;
    double separation_eps = 1e-10;
    double ridge = 0.0;
};

namespace glm_detail {

inline Eigen::VectorXd unit_weights_if_empty(const Eigen::VectorXd& w, Eigen::Index n) {
    return w.size() == 0 ? Eigen::VectorXd::Ones(n) : w;
}

inline void check_rank(const Eigen::MatrixXd& x, const Eigen::VectorXd& w) {
    const Eigen::MatrixXd xs = w.array().sqrt().matrix().asDiagonal() * x;
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(xs);
    if (qr.rank() < x.cols()) {
        fail(ErrorCode::RankDeficient, "design has rank " + std::to_string(qr.rank()) + " < " +
                                           std::to_string(x.cols()) + " columns");
    }
}

inline Eigen::MatrixXd inverse_spd(const Eigen::MatrixXd& m) {
    Eigen::LDLT<Eigen::MatrixXd> ldlt(m);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) {
        fail(ErrorCode::RankDeficient, "information matrix is not positive definite");
    }
    Eigen::MatrixXd inv = ldlt.solve(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
    return 0.5 * (inv + inv.transpose());
}

} // namespace glm_detail

// Softmax over the reference category plus K linear predictors; row i of the
// result holds probabilities for levels 0..K.
inline Eigen::MatrixXd softmax_with_reference(const Eigen::MatrixXd& eta) {
    const Eigen::Index n = eta.rows();
    const Eigen::Index k = eta.cols();
    Eigen::MatrixXd p(n, k + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        double mx = 0.0;
        for (Eigen::Index j = 0; j < k; ++j) mx = std::max(mx, eta(i, j));
        double denom = std::exp(-mx);
        p(i, 0) = denom;
        for (Eigen::Index j = 0; j < k; ++j) {
            p(i, j + 1) = std::exp(eta(i, j) - mx);
            denom += p(i, j + 1);
        }
        p.row(i) /= denom;
    }
    return p;
}

inline double binary_loglik(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                            const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = x * beta;
    NeumaierSum ll;
    for (Eigen::Index i = 0; i < x.rows(); ++i) ll.add(w(i) * (y(i) * eta(i) - log1pexp(eta(i))));
    return ll.value();
}

inline Eigen::VectorXd binary_score(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                    const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = x * beta;
    Eigen::VectorXd r(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) r(i) = w(i) * (y(i) - expit(eta(i)));
    return x.transpose() * r;
}

inline Eigen::MatrixXd binary_information(const Eigen::MatrixXd& x, const Eigen::VectorXd& w,
                                          const Eigen::VectorXd& beta) {
    const Eigen::VectorXd eta = x * beta;
    Eigen::VectorXd v(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double p = expit(eta(i));
        v(i) = w(i) * p * (1.0 - p);
    }
    return x.transpose() * v.asDiagonal() * x;
}

// theta is K x p, level-major when flattened (level 1 block first).
inline double multinomial_loglik(const Eigen::MatrixXd& x, const std::vector<int>& y, const Eigen::VectorXd& w,
                                 const Eigen::MatrixXd& theta) {
    const Eigen::MatrixXd eta = x * theta.transpose();
    NeumaierSum ll;
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        double mx = 0.0;
        for (Eigen::Index k = 0; k < eta.cols(); ++k) mx = std::max(mx, eta(i, k));
        double s = std::exp(-mx);
        for (Eigen::Index k = 0; k < eta.cols(); ++k) s += std::exp(eta(i, k) - mx);
        const double lse = mx + std::log(s);
        const int yi = y[static_cast<std::size_t>(i)];
        ll.add(w(i) * ((yi > 0 ? eta(i, yi - 1) : 0.0) - lse));
    }
    return ll.value();
}

inline Eigen::VectorXd multinomial_score(const Eigen::MatrixXd& x, const std::vector<int>& y,
                                         const Eigen::VectorXd& w, const Eigen::MatrixXd& theta) {
    const Eigen::Index k = theta.rows();
    const Eigen::Index p = x.cols();
    const Eigen::MatrixXd prob = softmax_with_reference(x * theta.transpose());
    Eigen::VectorXd g(k * p);
    for (Eigen::Index l = 0; l < k; ++l) {
        Eigen::VectorXd r(x.rows());
        for (Eigen::Index i = 0; i < x.rows(); ++i) {
            r(i) = w(i) * ((y[static_cast<std::size_t>(i)] == l + 1 ? 1.0 : 0.0) - prob(i, l + 1));
        }
        g.segment(l * p, p) = x.transpose() * r;
    }
    return g;
}

inline Eigen::MatrixXd multinomial_information(const Eigen::MatrixXd& x, const Eigen::VectorXd& w,
                                               const Eigen::MatrixXd& theta) {
    const Eigen::Index k = theta.rows();
    const Eigen::Index p = x.cols();
    const Eigen::MatrixXd prob = softmax_with_reference(x * theta.transpose());
    Eigen::MatrixXd info(k * p, k * p);
    for (Eigen::Index a = 0; a < k; ++a) {
        for (Eigen::Index b = a; b < k; ++b) {
            Eigen::VectorXd v(x.rows());
            for (Eigen::Index i = 0; i < x.rows(); ++i) {
                v(i) = w(i) * prob(i, a + 1) * ((a == b ? 1.0 : 0.0) - prob(i, b + 1));
            }
            const Eigen::MatrixXd blk = x.transpose() * v.asDiagonal() * x;
            info.block(a * p, b * p, p, p) = blk;
            if (a != b) info.block(b * p, a * p, p, p) = blk.transpose();
        }
    }
    return info;
}

// ---------------------------------------------------------------------------
// Fitted models
// ---------------------------------------------------------------------------

enum class Family { BinaryLogit, MultinomialLogit };

struct FittedGlm {
    Family family = Family::BinaryLogit;
    std::string response;
    DesignSpec design;
    // K x p; one row for binary fits.
    Eigen::MatrixXd coefficients;
    // (K p) x (K p), level-major.
    Eigen::MatrixXd covariance;
    bool converged = false;
    int iterations = 0;
    double loglik = 0.0;

    int n_nonreference_levels() const { return static_cast<int>(coefficients.rows()); }

    Eigen::VectorXd flat_coefficients() const {
        const Eigen::Index k = coefficients.rows();
        const Eigen::Index p = coefficients.cols();
        Eigen::VectorXd v(k * p);
        for (Eigen::Index l = 0; l < k; ++l) v.segment(l * p, p) = coefficients.row(l).transpose();
        return v;
    }

    FittedGlm with_flat_coefficients(const Eigen::VectorXd& v) const {
        FittedGlm out = *this;
        const Eigen::Index p = coefficients.cols();
        for (Eigen::Index l = 0; l < coefficients.rows(); ++l) out.coefficients.row(l) = v.segment(l * p, p).transpose();
        return out;
    }
};

struct MatrixFit {
    Eigen::MatrixXd coefficients;
    Eigen::MatrixXd covariance;
    int iterations = 0;
    double loglik = 0.0;
    bool converged = false;
};

/// Newton-Raphson for a multinomial (K >= 1) baseline-category logit. With
/// K = 1 this is ordinary IRLS for a binary logit. Step-halving keeps the
/// log-likelihood non-decreasing.
inline MatrixFit fit_logit_matrix(const Eigen::MatrixXd& x, const std::vector<int>& y, int k_levels,
                                  const Eigen::VectorXd& weights, const GlmControl& ctl = {},
                                  std::vector<double>* loglik_trace = nullptr) {
    const Eigen::Index n = x.rows();
    const Eigen::Index p = x.cols();
    const Eigen::Index k = k_levels;
    const Eigen::VectorXd w = glm_detail::unit_weights_if_empty(weights, n);
    if (w.size() != n || static_cast<Eigen::Index>(y.size()) != n) {
        fail(ErrorCode::SchemaMismatch, "response/weight length does not match design rows");
    }
    glm_detail::check_rank(x, w);

    auto penalized_ll = [&](const Eigen::MatrixXd& th) {
        double ll = multinomial_loglik(x, y, w, th);
        if (ctl.ridge > 0.0) ll -= 0.5 * ctl.ridge * th.squaredNorm();
        return ll;
    };
    auto flat = [&](const Eigen::MatrixXd& th) {
        Eigen::VectorXd v(k * p);
        for (Eigen::Index l = 0; l < k; ++l) v.segment(l * p, p) = th.row(l).transpose();
        return v;
    };
    auto unflat = [&](const Eigen::VectorXd& v) {
        Eigen::MatrixXd th(k, p);
        for (Eigen::Index l = 0; l < k; ++l) th.row(l) = v.segment(l * p, p).transpose();
        return th;
    };
    auto pinned = [&](const Eigen::MatrixXd& th) {
        const Eigen::MatrixXd prob = softmax_with_reference(x * th.transpose());
        for (Eigen::Index i = 0; i < n; ++i) {
            if (w(i) <= 0.0) continue;
            for (Eigen::Index j = 0; j <= k; ++j) {
                if (prob(i, j) < ctl.separation_eps || prob(i, j) > 1.0 - ctl.separation_eps) return true;
            }
        }
        return false;
    };

    auto gradient = [&](const Eigen::MatrixXd& th) {
        Eigen::VectorXd g = multinomial_score(x, y, w, th);
        if (ctl.ridge > 0.0) g -= ctl.ridge * flat(th);
        return g;
    };
    auto newton_step = [&](const Eigen::MatrixXd& th, const Eigen::VectorXd& g) {
        Eigen::MatrixXd info = multinomial_information(x, w, th);
        if (ctl.ridge > 0.0) info.diagonal().array() += ctl.ridge;
        Eigen::LDLT<Eigen::MatrixXd> ldlt(info);
        if (ldlt.info() != Eigen::Success) fail(ErrorCode::RankDeficient, "singular information matrix");
        return Eigen::VectorXd(ldlt.solve(g));
    };

    Eigen::MatrixXd theta = Eigen::MatrixXd::Zero(k, p);
    double ll = penalized_ll(theta);
    if (loglik_trace) loglik_trace->push_back(ll);
    MatrixFit out;
    int iter = 0;
    for (; iter < ctl.max_iter; ++iter) {
        const Eigen::VectorXd g = gradient(theta);
        if (g.cwiseAbs().maxCoeff() < ctl.score_tol) {
            out.converged = true;
            break;
        }
        if (iter > 0 && pinned(theta)) {
            fail(ErrorCode::Separation, "fitted probabilities pinned at 0 or 1 (complete or quasi-complete separation)");
        }
        const Eigen::VectorXd step = newton_step(theta, g);
        const Eigen::VectorXd cur = flat(theta);
        // Rounding noise in the log-likelihood near the optimum must not
        // block a full Newton step.
        const double slack = 64.0 * std::numeric_limits<double>::epsilon() * (1.0 + std::abs(ll));
        double scale = 1.0;
        Eigen::MatrixXd cand = unflat(cur + step);
        double ll_new = penalized_ll(cand);
        int halvings = 0;
        while (!(ll_new >= ll - slack) && halvings < 40) {
            scale *= 0.5;
            cand = unflat(cur + scale * step);
            ll_new = penalized_ll(cand);
            ++halvings;
        }
        if (!(ll_new >= ll - slack)) {
            // Near the optimum the log-likelihood can be flat to rounding;
            // take the full step if it shrinks the score.
            cand = unflat(cur + step);
            if (!(gradient(cand).cwiseAbs().maxCoeff() < g.cwiseAbs().maxCoeff())) break; // stuck; reported below
            ll_new = penalized_ll(cand);
        }
        theta = cand;
        ll = std::max(ll, ll_new);
        if (loglik_trace) loglik_trace->push_back(ll_new);
    }
    if (!out.converged) {
        const double gnorm = gradient(theta).cwiseAbs().maxCoeff();
        if (pinned(theta)) fail(ErrorCode::Separation, "fitted probabilities pinned at 0 or 1");
        fail(ErrorCode::NotConverged, "no convergence after " + std::to_string(iter) +
                                          " iterations; max |score| = " + std::to_string(gnorm));
    }
    // Polish: extra Newton steps while they keep shrinking the score.
    {
        double gmax = gradient(theta).cwiseAbs().maxCoeff();
        for (int extra = 0; extra < 3 && gmax > 0.0; ++extra) {
            const Eigen::MatrixXd cand = unflat(flat(theta) + newton_step(theta, gradient(theta)));
            const double gnew = gradient(cand).cwiseAbs().maxCoeff();
            if (!(gnew < gmax)) break;
            theta = cand;
            gmax = gnew;
        }
        ll = penalized_ll(theta);
    }
    Eigen::MatrixXd info = multinomial_information(x, w, theta);
    if (ctl.ridge > 0.0) info.diagonal().array() += ctl.ridge;
    out.coefficients = theta;
    out.covariance = glm_detail::inverse_spd(info);
    out.iterations = iter;
    out.loglik = ll;
    return out;
}

inline FittedGlm fit_binary_logit(const LongDataset& ds, const std::string& response, const DesignSpec& design,
                                  const std::optional<Eigen::VectorXd>& case_weights = std::nullopt,
                                  const GlmControl& ctl = {}) {
    const DesignSpec spec = resolve_design(design, ds);
    const Eigen::MatrixXd x = build_design(spec, ds);
    const auto col = ds.column(response);
    std::vector<int> y(static_cast<std::size_t>(col.size()));
    for (Eigen::Index i = 0; i < col.size(); ++i) {
        if (col(i) != 0.0 && col(i) != 1.0) fail(ErrorCode::SchemaMismatch, "response '" + response + "' is not binary");
        y[static_cast<std::size_t>(i)] = static_cast<int>(col(i));
    }
    const auto mf = fit_logit_matrix(x, y, 1, case_weights.value_or(Eigen::VectorXd()), ctl);
    FittedGlm fit;
    fit.family = Family::BinaryLogit;
    fit.response = response;
    fit.design = spec;
    fit.coefficients = mf.coefficients;
    fit.covariance = mf.covariance;
    fit.converged = mf.converged;
    fit.iterations = mf.iterations;
    fit.loglik = mf.loglik;
    return fit;
}

/// Baseline-category (level 0 reference) multinomial logit. `levels` is the
/// highest level K; taken from the dataset schema when the response is a
/// declared mediator, otherwise from the largest observed value.
inline FittedGlm fit_multinomial_logit(const LongDataset& ds, const std::string& response, const DesignSpec& design,
                                       std::optional<int> levels = std::nullopt,
                                       const std::optional<Eigen::VectorXd>& case_weights = std::nullopt,
                                       const GlmControl& ctl = {}) {
    const DesignSpec spec = resolve_design(design, ds);
    const Eigen::MatrixXd x = build_design(spec, ds);
    const auto col = ds.column(response);
    int k = 0;
    if (levels) {
        k = *levels;
    } else {
        k = std::max(1, static_cast<int>(col.maxCoeff()));
        const auto& times = ds.schema().times;
        for (std::size_t t = 0; t < times.size(); ++t) {
            if (times[t].mediator == response) k = ds.mediator_levels(t);
        }
    }
    const Eigen::VectorXd w = case_weights.value_or(Eigen::VectorXd::Ones(col.size()));
    std::vector<int> y(static_cast<std::size_t>(col.size()));
    std::vector<double> mass(static_cast<std::size_t>(k + 1), 0.0);
    for (Eigen::Index i = 0; i < col.size(); ++i) {
        const double v = col(i);
        if (!(v >= 0.0 && v <= k && std::floor(v) == v)) {
            fail(ErrorCode::SchemaMismatch, "response '" + response + "' outside levels 0.." + std::to_string(k));
        }
        y[static_cast<std::size_t>(i)] = static_cast<int>(v);
        mass[static_cast<std::size_t>(v)] += w(i);
    }
    if (ctl.ridge <= 0.0) {
        for (int l = 0; l <= k; ++l) {
            if (mass[static_cast<std::size_t>(l)] <= 0.0) {
                fail(ErrorCode::EmptyCategory, "level " + std::to_string(l) + " of '" + response + "' is never observed");
            }
        }
    }
    const auto mf = fit_logit_matrix(x, y, k, w, ctl);
    FittedGlm fit;
    fit.family = Family::MultinomialLogit;
    fit.response = response;
    fit.design = spec;
    fit.coefficients = mf.coefficients;
    fit.covariance = mf.covariance;
    fit.converged = mf.converged;
    fit.iterations = mf.iterations;
    fit.loglik = mf.loglik;
    return fit;
}

/// Per-row probabilities for levels 0..K (two columns for binary fits).
inline Eigen::MatrixXd predict_probs(const FittedGlm& fit, const LongDataset& ds,
                                     std::span<const ColumnOverride> overrides = {}) {
    const Eigen::MatrixXd x = build_design(fit.design, ds, overrides);
    if (x.cols() != fit.coefficients.cols()) {
        fail(ErrorCode::SchemaMismatch, "design width does not match fitted coefficients");
    }
    return softmax_with_reference(x * fit.coefficients.transpose());
}

inline double observed_prob(const Eigen::MatrixXd& probs, Eigen::Index row, int observed_level) {
    if (observed_level < 0 || observed_level >= probs.cols()) {
        fail(ErrorCode::SchemaMismatch, "observed level outside fitted levels");
    }
    return probs(row, observed_level);
}

inline double observed_prob(const FittedGlm& fit, const LongDataset& ds, std::size_t row, int observed_level,
                            std::span<const ColumnOverride> overrides = {}) {
    const auto probs = predict_probs(fit, ds, overrides);
    return observed_prob(probs, static_cast<Eigen::Index>(row), observed_level);
}

// Probability of the response level each subject actually has.
inline Eigen::VectorXd observed_probs(const FittedGlm& fit, const LongDataset& ds,
                                      std::span<const ColumnOverride> overrides = {}) {
    const Eigen::MatrixXd probs = predict_probs(fit, ds, overrides);
    const auto y = ds.column(fit.response);
    Eigen::VectorXd out(probs.rows());
    for (Eigen::Index i = 0; i < probs.rows(); ++i) out(i) = observed_prob(probs, i, static_cast<int>(y(i)));
    return out;
}

} // namespace lmed
