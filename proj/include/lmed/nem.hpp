#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Dense>

#include "lmed/error.hpp"
#include "lmed/expansion.hpp"
#include "lmed/glm.hpp"
#include "lmed/stats.hpp"

namespace lmed {

enum class Link { Identity, Logit };

/// One product term of the natural effect model. Factors are drawn from
/// "a", "a_star", "t" and baseline covariate names.
struct NemTerm {
    std::vector<std::string> factors;

    std::string label() const {
        std::string s;
        for (std::size_t i = 0; i < factors.size(); ++i) s += (i ? ":" : "") + factors[i];
        return s;
    }

    std::multiset<std::string> key() const { return {factors.begin(), factors.end()}; }
};

struct NemFormula {
    Link link = Link::Logit;
    std::vector<NemTerm> terms; // excludes the intercept, which is always present

    // "a + a_star + t + t:a + t:a_star"; a leading "1 +" is accepted.
    static NemFormula parse(const std::string& text, Link link = Link::Logit) {
        NemFormula f;
        f.link = link;
        std::size_t start = 0;
        while (start <= text.size()) {
            const auto pos = text.find('+', start);
            const std::string piece = detail::trim(text.substr(start, pos == std::string::npos ? std::string::npos : pos - start));
            if (!piece.empty() && piece != "1") {
                NemTerm term;
                std::size_t s = 0;
                while (true) {
                    const auto c = piece.find(':', s);
                    auto factor = detail::trim(piece.substr(s, c == std::string::npos ? std::string::npos : c - s));
                    if (factor == "astar" || factor == "Astar" || factor == "a*") factor = "a_star";
                    if (factor.empty()) fail(ErrorCode::InvalidConfig, "empty factor in formula term '" + piece + "'");
                    term.factors.push_back(factor);
                    if (c == std::string::npos) break;
                    s = c + 1;
                }
                f.terms.push_back(std::move(term));
            }
            if (pos == std::string::npos) break;
            start = pos + 1;
        }
        f.check();
        return f;
    }

    // Main-effects-plus-time model: a + a_star + t + t:a + t:a_star
    static NemFormula standard(Link link = Link::Logit) { return parse("a + a_star + t + t:a + t:a_star", link); }

    void check() const {
        std::set<std::multiset<std::string>> seen;
        for (const auto& t : terms) {
            if (!seen.insert(t.key()).second) fail(ErrorCode::InvalidConfig, "duplicate formula term '" + t.label() + "'");
        }
        if (find({"a"}) < 0) fail(ErrorCode::MissingTerm, "formula must contain the term 'a'");
        if (find({"a_star"}) < 0) fail(ErrorCode::MissingTerm, "formula must contain the term 'a_star'");
    }

    // Index into alpha (intercept is 0), or -1.
    int find(const std::vector<std::string>& factors) const {
        const std::multiset<std::string> k(factors.begin(), factors.end());
        for (std::size_t i = 0; i < terms.size(); ++i) {
            if (terms[i].key() == k) return static_cast<int>(i) + 1;
        }
        return -1;
    }

    std::vector<std::string> coef_names() const {
        std::vector<std::string> names{"(Intercept)"};
        for (const auto& t : terms) names.push_back(t.label());
        return names;
    }

    std::vector<std::string> covariates() const {
        std::vector<std::string> out;
        for (const auto& t : terms) {
            for (const auto& f : t.factors) {
                if (f != "a" && f != "a_star" && f != "t" && std::find(out.begin(), out.end(), f) == out.end()) {
                    out.push_back(f);
                }
            }
        }
        return out;
    }

    std::string text() const {
        std::string s = "1";
        for (const auto& t : terms) s += " + " + t.label();
        return s;
    }

    /// Design row at (a, a*, t) with covariate values looked up by name
    /// (absent covariates evaluate to 0).
    Eigen::VectorXd row(double a, double a_star, double t, const std::map<std::string, double>& cov = {}) const {
        Eigen::VectorXd x(static_cast<Eigen::Index>(terms.size()) + 1);
        x(0) = 1.0;
        for (std::size_t k = 0; k < terms.size(); ++k) {
            double v = 1.0;
            for (const auto& f : terms[k].factors) {
                if (f == "a") {
                    v *= a;
                } else if (f == "a_star") {
                    v *= a_star;
                } else if (f == "t") {
                    v *= t;
                } else {
                    const auto it = cov.find(f);
                    v *= it == cov.end() ? 0.0 : it->second;
                }
            }
            x(static_cast<Eigen::Index>(k) + 1) = v;
        }
        return x;
    }
};

struct NaturalEffectFit {
    NemFormula formula;
    std::vector<std::string> coef_names;
    Eigen::VectorXd alpha;
    Eigen::MatrixXd robust_cov;
    Eigen::MatrixXd model_cov; // inverse weighted information
    double scale = 1.0;
    std::size_t n_records = 0;
    std::size_t n_clusters = 0;
    std::size_t max_cluster_size = 0;
    int iterations = 0;
    bool converged = false;

    int index_of(const std::string& label) const {
        for (std::size_t i = 0; i < coef_names.size(); ++i) {
            if (coef_names[i] == label) return static_cast<int>(i);
        }
        return -1;
    }
};

/// Design matrix of a formula over expanded records.
inline Eigen::MatrixXd nem_design(const NemFormula& f, const ExpandedData& data) {
    const auto n = static_cast<Eigen::Index>(data.records.size());
    const auto p = static_cast<Eigen::Index>(f.terms.size()) + 1;
    // Resolve covariate factor columns once.
    std::vector<std::vector<int>> factor_col(f.terms.size());
    for (std::size_t k = 0; k < f.terms.size(); ++k) {
        for (const auto& fac : f.terms[k].factors) {
            int col = -1;
            if (fac == "a") {
                col = -2;
            } else if (fac == "a_star") {
                col = -3;
            } else if (fac == "t") {
                col = -4;
            } else {
                const auto it = std::find(data.baseline_names.begin(), data.baseline_names.end(), fac);
                if (it == data.baseline_names.end()) {
                    fail(ErrorCode::MissingTerm, "formula covariate '" + fac + "' is not a baseline covariate");
                }
                col = static_cast<int>(it - data.baseline_names.begin());
            }
            factor_col[k].push_back(col);
        }
    }
    Eigen::MatrixXd x(n, p);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = data.records[static_cast<std::size_t>(i)];
        x(i, 0) = 1.0;
        for (std::size_t k = 0; k < f.terms.size(); ++k) {
            double v = 1.0;
            for (int col : factor_col[k]) {
                switch (col) {
                case -2: v *= r.a; break;
                case -3: v *= r.a_star; break;
                case -4: v *= r.t; break;
                default: v *= data.baseline(static_cast<Eigen::Index>(r.subject), col);
                }
            }
            x(i, static_cast<Eigen::Index>(k) + 1) = v;
        }
    }
    return x;
}

struct ClusterLayout {
    std::vector<std::size_t> starts; // index of the first record of each cluster, plus end sentinel
    std::size_t max_size = 0;
};

inline ClusterLayout cluster_layout(const std::vector<ExpandedRecord>& recs) {
    ClusterLayout out;
    std::unordered_set<long long> closed;
    for (std::size_t i = 0; i < recs.size(); ++i) {
        if (i == 0 || recs[i].id != recs[i - 1].id) {
            if (i > 0) closed.insert(recs[i - 1].id);
            if (closed.count(recs[i].id)) {
                fail(ErrorCode::UnsortedClusters, "records for id " + std::to_string(recs[i].id) + " are not contiguous");
            }
            out.starts.push_back(i);
        }
    }
    out.starts.push_back(recs.size());
    for (std::size_t c = 0; c + 1 < out.starts.size(); ++c) {
        out.max_size = std::max(out.max_size, out.starts[c + 1] - out.starts[c]);
    }
    return out;
}

/// Cluster-robust sandwich A^{-1} B A^{-1}. A is the weighted information
/// X' diag(w v) X, B the sum over clusters of outer products of the
/// cluster-summed weighted scores w x (y - mu).
inline Eigen::MatrixXd sandwich_covariance(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& w,
                                           const Eigen::VectorXd& mu, const Eigen::VectorXd& variance,
                                           const ClusterLayout& clusters, Eigen::MatrixXd* bread_inverse = nullptr) {
    const Eigen::Index p = x.cols();
    const Eigen::VectorXd wv = w.cwiseProduct(variance);
    const Eigen::MatrixXd bread = x.transpose() * wv.asDiagonal() * x;
    const Eigen::MatrixXd bread_inv = glm_detail::inverse_spd(bread);
    Eigen::MatrixXd meat = Eigen::MatrixXd::Zero(p, p);
    Eigen::VectorXd u(p);
    for (std::size_t c = 0; c + 1 < clusters.starts.size(); ++c) {
        u.setZero();
        for (std::size_t i = clusters.starts[c]; i < clusters.starts[c + 1]; ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            u.noalias() += (w(r) * (y(r) - mu(r))) * x.row(r).transpose();
        }
        meat.selfadjointView<Eigen::Lower>().rankUpdate(u);
    }
    meat = meat.selfadjointView<Eigen::Lower>();
    Eigen::MatrixXd cov = bread_inv * meat * bread_inv;
    if (bread_inverse) *bread_inverse = bread_inv;
    return 0.5 * (cov + cov.transpose());
}

/// Weighted estimating equations with independence working correlation and
/// scale fixed at 1. Point estimates are those of a weighted GLM; the
/// covariance is clustered on subject id.
inline NaturalEffectFit fit_nem(const ExpandedData& data, const NemFormula& formula, const GlmControl& ctl = {}) {
    formula.check();
    const auto& recs = data.records;
    if (recs.empty()) fail(ErrorCode::WeightMissing, "no expanded records");
    const ClusterLayout clusters = cluster_layout(recs);
    const Eigen::MatrixXd x = nem_design(formula, data);
    const auto n = x.rows();
    Eigen::VectorXd y(n), w(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& r = recs[static_cast<std::size_t>(i)];
        y(i) = r.y;
        w(i) = r.w;
        if (!(r.w > 0.0) || !std::isfinite(r.w)) fail(ErrorCode::WeightMissing, "non-positive record weight");
    }

    NaturalEffectFit fit;
    fit.formula = formula;
    fit.coef_names = formula.coef_names();
    fit.n_records = recs.size();
    fit.n_clusters = clusters.starts.size() - 1;
    fit.max_cluster_size = clusters.max_size;

    Eigen::VectorXd mu(n), var(n);
    if (formula.link == Link::Logit) {
        std::vector<int> yi(static_cast<std::size_t>(n));
        for (Eigen::Index i = 0; i < n; ++i) {
            if (y(i) != 0.0 && y(i) != 1.0) fail(ErrorCode::SchemaMismatch, "logit natural effect model needs a binary outcome");
            yi[static_cast<std::size_t>(i)] = static_cast<int>(y(i));
        }
        const auto mf = fit_logit_matrix(x, yi, 1, w, ctl);
        fit.alpha = mf.coefficients.row(0).transpose();
        fit.iterations = mf.iterations;
        fit.converged = mf.converged;
        const Eigen::VectorXd eta = x * fit.alpha;
        for (Eigen::Index i = 0; i < n; ++i) {
            mu(i) = expit(eta(i));
            var(i) = mu(i) * (1.0 - mu(i));
        }
    } else {
        glm_detail::check_rank(x, w);
        const Eigen::MatrixXd xtwx = x.transpose() * w.asDiagonal() * x;
        const Eigen::VectorXd xtwy = x.transpose() * w.cwiseProduct(y);
        Eigen::LDLT<Eigen::MatrixXd> ldlt(xtwx);
        if (ldlt.info() != Eigen::Success) fail(ErrorCode::RankDeficient, "singular weighted cross-product");
        fit.alpha = ldlt.solve(xtwy);
        // One refinement step against round-off.
        fit.alpha += ldlt.solve(xtwy - xtwx * fit.alpha);
        fit.iterations = 1;
        fit.converged = true;
        mu = x * fit.alpha;
        var.setOnes();
    }
    fit.robust_cov = sandwich_covariance(x, y, w, mu, var, clusters, &fit.model_cov);
    return fit;
}

struct WaldRow {
    std::string term;
    double estimate = 0.0;
    double se = 0.0;
    double wald = 0.0;
    double p_value = 1.0;
};

inline WaldRow wald_test(const std::string& term, double estimate, double se) {
    WaldRow r{term, estimate, se, 0.0, 1.0};
    if (se > 0.0) {
        r.wald = (estimate / se) * (estimate / se);
        r.p_value = chisq1_upper(r.wald);
    }
    return r;
}

inline std::vector<WaldRow> wald_tests(const NaturalEffectFit& fit) {
    std::vector<WaldRow> rows;
    for (Eigen::Index k = 0; k < fit.alpha.size(); ++k) {
        rows.push_back(wald_test(fit.coef_names[static_cast<std::size_t>(k)], fit.alpha(k), std::sqrt(fit.robust_cov(k, k))));
    }
    return rows;
}

} // namespace lmed
