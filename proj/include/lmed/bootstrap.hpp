#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include <Eigen/Dense>

#include "lmed/data.hpp"
#include "lmed/error.hpp"
#include "lmed/expansion.hpp"
#include "lmed/glm.hpp"
#include "lmed/nem.hpp"
#include "lmed/stats.hpp"
#include "lmed/weights.hpp"

namespace lmed {

/// Exposure model (absent for the unit-exposure-weight variant) and one
/// mediator model per time point.
struct WorkingModels {
    std::optional<FittedGlm> exposure;
    std::vector<FittedGlm> mediators;
};

inline WeightTable build_weight_table(const WorkingModels& models, const LongDataset& ds, const WeightOptions& opt = {},
                                      WeightWarnings* warn = nullptr) {
    return build_weight_table(models.exposure ? &*models.exposure : nullptr, models.mediators, ds, opt, warn);
}

// Per-replicate stream derived from the master seed and the replicate index.
inline std::mt19937_64 replicate_rng(std::uint64_t seed, std::uint64_t replicate) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed & 0xffffffffu), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(replicate & 0xffffffffu), static_cast<std::uint32_t>(replicate >> 32),
                      0x6c6d6564u};
    return std::mt19937_64(seq);
}

/// Symmetric square root factor F with F F' = cov. Eigenvalues slightly
/// below zero (relative 1e-10) are clipped; anything more negative is an error.
inline Eigen::MatrixXd symmetric_factor(const Eigen::MatrixXd& cov) {
    if (cov.size() == 0) return cov;
    const Eigen::MatrixXd sym = 0.5 * (cov + cov.transpose());
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(sym);
    if (es.info() != Eigen::Success) fail(ErrorCode::NonPsdCovariance, "eigendecomposition failed");
    Eigen::VectorXd ev = es.eigenvalues();
    const double top = std::max(1.0, ev.cwiseAbs().maxCoeff());
    for (Eigen::Index i = 0; i < ev.size(); ++i) {
        if (ev(i) < 0.0) {
            if (ev(i) < -1e-10 * top) fail(ErrorCode::NonPsdCovariance, "covariance has a negative eigenvalue");
            ev(i) = 0.0;
        }
    }
    return es.eigenvectors() * ev.cwiseSqrt().asDiagonal();
}

enum class PerturbMode {
    Joint,    // one draw from the full (K p) covariance
    Blockwise // independent draws per mediator level block
};

inline Eigen::VectorXd standard_normals(std::mt19937_64& rng, Eigen::Index n) {
    std::normal_distribution<double> nd(0.0, 1.0);
    Eigen::VectorXd z(n);
    for (Eigen::Index i = 0; i < n; ++i) z(i) = nd(rng);
    return z;
}

/// Coefficients plus mean-zero normal noise with the fit's covariance,
/// flattened level-major.
inline Eigen::VectorXd perturb_coefficients(const FittedGlm& fit, std::mt19937_64& rng,
                                            PerturbMode mode = PerturbMode::Joint) {
    const Eigen::VectorXd base = fit.flat_coefficients();
    const Eigen::Index p = fit.coefficients.cols();
    const Eigen::Index k = fit.coefficients.rows();
    if (mode == PerturbMode::Joint || k == 1) {
        const Eigen::MatrixXd f = symmetric_factor(fit.covariance);
        return base + f * standard_normals(rng, base.size());
    }
    Eigen::VectorXd out = base;
    for (Eigen::Index l = 0; l < k; ++l) {
        const Eigen::MatrixXd f = symmetric_factor(fit.covariance.block(l * p, l * p, p, p));
        out.segment(l * p, p) += f * standard_normals(rng, p);
    }
    return out;
}

inline FittedGlm perturbed_fit(const FittedGlm& fit, std::mt19937_64& rng, PerturbMode mode = PerturbMode::Joint) {
    return fit.with_flat_coefficients(perturb_coefficients(fit, rng, mode));
}

enum class TruncationReplay { Reapply, Freeze };

struct BootstrapConfig {
    int B = 200;
    std::uint64_t seed = 1;
    // Terms whose covariance is reported; empty means all.
    std::vector<std::string> target_terms;
    PerturbMode mode = PerturbMode::Joint;
    TruncationReplay truncation = TruncationReplay::Reapply;
    int threads = 1;
};

struct ReplicateFailure {
    int replicate = 0;
    std::string message;
};

struct BootstrapResult {
    std::vector<std::string> coef_names;
    Eigen::VectorXd estimate;       // unperturbed point estimate
    Eigen::MatrixXd fixed_cov;      // sandwich of the unperturbed fit
    Eigen::MatrixXd alpha_draws;    // successful replicates x p
    std::vector<Eigen::MatrixXd> fixed_weight_covs;
    Eigen::MatrixXd mean_fixed_cov;
    Eigen::MatrixXd between_cov;    // empirical covariance of the draws, divisor B - 1
    Eigen::MatrixXd total_cov;
    std::vector<std::string> target_terms;
    std::vector<ReplicateFailure> failures;
    int requested = 0;

    int index_of(const std::string& term) const {
        for (std::size_t i = 0; i < coef_names.size(); ++i) {
            if (coef_names[i] == term) return static_cast<int>(i);
        }
        return -1;
    }

    double se_total(int k) const { return std::sqrt(std::max(0.0, total_cov(k, k))); }
    double se_fixed(int k) const { return std::sqrt(std::max(0.0, fixed_cov(k, k))); }
};

/// Replicate j: perturb every working model from its own covariance, rebuild
/// the weights and the expanded data, refit the natural effect model and
/// keep alpha(j) with its fixed-weight sandwich. Models are never refit.
inline BootstrapResult run_perturbed_bootstrap(const LongDataset& ds, const WorkingModels& models,
                                               const NemFormula& formula, const BootstrapConfig& cfg,
                                               const ExpansionOptions& expansion = {},
                                               const WeightOptions& weight_opt = {}, const GlmControl& ctl = {}) {
    if (cfg.B < 2) fail(ErrorCode::InvalidConfig, "bootstrap needs B >= 2");

    const WeightTable base_table = build_weight_table(models, ds, weight_opt);
    const ExpandedData base_data = expand(ds, base_table, expansion);
    const NaturalEffectFit base_fit = fit_nem(base_data, formula, ctl);

    ExpansionOptions rep_expansion = expansion;
    if (cfg.truncation == TruncationReplay::Freeze && (expansion.truncate_q || expansion.frozen_thresholds)) {
        rep_expansion.frozen_thresholds = base_data.truncation_thresholds;
    }

    struct Slot {
        bool ok = false;
        Eigen::VectorXd alpha;
        Eigen::MatrixXd cov;
        std::string error;
    };
    std::vector<Slot> slots(static_cast<std::size_t>(cfg.B));

    auto run_one = [&](int j) {
        Slot& slot = slots[static_cast<std::size_t>(j)];
        try {
            auto rng = replicate_rng(cfg.seed, static_cast<std::uint64_t>(j));
            WorkingModels pert;
            if (models.exposure) pert.exposure = perturbed_fit(*models.exposure, rng, cfg.mode);
            for (const auto& m : models.mediators) pert.mediators.push_back(perturbed_fit(m, rng, cfg.mode));
            const WeightTable table = build_weight_table(pert, ds, weight_opt);
            const ExpandedData data = expand(ds, table, rep_expansion);
            const NaturalEffectFit f = fit_nem(data, formula, ctl);
            slot.alpha = f.alpha;
            slot.cov = f.robust_cov;
            slot.ok = true;
        } catch (const std::exception& e) {
            slot.error = e.what();
        }
    };

    const int threads = std::max(1, std::min(cfg.threads, cfg.B));
    if (threads == 1) {
        for (int j = 0; j < cfg.B; ++j) run_one(j);
    } else {
        std::atomic<int> next{0};
        std::vector<std::thread> pool;
        for (int t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (int j = next++; j < cfg.B; j = next++) run_one(j);
            });
        }
        for (auto& th : pool) th.join();
    }

    BootstrapResult res;
    res.coef_names = base_fit.coef_names;
    res.estimate = base_fit.alpha;
    res.fixed_cov = base_fit.robust_cov;
    res.requested = cfg.B;
    res.target_terms = cfg.target_terms.empty() ? base_fit.coef_names : cfg.target_terms;
    for (const auto& t : res.target_terms) {
        if (res.index_of(t) < 0) fail(ErrorCode::MissingTerm, "bootstrap target term '" + t + "' not in the formula");
    }

    const Eigen::Index p = base_fit.alpha.size();
    RunningMoments moments(p);
    RunningMatrixMean mean_cov(p, p);
    std::vector<Eigen::VectorXd> draws;
    for (int j = 0; j < cfg.B; ++j) {
        const Slot& s = slots[static_cast<std::size_t>(j)];
        if (!s.ok) {
            res.failures.push_back({j, s.error});
            continue;
        }
        moments.push(s.alpha);
        mean_cov.push(s.cov);
        draws.push_back(s.alpha);
        res.fixed_weight_covs.push_back(s.cov);
    }
    if (draws.size() < 2) {
        fail(ErrorCode::NotConverged, "fewer than two bootstrap replicates succeeded (" +
                                          std::to_string(res.failures.size()) + " failed)");
    }
    res.alpha_draws.resize(static_cast<Eigen::Index>(draws.size()), p);
    for (std::size_t j = 0; j < draws.size(); ++j) res.alpha_draws.row(static_cast<Eigen::Index>(j)) = draws[j].transpose();
    res.mean_fixed_cov = mean_cov.mean();
    res.between_cov = moments.covariance();
    res.total_cov = res.mean_fixed_cov + res.between_cov;
    return res;
}

/// estimate_k +/- z * se_k, centred on the unperturbed estimate.
inline std::pair<double, double> bootstrap_ci(const BootstrapResult& res, int k, double z = 1.96) {
    const double se = res.se_total(k);
    return {res.estimate(k) - z * se, res.estimate(k) + z * se};
}

inline std::pair<double, double> bootstrap_ci(const BootstrapResult& res, const std::string& term, double z = 1.96) {
    const int k = res.index_of(term);
    if (k < 0) fail(ErrorCode::MissingTerm, "term '" + term + "' not in bootstrap result");
    return bootstrap_ci(res, k, z);
}

/// Variance of a linear combination c' alpha under the combined covariance.
inline double combination_se(const Eigen::MatrixXd& cov, const Eigen::VectorXd& c) {
    return std::sqrt(std::max(0.0, c.dot(cov * c)));
}

} // namespace lmed
