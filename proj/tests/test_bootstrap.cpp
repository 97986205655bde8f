#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "lmed/bootstrap.hpp"
#include "test_util.hpp"

using namespace lmed;

namespace {

struct Fixture {
    LongDataset ds = lmed_test::preset_data(800, 5);
    WorkingModels models = lmed_test::preset_models(ds);
};

const Fixture& fixture() {
    static const Fixture f;
    return f;
}

WorkingModels with_zero_covariance(WorkingModels m) {
    m.exposure->covariance.setZero();
    for (auto& f : m.mediators) f.covariance.setZero();
    return m;
}

} // namespace

TEST(Bootstrap, ZeroCovarianceCollapsesToSandwich) {
    const auto& f = fixture();
    BootstrapConfig cfg;
    cfg.B = 6;
    const auto res = run_perturbed_bootstrap(f.ds, with_zero_covariance(f.models), NemFormula::standard(), cfg);
    EXPECT_TRUE(res.failures.empty());
    EXPECT_EQ(res.between_cov, Eigen::MatrixXd::Zero(6, 6));
    EXPECT_EQ(res.total_cov, res.fixed_cov);
    for (Eigen::Index j = 0; j < res.alpha_draws.rows(); ++j) EXPECT_EQ(res.alpha_draws.row(j).transpose(), res.estimate);
}

TEST(Bootstrap, TotalIsMeanFixedPlusBetween) {
    const auto& f = fixture();
    BootstrapConfig cfg;
    cfg.B = 25;
    const auto res = run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
    ASSERT_EQ(res.alpha_draws.rows(), 25);
    // Empirical covariance with divisor B - 1, computed the textbook way.
    const Eigen::RowVectorXd mean = res.alpha_draws.colwise().mean();
    const Eigen::MatrixXd centred = res.alpha_draws.rowwise() - mean;
    const Eigen::MatrixXd between = centred.transpose() * centred / 24.0;
    EXPECT_LT((res.between_cov - between).cwiseAbs().maxCoeff(), 1e-14);
    Eigen::MatrixXd mean_fixed = Eigen::MatrixXd::Zero(6, 6);
    for (const auto& c : res.fixed_weight_covs) mean_fixed += c / 25.0;
    EXPECT_LT((res.mean_fixed_cov - mean_fixed).cwiseAbs().maxCoeff(), 1e-14);
    EXPECT_LT((res.total_cov - (res.mean_fixed_cov + res.between_cov)).cwiseAbs().maxCoeff(), 1e-16);
    for (int k = 0; k < 6; ++k) EXPECT_GE(res.se_total(k) + 1e-12, std::sqrt(res.mean_fixed_cov(k, k)));
    const auto ci = bootstrap_ci(res, "a");
    const int a = res.index_of("a");
    EXPECT_NEAR(ci.first, res.estimate(a) - 1.96 * res.se_total(a), 1e-15);
    EXPECT_NEAR(ci.second, res.estimate(a) + 1.96 * res.se_total(a), 1e-15);
}

TEST(Bootstrap, SerialAndParallelAreBitIdentical) {
    const auto& f = fixture();
    BootstrapConfig cfg;
    cfg.B = 12;
    cfg.seed = 99;
    const auto serial = run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
    cfg.threads = 4;
    const auto parallel = run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
    EXPECT_EQ(serial.alpha_draws, parallel.alpha_draws);
    EXPECT_EQ(serial.total_cov, parallel.total_cov);
}

TEST(Bootstrap, SeedsDetermineDraws) {
    const auto& f = fixture();
    BootstrapConfig cfg;
    cfg.B = 4;
    cfg.seed = 1;
    const auto a = run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
    const auto b = run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
    cfg.seed = 2;
    const auto c = run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
    EXPECT_EQ(a.alpha_draws, b.alpha_draws);
    EXPECT_NE(a.alpha_draws, c.alpha_draws);
}

TEST(Bootstrap, TargetTermsValidated) {
    const auto& f = fixture();
    BootstrapConfig cfg;
    cfg.B = 2;
    cfg.target_terms = {"nope"};
    EXPECT_THROW(run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg), Error);
    cfg.B = 1;
    cfg.target_terms.clear();
    try {
        run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::InvalidConfig);
    }
}

TEST(Bootstrap, FailuresAreLoggedNotFatal) {
    const auto& f = fixture();
    auto models = f.models;
    // Huge variance on the exposure intercept pushes some draws past the positivity guard.
    models.exposure->covariance(0, 0) = 400.0;
    BootstrapConfig cfg;
    cfg.B = 30;
    const auto res = run_perturbed_bootstrap(f.ds, models, NemFormula::standard(), cfg);
    EXPECT_GT(res.failures.size(), 0u);
    EXPECT_EQ(res.alpha_draws.rows() + static_cast<Eigen::Index>(res.failures.size()), 30);
    EXPECT_NE(res.failures[0].message.find("PositivityViolation"), std::string::npos);
}

TEST(Bootstrap, FrozenTruncationReusesThreshold) {
    const auto& f = fixture();
    BootstrapConfig cfg;
    cfg.B = 3;
    cfg.truncation = TruncationReplay::Freeze;
    ExpansionOptions ex;
    ex.truncate_q = 0.95;
    EXPECT_NO_THROW(run_perturbed_bootstrap(f.ds, f.models, NemFormula::standard(), cfg, ex));
}

TEST(Bootstrap, SymmetricFactorReproducesCovariance) {
    std::mt19937_64 rng(3);
    std::normal_distribution<double> nd;
    for (int rep = 0; rep < 20; ++rep) {
        const int d = 1 + rep % 7;
        Eigen::MatrixXd g(d, d);
        for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = nd(rng);
        const Eigen::MatrixXd cov = g * g.transpose();
        const Eigen::MatrixXd f = symmetric_factor(cov);
        EXPECT_LT((f * f.transpose() - cov).cwiseAbs().maxCoeff(), 1e-10 * (1.0 + cov.cwiseAbs().maxCoeff()));
    }
    Eigen::Matrix2d bad;
    bad << 1, 0, 0, -1;
    try {
        symmetric_factor(bad);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::NonPsdCovariance);
    }
    Eigen::Matrix2d singular;
    singular << 1, 1, 1, 1;
    EXPECT_NO_THROW(symmetric_factor(singular));
}

TEST(Bootstrap, PerturbationsHaveTheFitCovariance) {
    // Monte Carlo: 20000 draws, moments within a few MC standard errors.
    FittedGlm fit;
    fit.coefficients.resize(2, 2);
    fit.coefficients << 0.5, -1.0, 0.2, 0.3;
    Eigen::MatrixXd g(4, 4);
    g << 1, 0, 0, 0, 0.5, 1, 0, 0, 0.2, -0.3, 0.8, 0, 0.1, 0.1, 0.4, 0.6;
    fit.covariance = g * g.transpose();
    for (auto mode : {PerturbMode::Joint, PerturbMode::Blockwise}) {
        const int n = 20000;
        RunningMoments mom(4);
        for (int j = 0; j < n; ++j) {
            auto rng = replicate_rng(17, static_cast<std::uint64_t>(j));
            mom.push(perturb_coefficients(fit, rng, mode));
        }
        const Eigen::MatrixXd c = mom.covariance();
        const Eigen::VectorXd base = fit.flat_coefficients();
        for (int a = 0; a < 4; ++a) {
            EXPECT_NEAR(mom.mean()(a), base(a), 4.0 * std::sqrt(fit.covariance(a, a) / n));
            EXPECT_NEAR(c(a, a), fit.covariance(a, a), 4.0 * fit.covariance(a, a) * std::sqrt(2.0 / n));
        }
        // Cross-block covariance: kept by joint draws, dropped by blockwise ones.
        const double target = mode == PerturbMode::Joint ? fit.covariance(0, 2) : 0.0;
        EXPECT_NEAR(c(0, 2), target, 0.05);
        EXPECT_NEAR(c(0, 1), fit.covariance(0, 1), 0.05);
    }
}

TEST(Bootstrap, UnitExposureWeightsVariant) {
    const auto& f = fixture();
    WorkingModels m = f.models;
    m.exposure.reset();
    BootstrapConfig cfg;
    cfg.B = 3;
    const auto res = run_perturbed_bootstrap(f.ds, m, NemFormula::parse("a + a_star + t + t:a + t:a_star + L0"), cfg);
    EXPECT_EQ(res.coef_names.back(), "L0");
}
