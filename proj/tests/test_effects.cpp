#include <cmath>
#include <random>

#include <gtest/gtest.h>

#include "lmed/effects.hpp"

using namespace lmed;

namespace {

Eigen::VectorXd published_alpha() {
    return (Eigen::VectorXd(6) << -2.10513, 0.24105, 0.11682, -0.13763, 0.14047, 0.00609).finished();
}

} // namespace

// Reference values computed independently (double precision, closed form).
TEST(Effects, PublishedCoefficientsReproduceOddsRatios) {
    const auto fit = fit_from_coefficients(NemFormula::standard(), published_alpha());
    const auto s = decompose(fit, {0, 1, 2, 3});
    const double direct[] = {1.2725846629506723, 1.4645089520975247, 1.6853782174309653, 1.9395577826427814};
    const double indirect[] = {1.1239171064028346, 1.1307826459295485, 1.1376901241657316, 1.1446397972974192};
    const double pm[] = {0.35595700159018706, 0.2794914871071061, 0.23906834910734256, 0.21486932924347035};
    for (std::size_t t = 0; t < 4; ++t) {
        EXPECT_NEAR(s[t].direct.ratio, direct[t], 1e-12);
        EXPECT_NEAR(s[t].indirect.ratio, indirect[t], 1e-12);
        ASSERT_TRUE(s[t].proportion_mediated.has_value());
        EXPECT_NEAR(*s[t].proportion_mediated, pm[t], 1e-12);
    }
    EXPECT_NEAR(s[0].direct.ratio, 1.27, 0.005);
    EXPECT_NEAR(s[3].direct.ratio, 1.94, 0.005);
    EXPECT_NEAR(s[0].indirect.ratio, 1.12, 0.005);
    EXPECT_GE(s[3].indirect.ratio, 1.14 - 0.005);
    EXPECT_LE(s[3].indirect.ratio, 1.15 + 0.005);
    for (std::size_t t = 1; t < 4; ++t) EXPECT_LT(*s[t].proportion_mediated, *s[t - 1].proportion_mediated);
}

TEST(Effects, LinearCombinationsAndStandardErrors) {
    std::mt19937_64 rng(1);
    std::normal_distribution<double> nd;
    Eigen::MatrixXd g(6, 6);
    for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = nd(rng);
    const Eigen::MatrixXd cov = 0.01 * g * g.transpose();
    const auto fit = fit_from_coefficients(NemFormula::standard(), published_alpha(), cov);
    const auto s = decompose(fit, {2.0});
    Eigen::VectorXd cd = Eigen::VectorXd::Zero(6), ci = Eigen::VectorXd::Zero(6);
    cd(1) = 1;
    cd(4) = 2;
    ci(2) = 1;
    ci(5) = 2;
    EXPECT_NEAR(s[0].direct.estimate, cd.dot(published_alpha()), 1e-15);
    EXPECT_NEAR(s[0].indirect.estimate, ci.dot(published_alpha()), 1e-15);
    EXPECT_NEAR(s[0].direct.se, std::sqrt(cd.dot(cov * cd)), 1e-14);
    EXPECT_NEAR(s[0].indirect.se, std::sqrt(ci.dot(cov * ci)), 1e-14);
    const Eigen::VectorXd ct = cd + ci;
    EXPECT_NEAR(s[0].total.se, std::sqrt(ct.dot(cov * ct)), 1e-14);
    EXPECT_NEAR(s[0].direct.lo, std::exp(s[0].direct.estimate - 1.96 * s[0].direct.se), 1e-14);
    EXPECT_NEAR(s[0].direct.hi, std::exp(s[0].direct.estimate + 1.96 * s[0].direct.se), 1e-14);
}

TEST(Effects, DecompositionIsExactOnTheRatioScale) {
    std::mt19937_64 rng(2);
    std::normal_distribution<double> nd(0.0, 0.7);
    for (int rep = 0; rep < 200; ++rep) {
        Eigen::VectorXd alpha(6);
        for (int j = 0; j < 6; ++j) alpha(j) = nd(rng);
        const auto fit = fit_from_coefficients(NemFormula::standard(), alpha);
        for (const auto& s : decompose(fit, {0, 1, 2.5})) {
            EXPECT_EQ(s.total.estimate, s.direct.estimate + s.indirect.estimate);
            EXPECT_LT(std::abs(s.direct.ratio * s.indirect.ratio - s.total.ratio) / s.total.ratio, 1e-14);
        }
    }
}

TEST(Effects, SaturatedFormulaRecoversProbabilityContrasts) {
    const auto f = NemFormula::parse("a + a_star + a:a_star + t + t:a + t:a_star + t:a:a_star");
    Eigen::VectorXd alpha(8);
    alpha << -0.5, 0.4, 0.2, -0.1, 0.3, 0.05, 0.02, 0.01;
    const auto fit = fit_from_coefficients(f, alpha);
    for (const auto& s : decompose(fit, {0, 1})) {
        EXPECT_NEAR(s.direct.estimate, logit(s.probs[1][0]) - logit(s.probs[0][0]), 1e-13);
        EXPECT_NEAR(s.indirect.estimate, logit(s.probs[1][1]) - logit(s.probs[1][0]), 1e-13);
    }
}

TEST(Effects, ProportionMediatedFormula) {
    ProbabilityTable p{};
    p[0][0] = 0.2;
    p[1][0] = 0.3;
    p[1][1] = 0.4;
    EXPECT_NEAR(proportion_mediated(p), 0.5, 1e-15);
    p[1][1] = 0.2;
    try {
        proportion_mediated(p);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::DegenerateTotalEffect);
    }
}

TEST(Effects, NullEffectsLeaveProportionUndefined) {
    Eigen::VectorXd alpha = Eigen::VectorXd::Zero(6);
    alpha(0) = -1.0;
    const auto s = decompose(fit_from_coefficients(NemFormula::standard(), alpha), {0});
    EXPECT_FALSE(s[0].proportion_mediated.has_value());
    EXPECT_EQ(s[0].direct.ratio, 1.0);
}

TEST(Effects, IdentityLinkWorksOnTheMeanScale) {
    const auto f = NemFormula::parse("a + a_star", Link::Identity);
    const auto fit = fit_from_coefficients(f, Eigen::Vector3d(0.2, 0.1, 0.05));
    const auto s = decompose(fit, {0});
    EXPECT_NEAR(s[0].probs[1][1], 0.35, 1e-15);
    EXPECT_TRUE(std::isnan(s[0].direct.ratio));
    EXPECT_NEAR(s[0].indirect.estimate, 0.05, 1e-15);
}

TEST(Effects, CoefficientLengthChecked) {
    EXPECT_THROW(fit_from_coefficients(NemFormula::standard(), Eigen::Vector3d(0, 0, 0)), Error);
}
