#include <cmath>
#include <numbers>
#include <random>

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace lmed;

namespace {

ErrorCode code_of(const std::function<void()>& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return ErrorCode::InvalidConfig;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Written without conditional_probs: softmax over {0, eta_1..eta_K}.
std::vector<double> brute_probs(const StructuralModel& m, const VariableSpec& v, const std::vector<double>& x) {
    if (v.dist == Dist::Table) {
        std::vector<int> key;
        for (const auto& p : v.table_parents) key.push_back(static_cast<int>(x[static_cast<std::size_t>(m.index_of(p))]));
        return v.table.at(key);
    }
    std::vector<double> e{1.0};
    for (int k = 0; k < v.levels; ++k) {
        double eta = v.intercepts[static_cast<std::size_t>(k)];
        for (const auto& [p, c] : v.coefficients) eta += c[static_cast<std::size_t>(k)] * x[static_cast<std::size_t>(m.index_of(p))];
        e.push_back(std::exp(eta));
    }
    double s = 0.0;
    for (double q : e) s += q;
    for (double& q : e) q /= s;
    return e;
}

// Mixed-radix sweep over every discrete node before Y_t; mediators read a*.
double brute_gformula(const StructuralModel& m, int t, int a, int a_star) {
    const int target = m.outcome_index(t);
    const int ex = m.exposure_index();
    std::vector<int> free;
    for (int k = 0; k < target; ++k) {
        if (k != ex) free.push_back(k);
    }
    std::vector<int> digit(free.size(), 0);
    double total = 0.0;
    while (true) {
        std::vector<double> x(m.variables.size(), 0.0);
        for (std::size_t j = 0; j < free.size(); ++j) x[static_cast<std::size_t>(free[j])] = digit[j];
        double p = 1.0;
        for (int k : free) {
            const auto& v = m.variables[static_cast<std::size_t>(k)];
            auto xx = x;
            xx[static_cast<std::size_t>(ex)] = v.role == Role::Mediator ? a_star : a;
            p *= brute_probs(m, v, xx)[static_cast<std::size_t>(x[static_cast<std::size_t>(k)])];
        }
        x[static_cast<std::size_t>(ex)] = a;
        const auto py = brute_probs(m, m.variables[static_cast<std::size_t>(target)], x);
        total += p * py[1];
        std::size_t j = 0;
        for (; j < free.size(); ++j) {
            if (++digit[j] <= m.variables[static_cast<std::size_t>(free[j])].levels) break;
            digit[j] = 0;
        }
        if (j == free.size()) break;
    }
    return total;
}

} // namespace

TEST(Sim, HermiteMoments) {
    const auto [x, w] = gauss_hermite_normal(64);
    double m2 = 0.0, m4 = 0.0, ex = 0.0, sw = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sw += w[i];
        m2 += w[i] * x[i] * x[i];
        m4 += w[i] * std::pow(x[i], 4);
        ex += w[i] * sigmoid(x[i]);
    }
    EXPECT_NEAR(sw, 1.0, 1e-13);
    EXPECT_NEAR(m2, 1.0, 1e-12);
    EXPECT_NEAR(m4, 3.0, 1e-11);
    EXPECT_NEAR(ex, 0.5, 1e-13);
}

TEST(Sim, GformulaMatchesIpwOnRandomModels) {
    std::mt19937_64 rng(20240611);
    for (int rep = 0; rep < 24; ++rep) {
        const int T = 1 + rep % 3;
        const int K = 1 + rep % 2;
        const auto m = lmed_test::random_discrete_model(rng, T, K);
        for (int t = 1; t <= T; ++t) {
            for (int a = 0; a <= 1; ++a) {
                for (int s = 0; s <= 1; ++s) {
                    const double g = gformula_value(m, t, a, s);
                    EXPECT_GE(g, 0.0);
                    EXPECT_LE(g, 1.0);
                    EXPECT_NEAR(g, ipw_population_value(m, t, a, s), 1e-10) << rep << " t=" << t;
                }
            }
        }
    }
}

TEST(Sim, GformulaMatchesBruteForceEnumeration) {
    std::mt19937_64 rng(77);
    for (int rep = 0; rep < 10; ++rep) {
        const auto m = lmed_test::random_discrete_model(rng, 1 + rep % 2, 1 + rep % 3);
        for (int t = 1; t <= m.n_times; ++t) {
            for (int a = 0; a <= 1; ++a) {
                for (int s = 0; s <= 1; ++s) EXPECT_NEAR(gformula_value(m, t, a, s), brute_gformula(m, t, a, s), 1e-12);
            }
        }
    }
}

TEST(Sim, SingleTimeOracleMatchesSimpsonIntegration) {
    const auto m = preset_appendix3_single();
    const double pc2 = 0.4;
    for (int a = 0; a <= 1; ++a) {
        for (int s = 0; s <= 1; ++s) {
            auto f = [&](double c1) {
                double acc = 0.0;
                for (int c2 = 0; c2 <= 1; ++c2) {
                    const double pm = sigmoid(0.05 + 0.1 * s - 0.1 * c1 - 0.2 * c2);
                    for (int mv = 0; mv <= 1; ++mv) {
                        const double py = sigmoid(0.05 + 0.1 * a + 0.1 * mv - 0.1 * c1 - 0.2 * c2);
                        acc += (c2 ? pc2 : 1 - pc2) * (mv ? pm : 1 - pm) * py;
                    }
                }
                return acc * std::exp(-0.5 * c1 * c1) / std::sqrt(2.0 * std::numbers::pi);
            };
            const int n = 4000;
            const double lo = -12.0, h = 24.0 / n;
            double sum = f(lo) + f(-lo);
            for (int i = 1; i < n; ++i) sum += (i % 2 ? 4.0 : 2.0) * f(lo + i * h);
            EXPECT_NEAR(gformula_value(m, 1, a, s), sum * h / 3.0, 1e-8);
            EXPECT_NEAR(ipw_population_value(m, 1, a, s), sum * h / 3.0, 1e-8);
        }
    }
}

TEST(Sim, OutcomeWithoutMediatorIgnoresAStar) {
    std::mt19937_64 rng(5);
    auto m = lmed_test::random_discrete_model(rng, 1, 2);
    auto& y = m.variables[static_cast<std::size_t>(m.outcome_index(1))];
    std::erase_if(y.coefficients, [](const auto& c) { return c.first == "M1"; });
    m.validate();
    for (int a = 0; a <= 1; ++a) EXPECT_NEAR(gformula_value(m, 1, a, 0), gformula_value(m, 1, a, 1), 1e-14);
}

TEST(Sim, NoExposureToMediatorEdgeGivesNullIndirect) {
    std::mt19937_64 rng(9);
    auto m = lmed_test::random_discrete_model(rng, 2, 1);
    for (auto& v : m.variables) {
        if (v.role == Role::Mediator) std::erase_if(v.coefficients, [](const auto& c) { return c.first == "A"; });
    }
    m.validate();
    for (const auto& e : true_effects(m, all_times(m))) EXPECT_NEAR(e.indirect_log, 0.0, 1e-13);
}

TEST(Sim, NullModelHasEqualValues) {
    std::mt19937_64 rng(11);
    auto m = lmed_test::random_discrete_model(rng, 2, 1);
    // Y_2 depends on nothing downstream of A.
    auto& y = m.variables[static_cast<std::size_t>(m.outcome_index(2))];
    std::erase_if(y.coefficients, [](const auto& c) { return c.first != "B1" && c.first != "B2"; });
    m.validate();
    const double ref = gformula_value(m, 2, 0, 0);
    for (int a = 0; a <= 1; ++a) {
        for (int s = 0; s <= 1; ++s) {
            EXPECT_NEAR(gformula_value(m, 2, a, s), ref, 1e-14);
            EXPECT_NEAR(ipw_population_value(m, 2, a, s), ref, 1e-12);
        }
    }
}

TEST(Sim, DegenerateTablesGiveConstantData) {
    StructuralModel m;
    m.name = "constant";
    m.n_times = 1;
    auto table = [](std::string name, Role role, int time, std::vector<double> p) {
        VariableSpec v;
        v.name = std::move(name);
        v.role = role;
        v.time = time;
        v.dist = Dist::Table;
        v.levels = static_cast<int>(p.size()) - 1;
        v.table[{}] = std::move(p);
        return v;
    };
    m.variables = {table("B", Role::Baseline, 0, {0, 1}), table("A", Role::Exposure, 0, {1, 0}),
                   table("M1", Role::Mediator, 1, {0, 0, 1}), table("Y1", Role::Outcome, 1, {0, 1})};
    m.validate();
    const auto ds = simulate(m, 50, 3);
    for (std::size_t i = 0; i < ds.n_subjects(); ++i) {
        EXPECT_EQ(ds.value(i, "B"), 1.0);
        EXPECT_EQ(ds.value(i, "A"), 0.0);
        EXPECT_EQ(ds.value(i, "M1"), 2.0);
        EXPECT_EQ(ds.value(i, "Y1"), 1.0);
    }
}

TEST(Sim, WeightedFrequenciesMatchOracle) {
    const auto m = preset_longitudinal_t2_binary();
    const std::size_t n = 200000;
    const auto ds = simulate(m, n, 42);
    const auto& ex = m.variables[static_cast<std::size_t>(m.exposure_index())];
    for (int a = 0; a <= 1; ++a) {
        double s = 0.0, s2 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            if (ds.value(i, "A") != a) continue;
            const double p1 = sigmoid(ex.intercepts[0] + ex.coefficients[0].second[0] * ds.value(i, "L0"));
            const double z = ds.value(i, "Y2") / (a ? p1 : 1.0 - p1);
            s += z;
            s2 += z * z;
        }
        const double mean = s / n;
        const double se = std::sqrt((s2 / n - mean * mean) / n);
        EXPECT_LT(std::abs(mean - gformula_value(m, 2, a, a)), 3.0 * se);
    }
}

TEST(Sim, SimulationIsSeedDeterministic) {
    const auto m = preset_longitudinal_t2_binary();
    const auto a = simulate(m, 300, 7);
    const auto b = simulate(m, 300, 7);
    const auto c = simulate(m, 300, 8);
    EXPECT_EQ(a.values(), b.values());
    EXPECT_NE(a.values(), c.values());
    EXPECT_EQ(a.column_names(), (std::vector<std::string>{"L0", "A", "L1", "M1", "Y1", "L2", "M2", "Y2"}));
}

TEST(Sim, JsonRoundTrip) {
    std::mt19937_64 rng(3);
    for (const auto& m : {preset_appendix3_single(), preset_longitudinal_t2_binary(),
                          lmed_test::random_discrete_model(rng, 2, 2)}) {
        const auto j = model_to_json(m);
        const auto back = model_from_json(j);
        EXPECT_EQ(model_to_json(back), j);
        for (int t = 1; t <= m.n_times; ++t) EXPECT_EQ(gformula_value(back, t, 1, 0), gformula_value(m, t, 1, 0));
    }
}

TEST(Sim, RejectsInvalidModels) {
    auto base = preset_longitudinal_t2_binary;
    EXPECT_EQ(code_of([&] {
                  auto m = base();
                  std::swap(m.variables[3], m.variables[4]);
                  m.validate();
              }),
              ErrorCode::InvalidModel);
    EXPECT_EQ(code_of([&] {
                  auto m = base();
                  m.variables[3].coefficients.emplace_back("Y2", std::vector<double>{0.1});
                  m.validate();
              }),
              ErrorCode::InvalidModel);
    EXPECT_EQ(code_of([&] {
                  auto m = base();
                  m.variables[1].coefficients.emplace_back("L1", std::vector<double>{0.1});
                  m.validate();
              }),
              ErrorCode::InvalidModel);
    EXPECT_EQ(code_of([&] {
                  auto m = base();
                  m.variables[2].coefficients.emplace_back("Z", std::vector<double>{0.1});
                  m.validate();
              }),
              ErrorCode::InvalidModel);
    EXPECT_EQ(code_of([&] {
                  std::mt19937_64 rng(1);
                  auto m = lmed_test::random_discrete_model(rng, 1, 1);
                  m.variables[0].table[{}] = {0.5, 0.4};
                  m.validate();
              }),
              ErrorCode::InvalidModel);
    EXPECT_EQ(code_of([&] { model_from_json(nlohmann::json::parse(R"({"name":"x","time_points":1,"variables":[]})")); }),
              ErrorCode::InvalidModel);
}

TEST(Sim, OracleLimits) {
    std::mt19937_64 rng(2);
    const auto m = lmed_test::random_discrete_model(rng, 3, 2);
    OracleOptions small;
    small.state_cap = 100;
    EXPECT_EQ(code_of([&] { gformula_value(m, 3, 1, 0, small); }), ErrorCode::StateSpaceTooLarge);
    EXPECT_EQ(code_of([&] { ipw_population_value(m, 3, 1, 0, small); }), ErrorCode::StateSpaceTooLarge);

    auto normal = preset_longitudinal_t2_binary();
    auto& l1 = normal.variables[2];
    l1.dist = Dist::Normal;
    l1.coefficients = {{"A", {0.5}}};
    l1.intercepts = {0.0};
    for (auto& v : normal.variables) {
        if (v.time >= 1 && v.name != "L1") std::erase_if(v.coefficients, [](const auto& c) { return c.first == "L1"; });
    }
    normal.validate();
    EXPECT_NO_THROW(simulate(normal, 10, 1));
    EXPECT_EQ(code_of([&] { gformula_value(normal, 1, 1, 0); }), ErrorCode::NonDiscrete);
    EXPECT_EQ(code_of([&] { gformula_value(preset_longitudinal_t2_binary(), 3, 1, 0); }), ErrorCode::InvalidModel);
}

TEST(Sim, PresetEffectsAreConsistent) {
    const auto m = preset_longitudinal_t2_binary();
    for (const auto& e : true_effects(m, all_times(m))) {
        EXPECT_NEAR(e.total_log, logit(e.probs[1][1]) - logit(e.probs[0][0]), 1e-14);
        EXPECT_GT(e.indirect_log, 0.0);
    }
}
