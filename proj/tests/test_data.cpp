#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include <gtest/gtest.h>

#include "lmed/data.hpp"

using namespace lmed;

namespace {

std::filesystem::path tmp_file(const std::string& name, const std::string& body) {
    const auto dir = std::filesystem::temp_directory_path() / "lmed_test_data";
    std::filesystem::create_directories(dir);
    const auto p = dir / name;
    std::ofstream(p) << body;
    return p;
}

VariableSchema one_time_schema() {
    VariableSchema s;
    s.baseline = {"L0"};
    s.exposure = "A";
    TimePoint tp;
    tp.code = 1;
    tp.mediator = "M1";
    tp.outcome = "Y1";
    s.times = {tp};
    return s;
}

ErrorCode load_error(const std::string& csv, const VariableSchema& s) {
    try {
        load_dataset(tmp_file("bad.csv", csv).string(), s);
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an error";
    return ErrorCode::InvalidConfig;
}

} // namespace

TEST(Data, LoadsFourRowCsv) {
    const auto p = tmp_file("ok.csv", "id,A,L0,M1,Y1\n1,0,1,0,1\n2,1,0,1,0\n3,1,1,1,1\n4,0,0,0,0\n");
    const auto ds = load_dataset(p.string(), one_time_schema());
    EXPECT_EQ(ds.n_subjects(), 4u);
    EXPECT_EQ(ds.ids(), (std::vector<long long>{1, 2, 3, 4}));
    EXPECT_EQ(ds.value(1, "A"), 1.0);
    EXPECT_EQ(ds.mediator_levels(0), 1);
}

TEST(Data, RejectsNonBinaryExposure) {
    EXPECT_EQ(load_error("id,A,L0,M1,Y1\n1,2,1,0,1\n2,1,0,1,0\n3,0,1,1,1\n", one_time_schema()), ErrorCode::NonBinaryExposure);
}

TEST(Data, RejectsMissingColumn) {
    EXPECT_EQ(load_error("id,A,M1,Y1\n1,0,0,1\n", one_time_schema()), ErrorCode::MissingColumn);
}

TEST(Data, RejectsMissingCell) {
    EXPECT_EQ(load_error("id,A,L0,M1,Y1\n1,0,NA,0,1\n2,1,0,1,0\n", one_time_schema()), ErrorCode::MissingValue);
}

TEST(Data, StrictLevelsFlagGapInDeclaredLevels) {
    auto s = one_time_schema();
    s.times[0].mediator_levels = 3;
    const std::string csv = "id,A,L0,M1,Y1\n1,0,1,0,1\n2,1,0,1,0\n3,1,1,3,1\n4,0,0,0,0\n5,1,0,3,1\n6,0,1,1,0\n";
    EXPECT_EQ(load_error(csv, s), ErrorCode::OutOfRangeCategory);
    s.strict_levels = false;
    const auto ds = load_dataset(tmp_file("lenient.csv", csv).string(), s);
    EXPECT_EQ(ds.mediator_levels(0), 3);
}

TEST(Data, LenientLevelsInferMaxObserved) {
    auto s = one_time_schema();
    s.strict_levels = false;
    const auto ds = load_dataset(tmp_file("len2.csv", "id,A,L0,M1,Y1\n1,0,1,0,1\n2,1,0,2,0\n3,1,1,1,1\n4,0,0,0,0\n").string(), s);
    EXPECT_EQ(ds.mediator_levels(0), 2);
}

TEST(Data, ValidateNamesNanCell) {
    Eigen::MatrixXd v(3, 4);
    v << 0, 1, 0, 1, 1, 0, 1, 0, 1, std::nan(""), 0, 1;
    const auto ds = LongDataset::from_columns(one_time_schema(), {"A", "L0", "M1", "Y1"}, v);
    const auto rep = validate(ds);
    ASSERT_TRUE(rep.has(ErrorCode::MissingValue));
    for (const auto& i : rep.issues) {
        if (i.code == ErrorCode::MissingValue) {
            EXPECT_EQ(i.column, "L0");
            ASSERT_TRUE(i.row.has_value());
            EXPECT_EQ(*i.row, 2u);
        }
    }
}

TEST(Data, ValidEmptyReport) {
    Eigen::MatrixXd v(4, 4);
    v << 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 0, 0, 0, 0;
    const auto ds = LongDataset::from_columns(one_time_schema(), {"A", "L0", "M1", "Y1"}, v);
    EXPECT_TRUE(validate(ds).empty());
}

TEST(Data, DegenerateExposureFlagsPositivity) {
    Eigen::MatrixXd v(4, 4);
    v << 1, 1, 0, 1, 1, 0, 1, 0, 1, 1, 1, 1, 1, 0, 0, 0;
    const auto ds = LongDataset::from_columns(one_time_schema(), {"A", "L0", "M1", "Y1"}, v);
    EXPECT_TRUE(validate(ds).has(ErrorCode::PositivityViolation));
}

TEST(Data, SingleExposureStratumFlagsPositivity) {
    Eigen::MatrixXd v(4, 4);
    // L0 = 1 only ever has A = 1.
    v << 1, 1, 0, 1, 1, 1, 1, 0, 0, 0, 1, 1, 1, 0, 0, 0;
    const auto ds = LongDataset::from_columns(one_time_schema(), {"A", "L0", "M1", "Y1"}, v);
    EXPECT_TRUE(validate(ds).has(ErrorCode::PositivityViolation));
}

TEST(Data, SchemaRejectsNonIncreasingTimes) {
    auto s = one_time_schema();
    s.times.push_back(s.times[0]);
    s.times[1].mediator = "M2";
    s.times[1].outcome = "Y2";
    EXPECT_THROW(s.check(), Error);
}

TEST(Data, EndOfStudyOnlyLastOutcome) {
    auto s = one_time_schema();
    s.outcome_mode = OutcomeMode::EndOfStudy;
    TimePoint t2;
    t2.code = 2;
    t2.mediator = "M2";
    t2.outcome = "Y2";
    s.times.push_back(t2);
    EXPECT_THROW(s.check(), Error);
    s.times[0].outcome.reset();
    EXPECT_NO_THROW(s.check());
}

TEST(Data, SchemaJsonRoundTrip) {
    auto s = one_time_schema();
    s.times[0].mediator_levels = 2;
    s.times[0].confounders = {"L1a", "L1b"};
    const auto back = schema_from_json(schema_to_json(s));
    EXPECT_EQ(schema_to_json(back), schema_to_json(s));
}

TEST(Data, CsvRoundTripIsBitIdentical) {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> nd(0.0, 1e3);
    std::bernoulli_distribution bd(0.5);
    VariableSchema s = one_time_schema();
    const int n = 200;
    Eigen::MatrixXd v(n, 4);
    for (int i = 0; i < n; ++i) {
        v(i, 0) = i % 2;
        v(i, 1) = nd(rng) * std::pow(10.0, static_cast<double>(i % 9) - 4.0);
        v(i, 2) = i % 2 == 0 ? (bd(rng) ? 1 : 0) : 1 - (i / 2) % 2;
        v(i, 3) = bd(rng);
    }
    v(0, 2) = 0;
    v(1, 2) = 1;
    const auto ds = LongDataset::from_columns(s, {"A", "L0", "M1", "Y1"}, v);
    const auto p1 = std::filesystem::temp_directory_path() / "lmed_test_data" / "rt1.csv";
    const auto p2 = std::filesystem::temp_directory_path() / "lmed_test_data" / "rt2.csv";
    std::filesystem::create_directories(p1.parent_path());
    export_dataset(ds, p1.string());
    const auto back = load_dataset(p1.string(), s);
    ASSERT_EQ(back.n_subjects(), ds.n_subjects());
    for (const auto& c : std::vector<std::string>{"A", "L0", "M1", "Y1"}) {
        for (std::size_t i = 0; i < ds.n_subjects(); ++i) EXPECT_EQ(back.value(i, c), ds.value(i, c));
    }
    export_dataset(back, p2.string());
    std::ifstream a(p1), b(p2);
    std::stringstream sa, sb;
    sa << a.rdbuf();
    sb << b.rdbuf();
    EXPECT_EQ(sa.str(), sb.str());
}

TEST(Data, ParseNumberMissingTokens) {
    for (const char* tok : {"", "NA", "NaN", "nan", "."}) EXPECT_FALSE(detail::parse_number(tok).has_value()) << tok;
    EXPECT_EQ(detail::parse_number("2.5").value_or(0.0), 2.5);
    EXPECT_EQ(detail::parse_number("+1e-3").value_or(0.0), 1e-3);
    EXPECT_FALSE(detail::parse_number("2.5x").has_value());
}
