#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace lmed {

enum class ErrorCode {
    // input / schema
    MissingColumn,
    NonBinaryExposure,
    OutOfRangeCategory,
    MissingValue,
    InvalidSchema,
    InvalidConfig,
    InvalidModel,
    SchemaMismatch,
    WeightMissing,
    UnsortedClusters,
    MissingTerm,
    // numerical
    NotConverged,
    Separation,
    RankDeficient,
    EmptyCategory,
    PositivityViolation,
    DegenerateTotalEffect,
    NonPsdCovariance,
    StateSpaceTooLarge,
    NonDiscrete,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingColumn: return "MissingColumn";
    case ErrorCode::NonBinaryExposure: return "NonBinaryExposure";
    case ErrorCode::OutOfRangeCategory: return "OutOfRangeCategory";
    case ErrorCode::MissingValue: return "MissingValue";
    case ErrorCode::InvalidSchema: return "InvalidSchema";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    case ErrorCode::InvalidModel: return "InvalidModel";
    case ErrorCode::SchemaMismatch: return "SchemaMismatch";
    case ErrorCode::WeightMissing: return "WeightMissing";
    case ErrorCode::UnsortedClusters: return "UnsortedClusters";
    case ErrorCode::MissingTerm: return "MissingTerm";
    case ErrorCode::NotConverged: return "NotConverged";
    case ErrorCode::Separation: return "Separation";
    case ErrorCode::RankDeficient: return "RankDeficient";
    case ErrorCode::EmptyCategory: return "EmptyCategory";
    case ErrorCode::PositivityViolation: return "PositivityViolation";
    case ErrorCode::DegenerateTotalEffect: return "DegenerateTotalEffect";
    case ErrorCode::NonPsdCovariance: return "NonPsdCovariance";
    case ErrorCode::StateSpaceTooLarge: return "StateSpaceTooLarge";
    case ErrorCode::NonDiscrete: return "NonDiscrete";
    }
    return "Unknown";
}

// Input errors map to CLI exit code 2, everything else to 3.
inline bool is_input_error(ErrorCode code) {
    switch (code) {
    case ErrorCode::MissingColumn:
    case ErrorCode::NonBinaryExposure:
    case ErrorCode::OutOfRangeCategory:
    case ErrorCode::MissingValue:
    case ErrorCode::InvalidSchema:
    case ErrorCode::InvalidConfig:
    case ErrorCode::InvalidModel:
    case ErrorCode::SchemaMismatch:
    case ErrorCode::WeightMissing:
    case ErrorCode::UnsortedClusters:
    case ErrorCode::MissingTerm:
        return true;
    default:
        return false;
    }
}

class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message), code_(code), message_(message) {}

    ErrorCode code() const noexcept { return code_; }
    // Message without the code prefix.
    const std::string& message() const noexcept { return message_; }

private:
    ErrorCode code_;
    std::string message_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& message) {
    throw Error(code, message);
}

} // namespace lmed
