#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace graphkd {

enum class ErrorCode {
    MissingFile,
    ShapeMismatch,
    BadLabel,
    DanglingEdge,
    InsufficientClassSupport,
    InvalidNode,
    NonFiniteInput,
    MissingTeacherProbs,
    MissingRationaleTarget,
    DimMismatch,
    BadWeights,
    StaleCache,
    Diverged,
    EmptyText,
    InvalidTemplate,
    TeacherUnavailable,
    TeacherResponseInvalid,
    BudgetExhausted,
    DimTooSmall,
    EmptyPool,
    IsolatedNode,
    NoCandidates,
    UnlabeledNode,
    InvalidConfig,
    Io,
};

constexpr std::string_view to_string(ErrorCode code) {
    switch (code) {
        case ErrorCode::MissingFile: return "MissingFile";
        case ErrorCode::ShapeMismatch: return "ShapeMismatch";
        case ErrorCode::BadLabel: return "BadLabel";
        case ErrorCode::DanglingEdge: return "DanglingEdge";
        case ErrorCode::InsufficientClassSupport: return "InsufficientClassSupport";
        case ErrorCode::InvalidNode: return "InvalidNode";
        case ErrorCode::NonFiniteInput: return "NonFiniteInput";
        case ErrorCode::MissingTeacherProbs: return "MissingTeacherProbs";
        case ErrorCode::MissingRationaleTarget: return "MissingRationaleTarget";
        case ErrorCode::DimMismatch: return "DimMismatch";
        case ErrorCode::BadWeights: return "BadWeights";
        case ErrorCode::StaleCache: return "StaleCache";
        case ErrorCode::Diverged: return "Diverged";
        case ErrorCode::EmptyText: return "EmptyText";
        case ErrorCode::InvalidTemplate: return "InvalidTemplate";
        case ErrorCode::TeacherUnavailable: return "TeacherUnavailable";
        case ErrorCode::TeacherResponseInvalid: return "TeacherResponseInvalid";
        case ErrorCode::BudgetExhausted: return "BudgetExhausted";
        case ErrorCode::DimTooSmall: return "DimTooSmall";
        case ErrorCode::EmptyPool: return "EmptyPool";
        case ErrorCode::IsolatedNode: return "IsolatedNode";
        case ErrorCode::NoCandidates: return "NoCandidates";
        case ErrorCode::UnlabeledNode: return "UnlabeledNode";
        case ErrorCode::InvalidConfig: return "InvalidConfig";
        case ErrorCode::Io: return "Io";
    }
    return "Unknown";
}

/// All library failures are reported through this exception type; `code()`
/// identifies the contract that was violated.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& what)
        : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

    ErrorCode code() const noexcept { return code_; }

private:
    ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) { throw Error(code, what); }

} // namespace graphkd
