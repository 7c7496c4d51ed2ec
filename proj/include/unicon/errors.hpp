#pragma once

#include <stdexcept>
#include <string>

namespace unicon {

// Base of every error raised by the engine. The CLI maps subclasses to exit
// codes, so each failure family gets its own type.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error { using Error::Error; };
class ContractError : public Error { using Error::Error; };
class NumericError : public Error { using Error::Error; };
class ConfigError : public Error { using Error::Error; };
class ResolutionError : public Error { using Error::Error; };
class CompositionError : public Error { using Error::Error; };
class LookupError : public Error { using Error::Error; };
class RoutingError : public Error { using Error::Error; };
class ConflictError : public Error { using Error::Error; };
class GenerationError : public Error { using Error::Error; };
class DegenerateCohortError : public Error { using Error::Error; };
class OwnershipError : public Error { using Error::Error; };
class FormatError : public Error { using Error::Error; };
class IncompatibilityError : public Error { using Error::Error; };
class AuditConfigError : public Error { using Error::Error; };

// Pretraining did not reach its accuracy threshold.
class TrainingFailure : public Error {
public:
    TrainingFailure(const std::string& what, double final_accuracy)
        : Error(what), final_accuracy_(final_accuracy) {}
    double final_accuracy() const noexcept { return final_accuracy_; }

private:
    double final_accuracy_;
};

// A validation metric or loss became non-finite during adaptation.
class DivergenceError : public Error { using Error::Error; };

// An earlier route's probe outputs changed, or its stored artifacts are unreadable.
class AuditFailure : public Error { using Error::Error; };

}  // namespace unicon
