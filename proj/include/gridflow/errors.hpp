#pragma once

#include <stdexcept>
#include <string>

namespace gridflow {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// case_io
struct MissingSection : Error { using Error::Error; };
struct MultipleSlack : Error { using Error::Error; };
struct DanglingBranch : Error { using Error::Error; };
struct MalformedNumber : Error { using Error::Error; };
struct SchemaMismatch : Error { using Error::Error; };
struct InvariantViolation : Error { using Error::Error; };

// network
struct ZeroImpedanceBranch : Error { using Error::Error; };

// acpf
struct DimensionMismatch : Error { using Error::Error; };
struct SingularJacobian : Error { using Error::Error; };
struct Diverged : Error { using Error::Error; };

// datagen
struct ExhaustedResampling : Error { using Error::Error; };
struct ExcessiveDivergence : Error { using Error::Error; };

// tensor_ad
struct ShapeMismatch : Error { using Error::Error; };
struct BackwardOnNonScalar : Error { using Error::Error; };
struct NonFiniteGradient : Error { using Error::Error; };

// seiter
struct ParamMismatch : Error { using Error::Error; };
struct MissingSlack : Error { using Error::Error; };
struct NonFiniteLoss : Error { using Error::Error; };
struct DataExhausted : Error { using Error::Error; };

// evalbench
struct EmptyGroup : Error { using Error::Error; };

}  // namespace gridflow
