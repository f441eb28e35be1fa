#pragma once

#include <stdexcept>
#include <string>

namespace reconalign {

/// Base class for all library errors. Callers that don't care about the
/// precise failure can catch this one type.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// core geometry
struct DepthNonPositive final : Error { using Error::Error; };
struct PixelOutOfBounds final : Error { using Error::Error; };
struct DegenerateGeometry final : Error { using Error::Error; };
struct InvalidTransform final : Error { using Error::Error; };

// matching
struct EmptyFeatureSet final : Error { using Error::Error; };
struct EmptyDescriptorList final : Error { using Error::Error; };
struct StageMismatch final : Error { using Error::Error; };
struct FlowFrameMismatch final : Error { using Error::Error; };

// alignment
struct UnknownFrame final : Error { using Error::Error; };
struct TooFewPoints final : Error { using Error::Error; };
struct DegenerateConfiguration final : Error { using Error::Error; };
struct InsufficientCorrespondences final : Error { using Error::Error; };
struct NodesDisconnected final : Error { using Error::Error; };
struct UnknownReference final : Error { using Error::Error; };

// transfer / evaluation
struct TooFewCommonKeypoints final : Error { using Error::Error; };
struct NoCommonKeypoints final : Error { using Error::Error; };
struct ThresholdGridMismatch final : Error { using Error::Error; };

// grounding
struct EmptyPointCloud final : Error { using Error::Error; };
struct MissingStrategyInput final : Error { using Error::Error; };
struct LabelOutOfRange final : Error { using Error::Error; };
struct EmptyTrainingSet final : Error { using Error::Error; };
struct UnknownModelId final : Error { using Error::Error; };

// datasets / configuration
struct ParseError final : Error { using Error::Error; };
struct InvariantViolation final : Error { using Error::Error; };
struct MissingFile final : Error { using Error::Error; };
struct InvalidConfig final : Error { using Error::Error; };

/// Misuse of an API that is not tied to a domain-specific failure mode
/// (mismatched list lengths and the like).
struct InvalidArgument final : Error { using Error::Error; };

}  // namespace reconalign
