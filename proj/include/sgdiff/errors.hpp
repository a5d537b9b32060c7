#pragma once

#include <stdexcept>
#include <string>

namespace sgdiff {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct SchemaError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};
struct UnknownClassError : Error {
    using Error::Error;
};
struct EmptyInputError : Error {
    using Error::Error;
};
struct ShapeError : Error {
    using Error::Error;
};
struct DimensionMismatchError : Error {
    using Error::Error;
};
struct LengthMismatchError : Error {
    using Error::Error;
};
struct EmptyLayoutError : Error {
    using Error::Error;
};
struct EmptyRoiError : Error {
    using Error::Error;
};
struct MissingInputError : Error {
    using Error::Error;
};
struct ConfigError : Error {
    using Error::Error;
};
struct CheckpointMissingError : Error {
    using Error::Error;
};
struct DatasetEmptyError : Error {
    using Error::Error;
};
struct NonFiniteLossError : Error {
    using Error::Error;
};
struct StepUnderflowError : Error {
    using Error::Error;
};
struct NonDifferentiableEmbedderError : Error {
    using Error::Error;
};
struct EmbedderUnavailableError : Error {
    using Error::Error;
};
struct MissingImageError : Error {
    using Error::Error;
};

}  // namespace sgdiff
