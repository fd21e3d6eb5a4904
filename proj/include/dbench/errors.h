#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace dbench {

// Shape or dimensionality mismatch between operands.
struct DimensionError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Index outside a valid range (class targets, token ids, sites).
struct IndexError : std::out_of_range {
    using std::out_of_range::out_of_range;
};

// API misuse, e.g. calling backward on a non-scalar.
struct ContractError : std::logic_error {
    using std::logic_error::logic_error;
};

// Rank-deficient input to an orthonormalization.
struct DegeneracyError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Invalid user-supplied specification or configuration.
struct SpecError : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

// Training produced a non-finite loss.
struct DivergenceError : std::runtime_error {
    DivergenceError(const std::string& what, std::size_t step)
        : std::runtime_error(what + " (step " + std::to_string(step) + ")"), step(step) {}
    std::size_t step;
};

// An input file or upstream artifact is missing.
struct MissingArtifactError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Filtering left nothing to evaluate.
struct EmptyInstanceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace dbench
