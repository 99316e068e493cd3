#pragma once

#include <stdexcept>
#include <string>

namespace fedsim {

// Bad user input: infeasible constraints, malformed config, schema mismatch.
// CLI maps this to exit code 2.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Non-finite losses/gradients or diverging orbits. CLI maps this to exit code 3.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Versioned file with wrong magic/version or truncated payload.
struct SchemaError : ConfigError {
    explicit SchemaError(const std::string& msg) : ConfigError(msg) {}
};

}  // namespace fedsim
