#pragma once

#include <stdexcept>
#include <string>

namespace alst {

// Error taxonomy shared by the library and the CLI. The CLI maps these to
// exit codes: config_error -> 2, data_error -> 3, numeric_error -> 4.

// Invalid configuration, bad hyperparameters, contract violations at setup.
struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape / dimension mismatches.
struct shape_error : config_error {
    explicit shape_error(const std::string& msg) : config_error(msg) {}
};

// Missing or malformed files, manifests, vocabularies, out-of-range ids.
struct data_error : std::runtime_error {
    explicit data_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct index_error : data_error {
    explicit index_error(const std::string& msg) : data_error(msg) {}
};

// Non-finite losses, invalid masks, numerically impossible requests.
struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

// Misuse of the autodiff tape (e.g. backward called twice).
struct autodiff_error : std::logic_error {
    explicit autodiff_error(const std::string& msg) : std::logic_error(msg) {}
};

}  // namespace alst
