#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// All library failures derive from Error so callers can map them to exit
// categories in one place.
class Error : public std::runtime_error {
public:
    Error(std::string category, const std::string& msg)
        : std::runtime_error(msg), category_(std::move(category)) {}
    const std::string& category() const { return category_; }

private:
    std::string category_;
};

// Tensor/operator dimension mismatches.
class ShapeError : public Error {
public:
    explicit ShapeError(const std::string& msg) : Error("shape", msg) {}
};

// Violated API precondition (non-scalar loss, missing gradient, bad label...).
class ContractError : public Error {
public:
    explicit ContractError(const std::string& msg) : Error("contract", msg) {}
};

// Invalid or out-of-range configuration.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& msg) : Error("config", msg) {}
};

// Malformed input file (WAV container, cache, checkpoint...).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& msg) : Error("format", msg) {}
};

// Valid container but an encoding we do not handle.
class UnsupportedError : public Error {
public:
    explicit UnsupportedError(const std::string& msg) : Error("unsupported", msg) {}
};

// Episode sampling cannot satisfy the requested C/K/Q.
class SamplingError : public Error {
public:
    explicit SamplingError(const std::string& msg) : Error("sampling", msg) {}
};

// Dataset assembly failures (missing files, empty manifest...).
class IngestionError : public Error {
public:
    explicit IngestionError(const std::string& msg) : Error("ingestion", msg) {}
};

} // namespace fewshot
