#pragma once

#include <stdexcept>
#include <string>

namespace msdet {

// Precondition violations surface as std::invalid_argument. The types below
// cover the remaining failure classes callers need to tell apart.

class GenerationFailure : public std::runtime_error {
public:
    GenerationFailure(std::size_t image_index, const std::string& what)
        : std::runtime_error("generation failed for image " + std::to_string(image_index) + ": " + what),
          image_index_(image_index) {}
    std::size_t image_index() const { return image_index_; }

private:
    std::size_t image_index_;
};

class EmptyBatchError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class DegenerateFitError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ParseError : public std::runtime_error {
public:
    ParseError(int line, const std::string& what)
        : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
    int line() const { return line_; }

private:
    int line_;
};

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace msdet
