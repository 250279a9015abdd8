#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace branchkit {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// Operation is not available for the given model (e.g. no finite projection).
class Unsupported : public Error {
public:
    using Error::Error;
};

/// Exact enumeration would exceed its configured budget.
class BudgetExceeded : public Error {
public:
    using Error::Error;
};

class PopulationExceededCap : public Error {
public:
    PopulationExceededCap(std::size_t generation, std::size_t size, std::size_t cap)
        : Error("population exceeded cap " + std::to_string(cap) + " at generation " +
                std::to_string(generation) + " (size " + std::to_string(size) + ")"),
          generation_(generation), size_(size) {}

    std::size_t generation() const noexcept { return generation_; }
    std::size_t size() const noexcept { return size_; }

private:
    std::size_t generation_;
    std::size_t size_;
};

/// Every replicate of an experiment died out.
class ExtinctEverywhere : public Error {
public:
    using Error::Error;
};

}  // namespace branchkit
