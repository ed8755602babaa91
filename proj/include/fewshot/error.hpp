#pragma once

#include <stdexcept>
#include <string>

namespace fewshot {

// Base class for every error raised by the toolkit.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class InvalidWidth : public Error { public: using Error::Error; };
class InvalidClass : public Error { public: using Error::Error; };
class FormatError : public Error { public: using Error::Error; };
class ShapeError : public Error { public: using Error::Error; };
class ContractError : public Error { public: using Error::Error; };
class ConfigError : public Error { public: using Error::Error; };
class NumericError : public Error { public: using Error::Error; };
class InsufficientSamples : public Error { public: using Error::Error; };
class SearchSpaceTooLarge : public Error { public: using Error::Error; };
class DegenerateEpisode : public Error { public: using Error::Error; };

} // namespace fewshot
