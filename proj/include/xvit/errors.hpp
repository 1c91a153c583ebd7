#pragma once

#include <stdexcept>
#include <string>

namespace xvit {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Incompatible extents between operands.
class ShapeError : public Error {
 public:
  using Error::Error;
};

class RankError : public Error {
 public:
  using Error::Error;
};

class AxisError : public Error {
 public:
  using Error::Error;
};

// NaN or otherwise unusable numeric input.
class NumericError : public Error {
 public:
  using Error::Error;
};

// Invalid hyperparameters (e.g. channels not divisible by heads).
class ConfigError : public Error {
 public:
  using Error::Error;
};

class TapeError : public Error {
 public:
  using Error::Error;
};

class LoadError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class DivergedError : public Error {
 public:
  DivergedError(int epoch, const std::string& what)
      : Error(what), epoch_(epoch) {}
  int epoch() const { return epoch_; }

 private:
  int epoch_;
};

}  // namespace xvit
