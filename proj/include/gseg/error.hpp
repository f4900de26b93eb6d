#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace gseg {

/// Library-wide exception. `category()` is a stable machine-parsable token
/// (shape, value, config, data, io, checkpoint, train) that the CLI prints
/// as `error:<category>: <message>`.
class Error : public std::runtime_error {
 public:
  Error(std::string category, const std::string& message)
      : std::runtime_error(message), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

 private:
  std::string category_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};
struct ValueError : Error {
  explicit ValueError(const std::string& m) : Error("value", m) {}
};
struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};
struct DataError : Error {
  explicit DataError(const std::string& m) : Error("data", m) {}
};
struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};
struct CheckpointError : Error {
  explicit CheckpointError(const std::string& m) : Error("checkpoint", m) {}
};
struct TrainError : Error {
  explicit TrainError(const std::string& m) : Error("train", m) {}
};

}  // namespace gseg
