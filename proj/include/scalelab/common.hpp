#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace scalelab {

// Base error; subclasses let the CLI map failures to exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class DataError : public Error {
 public:
  using Error::Error;
};

class NumericError : public Error {
 public:
  using Error::Error;
};

enum class Dtype { f32, f64 };

inline const char* dtype_name(Dtype dt) { return dt == Dtype::f32 ? "float32" : "float64"; }

inline Dtype dtype_from_name(const std::string& s) {
  if (s == "float32") return Dtype::f32;
  if (s == "float64") return Dtype::f64;
  throw ConfigError("unknown dtype: " + s);
}

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << ")";
  return os.str();
}

}  // namespace scalelab
