#pragma once

#include <cstddef>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

// Debug checks (NaN guards, measurement-consistency assertions, ledger walks)
// are compiled into test builds via REVCS_DEBUG_CHECKS; release tools skip them.
#if defined(REVCS_DEBUG_CHECKS)
#define REVCS_CHECKS_ENABLED 1
#else
#define REVCS_CHECKS_ENABLED 0
#endif

namespace revcs {

enum class Errc {
  shape_mismatch,
  bad_argument,
  non_finite,
  consistency,
  io_error,
  parse_error,
  out_of_scope,
};

inline const char* errc_name(Errc c) {
  switch (c) {
    case Errc::shape_mismatch: return "shape_mismatch";
    case Errc::bad_argument: return "bad_argument";
    case Errc::non_finite: return "non_finite";
    case Errc::consistency: return "consistency";
    case Errc::io_error: return "io_error";
    case Errc::parse_error: return "parse_error";
    case Errc::out_of_scope: return "out_of_scope";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& msg)
      : std::runtime_error(std::string(errc_name(code)) + ": " + msg), code_(code) {}
  Errc code() const { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& msg) { throw Error(code, msg); }

inline void require(bool ok, Errc code, const std::string& msg) {
  if (!ok) fail(code, msg);
}

using Shape = std::vector<int64_t>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline bool same_shape(const Shape& a, const Shape& b) { return a == b; }

}  // namespace revcs
