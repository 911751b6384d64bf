#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace aaren {

enum class Errc {
  dimension_mismatch,
  empty_input,
  non_finite_input,
  invalid_block_size,
  invalid_config,
  unsupported_primitive,
  non_finite_gradient,
  diverged_loss,
  io_error,
  usage_error,
};

constexpr std::string_view errc_name(Errc code) noexcept {
  switch (code) {
    case Errc::dimension_mismatch: return "DimensionMismatch";
    case Errc::empty_input: return "EmptyInput";
    case Errc::non_finite_input: return "NonFiniteInput";
    case Errc::invalid_block_size: return "InvalidBlockSize";
    case Errc::invalid_config: return "InvalidConfig";
    case Errc::unsupported_primitive: return "UnsupportedPrimitive";
    case Errc::non_finite_gradient: return "NonFiniteGradient";
    case Errc::diverged_loss: return "DivergedLoss";
    case Errc::io_error: return "IoError";
    case Errc::usage_error: return "UsageError";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(errc_name(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

[[noreturn]] inline void fail(Errc code, const std::string& what) { throw Error(code, what); }

inline void require(bool condition, Errc code, const char* what) {
  if (!condition) fail(code, what);
}

}  // namespace aaren
