#pragma once

#include <stdexcept>
#include <string>

namespace fv2ic {

// Invalid or out-of-range configuration. `field` is the dotted key path
// ("dataset.labeled_ratio") so callers can report exactly what to fix.
class ConfigError : public std::runtime_error {
 public:
  ConfigError(std::string field, const std::string& what)
      : std::runtime_error("config: " + field + ": " + what),
        field_(std::move(field)) {}
  const std::string& field() const { return field_; }

 private:
  std::string field_;
};

// A federation-protocol contract was broken (manifest mismatch, a client
// asked to do something its dataset cannot support, ...).
class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what)
      : std::runtime_error("protocol: " + what) {}
};

// Non-finite values appeared in a forward/backward pass. Carries the name
// of the layer (or loss) that produced them.
class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(std::string where)
      : std::runtime_error("numeric fault in " + where), where_(std::move(where)) {}
  const std::string& where() const { return where_; }

 private:
  std::string where_;
};

// Caller violated a function precondition (shape mismatch, bad class id).
class ContractViolation : public std::logic_error {
 public:
  explicit ContractViolation(const std::string& what)
      : std::logic_error("contract: " + what) {}
};

}  // namespace fv2ic
