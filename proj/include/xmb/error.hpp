#pragma once

#include <stdexcept>
#include <string>

namespace xmb {

// Root of every error the library raises. `kind()` gives a stable tag that
// the CLI maps onto exit codes.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define XMB_DEFINE_ERROR(Name, tag)                                   \
  class Name : public Error {                                         \
   public:                                                            \
    explicit Name(const std::string& what) : Error(tag, what) {}     \
  };

XMB_DEFINE_ERROR(DimensionError, "dimension")
XMB_DEFINE_ERROR(NumericError, "numeric")
XMB_DEFINE_ERROR(ContractError, "contract")
XMB_DEFINE_ERROR(ConfigError, "config")
XMB_DEFINE_ERROR(DataError, "data")
XMB_DEFINE_ERROR(IndexError, "index")
XMB_DEFINE_ERROR(TrainingError, "training")
XMB_DEFINE_ERROR(ParseError, "parse")
XMB_DEFINE_ERROR(ProvenanceError, "provenance")
XMB_DEFINE_ERROR(DegenerateError, "degenerate")
XMB_DEFINE_ERROR(PrerequisiteError, "prerequisite")
XMB_DEFINE_ERROR(InvariantError, "invariant")

#undef XMB_DEFINE_ERROR

}  // namespace xmb
