#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace fuseseg {

// Error codes shared across the toolkit. Each public operation documents
// which of these it can raise.
enum class Err {
  BadMagic,
  UnsupportedDatatype,
  UnsupportedDim,
  UnsupportedOrientation,
  NonFiniteData,
  IoError,
  MissingFile,
  SchemaError,
  GridMismatch,
  DegenerateAxis,
  EmptyGland,
  DegenerateStd,
  DegenerateVariance,
  NoOverlap,
  SingularTransform,
  ShapeMismatch,
  InvalidConfig,
  VersionMismatch,
  EmptyVolume,
  NonFiniteLoss,
  NonPositiveVolume,
  DegenerateClasses,
  TooFewSamples,
  EmptyCohort,
  NotAPhantom,
};

class Error : public std::runtime_error {
 public:
  Error(Err code, const std::string& what) : std::runtime_error(what), code_(code) {}
  Err code() const { return code_; }

 private:
  Err code_;
};

[[noreturn]] void fail(Err code, const std::string& msg);

const char* err_name(Err code);

// Validation errors are caller mistakes (bad config, malformed input files);
// everything else is a runtime failure. The CLI maps the former to exit
// code 1 and the latter to 2.
bool is_validation_error(Err code);

// Prepares the BLAS backend: picks a tuned OpenBLAS kernel when the runtime
// CPU detection falls back to a generic target, and pins the thread count.
// Idempotent; called lazily by the tensor ops and eagerly by every binary.
void init_compute_env();

// Fixed BLAS thread count. Results are reproducible for a given value;
// byte-for-byte determinism guarantees are stated for n == 1.
void set_blas_threads(int n);
int blas_threads();

// Worker threads for the tensor ops. Work is partitioned by batch sample
// with per-sample partial results reduced in a fixed order, so outputs are
// bitwise identical for every thread count.
void set_compute_threads(int n);
int compute_threads();

}  // namespace fuseseg
