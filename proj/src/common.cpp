#include "fuseseg/common.hpp"

#include <cstdlib>
#include <mutex>

extern "C" void openblas_set_num_threads(int);

namespace fuseseg {

void fail(Err code, const std::string& msg) {
  throw Error(code, std::string(err_name(code)) + ": " + msg);
}

const char* err_name(Err code) {
  switch (code) {
    case Err::BadMagic: return "BadMagic";
    case Err::UnsupportedDatatype: return "UnsupportedDatatype";
    case Err::UnsupportedDim: return "UnsupportedDim";
    case Err::UnsupportedOrientation: return "UnsupportedOrientation";
    case Err::NonFiniteData: return "NonFiniteData";
    case Err::IoError: return "IoError";
    case Err::MissingFile: return "MissingFile";
    case Err::SchemaError: return "SchemaError";
    case Err::GridMismatch: return "GridMismatch";
    case Err::DegenerateAxis: return "DegenerateAxis";
    case Err::EmptyGland: return "EmptyGland";
    case Err::DegenerateStd: return "DegenerateStd";
    case Err::DegenerateVariance: return "DegenerateVariance";
    case Err::NoOverlap: return "NoOverlap";
    case Err::SingularTransform: return "SingularTransform";
    case Err::ShapeMismatch: return "ShapeMismatch";
    case Err::InvalidConfig: return "InvalidConfig";
    case Err::VersionMismatch: return "VersionMismatch";
    case Err::EmptyVolume: return "EmptyVolume";
    case Err::NonFiniteLoss: return "NonFiniteLoss";
    case Err::NonPositiveVolume: return "NonPositiveVolume";
    case Err::DegenerateClasses: return "DegenerateClasses";
    case Err::TooFewSamples: return "TooFewSamples";
    case Err::EmptyCohort: return "EmptyCohort";
    case Err::NotAPhantom: return "NotAPhantom";
  }
  return "UnknownError";
}

bool is_validation_error(Err code) {
  switch (code) {
    case Err::BadMagic:
    case Err::UnsupportedDatatype:
    case Err::UnsupportedDim:
    case Err::UnsupportedOrientation:
    case Err::MissingFile:
    case Err::SchemaError:
    case Err::InvalidConfig:
    case Err::VersionMismatch:
      return true;
    default:
      return false;
  }
}

namespace {
std::once_flag g_env_once;
int g_blas_threads = 1;

// OpenBLAS mis-detects some virtualized CPUs and falls back to a slow
// generic kernel. Its detection runs in a library constructor, so the
// matching tuned target has to be requested before that: priority 101 runs
// ahead of default-priority constructors (OpenBLAS is linked statically).
__attribute__((constructor(101))) void force_blas_core_type() {
  if (std::getenv("OPENBLAS_CORETYPE") != nullptr) return;
#if defined(__x86_64__)
  __builtin_cpu_init();
  if (__builtin_cpu_supports("avx512f")) {
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 0);
  } else if (__builtin_cpu_supports("avx2")) {
    setenv("OPENBLAS_CORETYPE", "HASWELL", 0);
  }
#endif
}

}  // namespace

void init_compute_env() {
  std::call_once(g_env_once, [] { openblas_set_num_threads(g_blas_threads); });
}

void set_blas_threads(int n) {
  if (n < 1) n = 1;
  g_blas_threads = n;
  init_compute_env();
  openblas_set_num_threads(n);
}

int blas_threads() { return g_blas_threads; }

namespace {
int g_compute_threads = 1;
}

void set_compute_threads(int n) { g_compute_threads = n < 1 ? 1 : n; }

int compute_threads() { return g_compute_threads; }

}  // namespace fuseseg
