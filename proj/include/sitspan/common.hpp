#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace sitspan {

// Error codes shared across modules. The CLI maps categories to exit codes.
enum class ErrorCode {
  EmptyBatch,
  ShapeMismatch,
  DegenerateStats,
  EmptyLayout,
  IndexError,
  FormatError,
  InvalidFold,
  EmptyTrainingSet,
  ShapeError,
  DegenerateSequence,
  SizeError,
  ThresholdError,
  EmptyEvaluation,
  IncompatibleCheckpoint,
  UnknownAblation,
  ConfigError,
  Divergence,
  Internal,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::EmptyBatch: return "EmptyBatch";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DegenerateStats: return "DegenerateStats";
    case ErrorCode::EmptyLayout: return "EmptyLayout";
    case ErrorCode::IndexError: return "IndexError";
    case ErrorCode::FormatError: return "FormatError";
    case ErrorCode::InvalidFold: return "InvalidFold";
    case ErrorCode::EmptyTrainingSet: return "EmptyTrainingSet";
    case ErrorCode::ShapeError: return "ShapeError";
    case ErrorCode::DegenerateSequence: return "DegenerateSequence";
    case ErrorCode::SizeError: return "SizeError";
    case ErrorCode::ThresholdError: return "ThresholdError";
    case ErrorCode::EmptyEvaluation: return "EmptyEvaluation";
    case ErrorCode::IncompatibleCheckpoint: return "IncompatibleCheckpoint";
    case ErrorCode::UnknownAblation: return "UnknownAblation";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::Divergence: return "Divergence";
    case ErrorCode::Internal: return "Internal";
  }
  return "Unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(error_code_name(code)) + ": " + what),
        code_(code) {}
  ErrorCode code() const { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void check(bool ok, ErrorCode code, const std::string& what) {
  if (!ok) fail(code, what);
}

// Deterministic RNG. std::mt19937 distributions are implementation-defined,
// so all sampling goes through this splitmix64-based generator to keep
// datasets and weight initialization byte-identical across platforms.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {}

  uint64_t next_u64() {
    uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // uniform in [0, 1)
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // uniform integer in [0, n)
  int64_t uniform_int(int64_t n) {
    return int64_t((static_cast<unsigned __int128>(next_u64()) *
                    static_cast<unsigned __int128>(n)) >>
                   64);
  }

  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    double u1 = 0.0, u2 = 0.0;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    have_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  int poisson(double lambda) {
    if (lambda <= 0.0) return 0;
    if (lambda < 30.0) {
      double l = std::exp(-lambda), p = 1.0;
      int k = 0;
      do {
        ++k;
        p *= uniform();
      } while (p > l);
      return k - 1;
    }
    // normal approximation for large rates
    int v = int(std::lround(normal(lambda, std::sqrt(lambda))));
    return v < 0 ? 0 : v;
  }

  // Derive an independent stream; used to give each sample its own RNG.
  Rng fork(uint64_t stream) const {
    Rng r(state_ ^ (0x632be59bd9b4e019ull + stream * 0x9e3779b97f4a7c15ull));
    r.next_u64();
    return r;
  }

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

// FNV-1a, used for config hashes in checkpoints.
inline uint64_t fnv1a64(const std::string& s) {
  uint64_t h = 1469598103934665603ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string hex64(uint64_t v);

}  // namespace sitspan
