#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace optregime {

inline constexpr const char* kVersion = "0.1.0";

// Sentinel code for an unrevealed test result ("?"). Distinct from every
// ordinary level code; serialized as the literal "?" in CSV files.
inline constexpr int kMissing = -1;

enum class ErrorCode {
  kUnreachableStratum,
  kHistoryNotRecoverable,
  kEmptyStratum,
  kZeroWeight,
  kUnknownStratum,
  kSingularSystem,
  kSingularGram,
  kDegenerateBasis,
  kFoldTooSmall,
  kUnsupportedQuery,
  kUsage,
  kIo,
};

inline const char* error_code_name(ErrorCode c) {
  switch (c) {
    case ErrorCode::kUnreachableStratum: return "UNREACHABLE_STRATUM";
    case ErrorCode::kHistoryNotRecoverable: return "HISTORY_NOT_RECOVERABLE";
    case ErrorCode::kEmptyStratum: return "EMPTY_STRATUM";
    case ErrorCode::kZeroWeight: return "ZERO_WEIGHT";
    case ErrorCode::kUnknownStratum: return "UNKNOWN_STRATUM";
    case ErrorCode::kSingularSystem: return "SINGULAR_SYSTEM";
    case ErrorCode::kSingularGram: return "SINGULAR_GRAM";
    case ErrorCode::kDegenerateBasis: return "DEGENERATE_BASIS";
    case ErrorCode::kFoldTooSmall: return "FOLD_TOO_SMALL";
    case ErrorCode::kUnsupportedQuery: return "UNSUPPORTED_QUERY";
    case ErrorCode::kUsage: return "USAGE";
    case ErrorCode::kIo: return "IO";
  }
  return "UNKNOWN";
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

// ---------------------------------------------------------------------------
// Counter-based RNG. Every variate stream is keyed by (seed, stream, counter)
// so draws are reproducible under any parallel schedule.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0x6a09e667f3bcc908ULL)) {}
  Rng(uint64_t seed, uint64_t stream, uint64_t counter)
      : state_(splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ counter)) {}

  uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    uint64_t x = state_;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  // uniform in (0,1); never exactly 0 or 1
  double uniform() {
    return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
  }

  bool bernoulli(double p) { return uniform() < p; }

  double normal() {
    // Box-Muller; one draw per call keeps the stream layout fixed
    double u1 = uniform();
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // uniform integer in [0, n)
  uint64_t below(uint64_t n) { return next_u64() % n; }

 private:
  uint64_t state_;
};

// ---------------------------------------------------------------------------
// Deterministic reductions
// ---------------------------------------------------------------------------

inline double kahan_sum(const std::vector<double>& v) {
  double s = 0.0, c = 0.0;
  for (double x : v) {
    double y = x - c;
    double t = s + y;
    c = (t - s) - y;
    s = t;
  }
  return s;
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  return kahan_sum(v) / static_cast<double>(v.size());
}

inline double sample_sd(const std::vector<double>& v) {
  if (v.size() < 2) return std::numeric_limits<double>::quiet_NaN();
  double m = mean(v);
  double ss = 0.0;
  for (double x : v) ss += (x - m) * (x - m);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double sample_var(const std::vector<double>& v) {
  double s = sample_sd(v);
  return s * s;
}

// lower empirical quantile: k-th smallest with k = ceil(alpha*n)
inline double quantile_lower(std::vector<double> v, double alpha) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::size_t k = static_cast<std::size_t>(std::ceil(alpha * static_cast<double>(v.size())));
  if (k == 0) k = 1;
  if (k > v.size()) k = v.size();
  std::nth_element(v.begin(), v.begin() + static_cast<std::ptrdiff_t>(k - 1), v.end());
  return v[k - 1];
}

// ---------------------------------------------------------------------------
// Dense symmetric linear algebra, row-major, sized for small systems.
// ---------------------------------------------------------------------------

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }
  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  double* row(std::size_t i) { return data_.data() + i * cols_; }
  const double* row(std::size_t i) const { return data_.data() + i * cols_; }

 private:
  std::size_t rows_ = 0, cols_ = 0;
  std::vector<double> data_;
};

struct SolveResult {
  std::vector<double> x;
  bool ridged = false;   // ridge fallback was applied
  double ridge = 0.0;
};

// Solves the symmetric system G x = b by Cholesky with optional ridge
// fallback lambda = 1e-8 * trace/dim when G is (near-)singular.
// allow_ridge=false throws SINGULAR instead.
inline SolveResult solve_sym(Matrix g, std::vector<double> b, bool allow_ridge,
                             ErrorCode singular_code = ErrorCode::kSingularGram) {
  const std::size_t d = g.rows();
  if (d == 0) return {{}, false, 0.0};
  double tr = 0.0;
  for (std::size_t i = 0; i < d; ++i) tr += g(i, i);
  double scale = tr > 0 ? tr / static_cast<double>(d) : 1.0;

  auto try_cholesky = [&](Matrix a, std::vector<double> rhs,
                          std::vector<double>* out) -> bool {
    // in-place LL^T
    for (std::size_t j = 0; j < d; ++j) {
      double diag = a(j, j);
      for (std::size_t k = 0; k < j; ++k) diag -= a(j, k) * a(j, k);
      if (!(diag > scale * 1e-13)) return false;
      diag = std::sqrt(diag);
      a(j, j) = diag;
      for (std::size_t i = j + 1; i < d; ++i) {
        double v = a(i, j);
        for (std::size_t k = 0; k < j; ++k) v -= a(i, k) * a(j, k);
        a(i, j) = v / diag;
      }
    }
    // forward/back substitution
    for (std::size_t i = 0; i < d; ++i) {
      double v = rhs[i];
      for (std::size_t k = 0; k < i; ++k) v -= a(i, k) * rhs[k];
      rhs[i] = v / a(i, i);
    }
    for (std::size_t ii = d; ii-- > 0;) {
      double v = rhs[ii];
      for (std::size_t k = ii + 1; k < d; ++k) v -= a(k, ii) * rhs[k];
      rhs[ii] = v / a(ii, ii);
    }
    *out = std::move(rhs);
    return true;
  };

  SolveResult res;
  if (try_cholesky(g, b, &res.x)) return res;
  if (!allow_ridge) throw Error(singular_code, "matrix not positive definite");
  double lambda = 1e-8 * scale;
  Matrix gr = g;
  for (std::size_t i = 0; i < d; ++i) gr(i, i) += lambda;
  if (!try_cholesky(gr, b, &res.x)) {
    // escalate the ridge a few times before giving up
    for (int k = 0; k < 6 && res.x.empty(); ++k) {
      lambda *= 100.0;
      gr = g;
      for (std::size_t i = 0; i < d; ++i) gr(i, i) += lambda;
      try_cholesky(gr, b, &res.x);
    }
    if (res.x.empty()) throw Error(singular_code, "ridge fallback failed");
  }
  res.ridged = true;
  res.ridge = lambda;
  return res;
}

// Solves a general square system by LU with partial pivoting.
inline std::vector<double> solve_lu(Matrix a, std::vector<double> b, ErrorCode singular_code) {
  const std::size_t d = a.rows();
  double scale = 0.0;
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = 0; j < d; ++j) scale = std::max(scale, std::fabs(a(i, j)));
  if (scale <= 0.0) throw Error(singular_code, "zero matrix");
  for (std::size_t c = 0; c < d; ++c) {
    std::size_t piv = c;
    for (std::size_t r = c + 1; r < d; ++r)
      if (std::fabs(a(r, c)) > std::fabs(a(piv, c))) piv = r;
    if (std::fabs(a(piv, c)) < scale * 1e-12) throw Error(singular_code, "singular system");
    if (piv != c) {
      for (std::size_t j = 0; j < d; ++j) std::swap(a(piv, j), a(c, j));
      std::swap(b[piv], b[c]);
    }
    for (std::size_t r = c + 1; r < d; ++r) {
      double f = a(r, c) / a(c, c);
      a(r, c) = 0.0;
      for (std::size_t j = c + 1; j < d; ++j) a(r, j) -= f * a(c, j);
      b[r] -= f * b[c];
    }
  }
  for (std::size_t ii = d; ii-- > 0;) {
    double v = b[ii];
    for (std::size_t j = ii + 1; j < d; ++j) v -= a(ii, j) * b[j];
    b[ii] = v / a(ii, ii);
  }
  return b;
}

// FNV-1a over a canonical string, for config hashes in reports
inline uint64_t fnv1a(const std::string& s) {
  uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace optregime
