#pragma once

#include <cstdint>
#include <initializer_list>
#include <limits>
#include <random>
#include <stdexcept>
#include <string>

namespace ilm {

using TokenId = std::int32_t;
using Rng = std::mt19937_64;

// Error classes map onto distinct CLI exit codes (see tools/ilm_cli.cpp).
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

class ValidationError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class DegenerateExampleError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

class UnknownTokenError : public ValidationError {
 public:
  UnknownTokenError(const std::string& token, const std::string& where)
      : ValidationError("unknown token '" + token + "'" + (where.empty() ? "" : " at " + where)),
        token_(token) {}
  const std::string& token() const { return token_; }

 private:
  std::string token_;
};

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

/// Mixes a base seed with a path of indices (step, example, ...) so that every
/// stochastic decision is a pure function of its coordinates.
inline std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = splitmix64(base);
  for (std::uint64_t p : path) {
    h = splitmix64(h ^ splitmix64(p + 0x51ED27ull));
  }
  return h;
}

/// Uniform double in [0, 1) with 53 random bits; independent of the standard
/// library's distribution implementation.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  if (n == 0) {
    throw std::invalid_argument("uniform_index: empty range");
  }
  const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
  std::uint64_t r = 0;
  do {
    r = rng();
  } while (r >= limit);
  return r % n;
}

}  // namespace ilm
