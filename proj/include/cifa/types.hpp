#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>

#include <Eigen/Dense>

namespace cifa {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

/// Respondents in rows, items in columns. Entries are 0-based category codes.
using ResponseMatrix =
    Eigen::Matrix<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Rng = std::mt19937_64;

/// Raised when an objective or estimate stops being finite.
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// SplitMix64 finalizer over (seed, stream). Every seeded component derives
/// its generator through this so streams never alias.
constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (stream + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

}  // namespace cifa
