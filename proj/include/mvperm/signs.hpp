#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvperm {

/// Where sign assignments come from: all 2^N of them, or B iid uniform
/// draws from a seeded generator.
struct PermutationPlan {
  enum class Mode { Exhaustive, Random };

  static constexpr std::size_t kDefaultDraws = 2400;
  static constexpr std::size_t kDefaultExhaustiveCap = std::size_t{1} << 20;
  static constexpr std::size_t kMinDraws = 100;

  Mode mode = Mode::Random;
  std::size_t draws = kDefaultDraws;
  std::uint64_t seed = 20240101;
  std::size_t exhaustive_cap = kDefaultExhaustiveCap;

  static PermutationPlan exhaustive(std::size_t cap = kDefaultExhaustiveCap) {
    PermutationPlan p;
    p.mode = Mode::Exhaustive;
    p.draws = 0;
    p.exhaustive_cap = cap;
    return p;
  }

  static PermutationPlan random(std::size_t draws, std::uint64_t seed) {
    PermutationPlan p;
    p.mode = Mode::Random;
    p.draws = draws;
    p.seed = seed;
    return p;
  }

  /// Number of assignments for N studies; throws when the plan is invalid.
  std::size_t size(std::size_t n_studies) const {
    if (mode == Mode::Exhaustive) {
      if (n_studies >= 63 || (std::size_t{1} << n_studies) > exhaustive_cap) {
        throw std::invalid_argument("exhaustive enumeration of 2^" + std::to_string(n_studies) +
                                    " sign assignments exceeds the cap");
      }
      return std::size_t{1} << n_studies;
    }
    if (draws < kMinDraws) {
      throw std::invalid_argument("random permutation plans need at least " +
                                  std::to_string(kMinDraws) + " draws");
    }
    return draws;
  }
};

/// Row-major B x N matrix of +1/-1 entries.
class SignAssignments {
 public:
  SignAssignments(std::size_t rows, std::size_t n) : rows_(rows), n_(n), v_(rows * n, 1) {}

  std::size_t size() const noexcept { return rows_; }
  std::size_t studies() const noexcept { return n_; }
  std::span<const std::int8_t> row(std::size_t b) const { return {v_.data() + b * n_, n_}; }
  std::span<std::int8_t> row(std::size_t b) { return {v_.data() + b * n_, n_}; }

  bool is_identity(std::size_t b) const {
    for (auto s : row(b))
      if (s != 1) return false;
    return true;
  }

 private:
  std::size_t rows_;
  std::size_t n_;
  std::vector<std::int8_t> v_;
};

/// Exhaustive: assignment b has V_i = -1 exactly when bit i of b is set, so
/// b = 0 is the identity. Random: each row takes ceil(N/64) words from a
/// std::mt19937_64 seeded with plan.seed; bit i decides V_i.
inline SignAssignments generate_signs(const PermutationPlan& plan, std::size_t n_studies) {
  const std::size_t rows = plan.size(n_studies);
  SignAssignments out(rows, n_studies);
  if (plan.mode == PermutationPlan::Mode::Exhaustive) {
    for (std::size_t b = 0; b < rows; ++b) {
      auto r = out.row(b);
      for (std::size_t i = 0; i < n_studies; ++i) r[i] = ((b >> i) & 1u) ? -1 : 1;
    }
    return out;
  }
  std::mt19937_64 gen(plan.seed);
  for (std::size_t b = 0; b < rows; ++b) {
    auto r = out.row(b);
    std::uint64_t word = 0;
    for (std::size_t i = 0; i < n_studies; ++i) {
      if (i % 64 == 0) word = gen();
      r[i] = ((word >> (i % 64)) & 1u) ? -1 : 1;
    }
  }
  return out;
}

}  // namespace mvperm
