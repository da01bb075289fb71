#pragma once

// Built-in verification suites run by `cosynorm selftest`.

#include <cstdint>
#include <string>
#include <vector>

namespace cosynorm {

struct SuiteResult {
  std::string name;
  bool passed = false;
  double max_error = 0.0;
  double tolerance = 0.0;
  std::string detail;
};

/// Forward-backward CTC against exhaustive alignment enumeration on
/// `n_lattices` random lattices with T <= 6, V <= 4, |labels| <= 3.
SuiteResult ctc_oracle_suite(std::size_t n_lattices = 200, std::uint64_t seed = 1);

/// Central-difference checks in double precision of the encoder, decoder,
/// AdaLN block, CTC head, decoder CFM loss and duration loss at dims <= 8.
std::vector<SuiteResult> gradient_suite(std::uint64_t seed = 2);

/// <rope(q, p1), rope(k, p2)> == <rope(q, p1 + d), rope(k, p2 + d)> for head
/// dims {2, 4, 8, 16} and `n_draws` random draws each.
SuiteResult rope_suite(std::size_t n_draws = 100, std::uint64_t seed = 3);

}  // namespace cosynorm
