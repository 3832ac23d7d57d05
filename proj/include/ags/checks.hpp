#pragma once

// Verification suites: finite-difference gradient checks for every
// differentiable block, CTC against exhaustive enumeration, and AGS
// gate / attention invariants. Used by `agsctc selfcheck` and the tests.

#include "ags/gradcheck.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ags {

enum class GradCase {
  matmul,
  hadamard,
  softmax,
  scaled_sigmoid2,
  dense,
  conv2d,
  maxpool,
  lstm,
  bilstm,
  ags_chain,
  multi_head,
  lhuc,
  ssnn,
  ctc,
};

std::vector<GradCase> all_grad_cases();
std::string to_string(GradCase which);

/// Random small instance of `which`, checked at step 1e-5 in double.
/// `analytic_bias` != 1 corrupts the analytic side (negative control).
GradCheckResult grad_case(GradCase which, std::uint64_t seed, double analytic_bias = 1.0);

struct CheckLine {
  std::string name;
  double observed = 0.0;
  double tolerance = 0.0;
  bool passed = false;
};

struct CheckReport {
  std::vector<CheckLine> lines;
  bool passed() const;
  void add(std::string name, double observed, double tolerance);
  void add_flag(std::string name, bool ok);
};

CheckReport check_gradients(int seeds, double analytic_bias = 1.0);
/// Random instances with T <= 6, |L| <= 3, V <= 3.
CheckReport check_ctc(int instances, std::uint64_t seed = 7);
CheckReport check_attention(int evaluations, std::uint64_t seed = 11);

/// suite is one of grad, ctc, attention, all.
CheckReport run_selfcheck(const std::string& suite, bool inject_fault = false);

}  // namespace ags
