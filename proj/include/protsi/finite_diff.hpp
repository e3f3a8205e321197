#pragma once

#include <functional>
#include <string>
#include <vector>

#include "protsi/tape.hpp"

namespace protsi {

// Builds the scalar loss on the given tape from the given parameters. Must be
// deterministic: any sampling has to be fixed before the builder is created.
using LossBuilder = std::function<Var(Tape&, const ParameterSet&)>;

struct GradCheckEntry {
  std::string param_id;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> per_parameter;  // one entry per trainable parameter
  double max_rel_error = 0.0;
  std::string worst_param;
  bool pass = false;
  double rel_tolerance = 0.0;
};

// Compares reverse-mode gradients against central differences
// (f(p+h) - f(p-h)) / (2h) for every trainable scalar entry. Relative error
// uses max(|reverse|, |central|) with an absolute floor of 1e-8 in the
// denominator; the check passes iff the maximum relative error is within
// rel_tolerance. A non-deterministic loss (two identical evaluations that
// disagree bit-for-bit) is a usage error.
//
// corrupt_group is a test hook: when non-empty, 0.5 is added to every
// reverse-mode gradient entry of parameters whose id starts with the prefix,
// so negative tests can verify that corruption is detected and named.
GradCheckReport finite_difference_check(const LossBuilder& loss_fn, const ParameterSet& params,
                                        double step, double rel_tolerance,
                                        const std::string& corrupt_group = "");

}  // namespace protsi
