#pragma once

#include <string>

#include "xlp/tensor.hpp"

namespace xlp {

struct JointGradCheckReport {
  GradCheckResult query;       // finite differences over every query parameter
  bool key_grads_zero = false; // key-encoder gradients stay exactly zero
  double seconds = 0.0;
  bool pass = false;
};

// Full joint-loss gradient check on a deterministic toy setup: 2 layers,
// 16 hidden, vocab 32, queue of 8, one small batch per task. Central
// differences at h, pass when every relative error is below tolerance.
JointGradCheckReport joint_gradcheck(double h = 1e-5, double tolerance = 1e-4,
                                     uint64_t seed = 7);

std::string format_gradcheck_report(const JointGradCheckReport& report);

}  // namespace xlp
