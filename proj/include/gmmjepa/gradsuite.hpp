#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gmmjepa/encoder.hpp"
#include "gmmjepa/params.hpp"

namespace gmmjepa::gradsuite {

/// Module names accepted by run_case, in suite order.
const std::vector<std::string>& case_names();

/// Small encoder used by every case so the whole suite stays fast.
encoder::EncoderConfig micro_config();

struct CaseResult {
  std::string name;
  GradCheckReport report;
  double seconds = 0.0;
};

/// Runs one finite-difference case at 64-bit precision. `inject_fault` adds a
/// term whose gradient is deliberately dropped, so the check must fail.
CaseResult run_case(const std::string& name, bool inject_fault = false, std::uint64_t seed = 0,
                    const GradCheckOptions& opt = {});

std::vector<CaseResult> run_all(bool inject_fault = false, std::uint64_t seed = 0, const GradCheckOptions& opt = {});

}  // namespace gmmjepa::gradsuite
