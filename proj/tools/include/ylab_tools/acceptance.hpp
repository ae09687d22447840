// Copyright 2026 The ylab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

namespace ylab::cli {

struct CriterionResult {
  int id = 0;
  std::string title;
  bool pass = false;
  std::string detail;
  double seconds = 0.0;
  double time_limit = 0.0;  // 0 means no limit
};

/// "PASS [n] title: detail (t s)"
std::string format_result(const CriterionResult& result);

struct Criterion {
  int id;
  std::string title;
  double time_limit;  // seconds, 0 for none
  std::function<bool(std::string& detail)> check;
};

/// The acceptance criteria in order.
std::vector<Criterion> acceptance_criteria();

/// Runs every criterion, printing one line per criterion to `out` as it
/// finishes. A criterion passes when its check holds and it ran within its
/// time limit.
std::vector<CriterionResult> run_acceptance(std::ostream& out);

struct GradcheckSummary {
  std::string target;
  std::size_t instances = 0;
  double max_rel_error = 0.0;
};

/// Analytic gradients against central differences over seeded instances.
/// The aux-loss oracle freezes token fractions and scope memberships at the
/// evaluation point and recomputes the scope probability means itself.
GradcheckSummary gradcheck_aux_loss(std::size_t instances, double step, std::uint64_t seed);
GradcheckSummary gradcheck_dpo(std::size_t instances, double step, std::uint64_t seed);
GradcheckSummary gradcheck_bt(std::size_t instances, double step, std::uint64_t seed);

}  // namespace ylab::cli
