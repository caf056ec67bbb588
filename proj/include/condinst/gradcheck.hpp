#pragma once

#include <functional>
#include <vector>

#include "condinst/feature_map.hpp"

namespace condinst {

struct GradCheckReport {
    double max_abs_err = 0.0;
    double max_rel_err = 0.0;
    int num_probes = 0;
    bool failed = false;  // non-finite value hit, or a checked pair disagreed badly
};

// Relative error beyond which a report is flagged as failed outright; a factor
// of 10 above the tightest tolerance any caller asserts.
inline constexpr double kGradCheckFailRelErr = 1e-3;

/// Central-difference verification of an analytic gradient.
///
/// Probes `probes` random coordinates of `params` (seeded, so reports are
/// reproducible), evaluates (f(x+h)-f(x-h))/2h and compares against
/// `analytic_grad`. Probes where both sides are below `dead_zone` in
/// magnitude are counted but excluded from the error maxima. A non-finite
/// function value marks the report failed.
GradCheckReport finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                  const std::vector<double>& params,
                                  const std::vector<double>& analytic_grad, int probes, double step,
                                  uint64_t seed = 17, double dead_zone = 1e-8);

/// Same check but probing an explicit coordinate list instead of random ones.
GradCheckReport finite_diff_check_at(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& params,
                                     const std::vector<double>& analytic_grad,
                                     const std::vector<size_t>& coords, double step,
                                     double dead_zone = 1e-8);

}  // namespace condinst
