#include "condinst/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "condinst/rng.hpp"

namespace condinst {

GradCheckReport finite_diff_check_at(const std::function<double(const std::vector<double>&)>& f,
                                     const std::vector<double>& params,
                                     const std::vector<double>& analytic_grad,
                                     const std::vector<size_t>& coords, double step,
                                     double dead_zone) {
    require(step > 0, ErrorKind::usage, "finite_diff_check: step must be positive");
    require(params.size() == analytic_grad.size(), ErrorKind::usage,
            "finite_diff_check: gradient length mismatch");
    for (double p : params)
        require(std::isfinite(p), ErrorKind::numeric, "finite_diff_check: non-finite parameter");

    GradCheckReport report;
    std::vector<double> x = params;
    for (size_t idx : coords) {
        const double saved = x[idx];
        x[idx] = saved + step;
        const double fp = f(x);
        x[idx] = saved - step;
        const double fm = f(x);
        x[idx] = saved;
        ++report.num_probes;
        if (!std::isfinite(fp) || !std::isfinite(fm)) {
            report.failed = true;
            continue;
        }
        const double numeric = (fp - fm) / (2 * step);
        const double analytic = analytic_grad[idx];
        if (std::abs(numeric) < dead_zone && std::abs(analytic) < dead_zone) continue;
        const double abs_err = std::abs(numeric - analytic);
        // Error relative to the finite-difference estimate, so an analytic
        // gradient twice the true value reads as rel err 1.0.
        const double rel_err = abs_err / std::max(std::abs(numeric), dead_zone);
        report.max_abs_err = std::max(report.max_abs_err, abs_err);
        report.max_rel_err = std::max(report.max_rel_err, rel_err);
    }
    if (report.max_rel_err > kGradCheckFailRelErr) report.failed = true;
    return report;
}

GradCheckReport finite_diff_check(const std::function<double(const std::vector<double>&)>& f,
                                  const std::vector<double>& params,
                                  const std::vector<double>& analytic_grad, int probes, double step,
                                  uint64_t seed, double dead_zone) {
    require(!params.empty(), ErrorKind::usage, "finite_diff_check: empty parameter vector");
    Rng rng(seed);
    std::vector<size_t> coords;
    coords.reserve(probes);
    if (static_cast<size_t>(probes) >= params.size()) {
        for (size_t i = 0; i < params.size(); ++i) coords.push_back(i);
    } else {
        for (int i = 0; i < probes; ++i)
            coords.push_back(static_cast<size_t>(rng.uniform_int(0, params.size() - 1)));
    }
    return finite_diff_check_at(f, params, analytic_grad, coords, step, dead_zone);
}

}  // namespace condinst
