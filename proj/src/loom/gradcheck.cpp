#include "loom/gradcheck.hpp"

#include <cmath>

namespace loom {

GradCheckReport grad_check(const LossFn& loss, ParamSet& params, double h,
                           const std::vector<std::string>& which, double denom_floor) {
    std::vector<std::string> names = which.empty() ? params.names() : which;

    params.zero_grads();
    const double base = loss(params, true);
    if (!std::isfinite(base)) throw std::runtime_error("grad_check: non-finite loss");
    // snapshot the analytic gradients before the probe evaluations
    std::vector<Tensor> analytic;
    analytic.reserve(names.size());
    for (const auto& n : names) analytic.push_back(params.grad(n));

    GradCheckReport report;
    for (size_t pi = 0; pi < names.size(); pi++) {
        GradCheckEntry entry;
        entry.name = names[pi];
        Tensor& v = params.value(names[pi]);
        for (size_t i = 0; i < v.data.size(); i++) {
            const double keep = v.data[i];
            v.data[i] = keep + h;
            const double up = loss(params, false);
            v.data[i] = keep - h;
            const double down = loss(params, false);
            v.data[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double a = analytic[pi].data[i];
            const double rel =
                std::fabs(a - numeric) /
                std::max({std::fabs(a), std::fabs(numeric), denom_floor});
            if (rel > entry.max_rel_err) {
                entry.max_rel_err = rel;
                entry.worst_index = static_cast<int>(i);
                entry.analytic = a;
                entry.numeric = numeric;
            }
        }
        if (entry.max_rel_err > report.max_rel_err) {
            report.max_rel_err = entry.max_rel_err;
            report.worst_param = entry.name;
        }
        report.per_param.push_back(std::move(entry));
    }
    return report;
}

}  // namespace loom
