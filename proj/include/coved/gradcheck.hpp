#pragma once

// Compares analytic gradients against central finite differences.
//
// The loss builder is called many times with perturbed parameter values, so
// it must be deterministic: any sampling inside it has to come from an Rng
// the builder itself constructs from a fixed seed on every call.

#include <cmath>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coved/tensor.hpp"

namespace coved {

struct GradCheckFailure {
    std::string param;
    std::size_t index = 0;
    double analytic = 0.0;
    double numeric = 0.0;
    double rel_error = 0.0;
};

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    std::vector<GradCheckFailure> failures;

    bool passed() const { return failures.empty(); }
};

using LossBuilder = std::function<Tensor(Graph&)>;

inline double gradcheck_rel_error(double analytic, double numeric) {
    const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
    return std::fabs(analytic - numeric) / denom;
}

inline GradCheckReport grad_check(const LossBuilder& build_loss,
                                  std::span<const ParamPtr> params, double h = 1e-5,
                                  double tol = 1e-4) {
    for (const auto& p : params) p->zero_grad();

    {
        Graph g;
        Tensor loss = build_loss(g);
        g.backward(loss);
    }
    std::map<std::string, std::vector<double>> analytic;
    for (const auto& p : params) analytic[p->name()] = p->grad;

    auto eval = [&]() {
        Graph g;
        return build_loss(g).item();
    };

    GradCheckReport report;
    for (const auto& p : params) {
        const auto& a = analytic[p->name()];
        for (std::size_t i = 0; i < p->size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + h;
            const double f_plus = eval();
            p->value[i] = saved - h;
            const double f_minus = eval();
            p->value[i] = saved;
            const double numeric = (f_plus - f_minus) / (2.0 * h);
            const double rel = gradcheck_rel_error(a[i], numeric);
            report.max_rel_error = std::max(report.max_rel_error, rel);
            ++report.checked;
            if (rel > tol)
                report.failures.push_back({p->name(), i, a[i], numeric, rel});
        }
        p->zero_grad();
    }
    return report;
}

}  // namespace coved
