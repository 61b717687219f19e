#pragma once

// Adam optimizer over named parameters. Moment state is kept per parameter,
// so when a training phase updates only a subset, the other parameters'
// step counters and moments do not advance.

#include <cmath>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "coved/tensor.hpp"

namespace coved {

struct AdamConfig {
    double lr = 0.0002;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    std::size_t step = 0;
    std::vector<double> m;
    std::vector<double> v;
};

class Adam {
public:
    explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

    const AdamConfig& config() const { return cfg_; }

    // Applies one bias-corrected update to each parameter from its
    // accumulated gradient, then clears the gradient.
    void step(std::span<const ParamPtr> params) {
        for (const auto& p : params) {
            AdamState& st = states_[p->name()];
            if (st.m.empty()) {
                st.m.assign(p->size(), 0.0);
                st.v.assign(p->size(), 0.0);
            }
            for (double gv : p->grad)
                if (!std::isfinite(gv))
                    throw NumericError("non-finite gradient for parameter " + p->name());
            st.step += 1;
            const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(st.step));
            const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(st.step));
            for (std::size_t i = 0; i < p->size(); ++i) {
                const double gv = p->grad[i];
                st.m[i] = cfg_.beta1 * st.m[i] + (1.0 - cfg_.beta1) * gv;
                st.v[i] = cfg_.beta2 * st.v[i] + (1.0 - cfg_.beta2) * gv * gv;
                const double mhat = st.m[i] / bc1;
                const double vhat = st.v[i] / bc2;
                p->value[i] -= cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps);
            }
            p->zero_grad();
        }
    }

    const AdamState* state_of(const std::string& name) const {
        auto it = states_.find(name);
        return it == states_.end() ? nullptr : &it->second;
    }

private:
    AdamConfig cfg_;
    std::map<std::string, AdamState> states_;
};

}  // namespace coved
