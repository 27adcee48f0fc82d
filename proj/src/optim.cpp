#include "veco/optim.hpp"

#include <cmath>
#include <stdexcept>

#include "veco/errors.hpp"

namespace veco {

void Schedule::validate() const {
    if (peak_lr < 0.0) throw std::invalid_argument("peak_lr must be >= 0");
    if (warmup_steps < 0 || total_steps < 0 || warmup_steps > total_steps) {
        throw std::invalid_argument("schedule requires 0 <= warmup_steps <= total_steps");
    }
}

double lr_at(std::int64_t step, const Schedule& schedule) {
    schedule.validate();
    if (step < 0) throw std::invalid_argument("lr_at: negative step");
    if (step > schedule.total_steps) return 0.0;
    if (step <= schedule.warmup_steps) {
        if (schedule.warmup_steps == 0) return schedule.peak_lr;
        return schedule.peak_lr * static_cast<double>(step) /
               static_cast<double>(schedule.warmup_steps);
    }
    std::int64_t decay_span = schedule.total_steps - schedule.warmup_steps;
    if (decay_span == 0) return 0.0;
    return schedule.peak_lr * static_cast<double>(schedule.total_steps - step) /
           static_cast<double>(decay_span);
}

namespace {
double snap_f32(double v) { return static_cast<double>(static_cast<float>(v)); }
}  // namespace

void adam_step(const NamedParams& params, AdamState& state, double lr) {
    // Validate every gradient before touching anything; an aborted step must
    // leave parameters and moments untouched.
    for (const auto& [name, t] : params) {
        for (double g : t.grad()) {
            if (!std::isfinite(g)) {
                throw NumericError("non-finite gradient in parameter '" + name + "'");
            }
        }
    }
    ++state.step;
    double t = static_cast<double>(state.step);
    double bc1 = 1.0 - std::pow(state.config.beta1, t);
    double bc2 = 1.0 - std::pow(state.config.beta2, t);
    for (const auto& [name, param] : params) {
        auto& mom = state.moments[name];
        Tensor handle = param;  // shares storage
        auto& values = handle.values();
        const auto& grad = handle.grad();
        if (mom.m.empty()) {
            mom.m.assign(values.size(), 0.0);
            mom.v.assign(values.size(), 0.0);
        }
        for (size_t i = 0; i < values.size(); ++i) {
            double g = grad[i];
            mom.m[i] = snap_f32(state.config.beta1 * mom.m[i] + (1.0 - state.config.beta1) * g);
            mom.v[i] = snap_f32(state.config.beta2 * mom.v[i] + (1.0 - state.config.beta2) * g * g);
            double m_hat = mom.m[i] / bc1;
            double v_hat = mom.v[i] / bc2;
            double update = m_hat / (std::sqrt(v_hat) + state.config.eps) +
                            state.config.weight_decay * values[i];
            values[i] = snap_f32(values[i] - lr * update);
        }
    }
}

double clip_grad_norm(const NamedParams& params, double max_norm) {
    double sq = 0.0;
    for (const auto& [name, t] : params) {
        for (double g : t.grad()) sq += g * g;
    }
    double norm = std::sqrt(sq);
    if (norm > max_norm && norm > 0.0) {
        double factor = max_norm / norm;
        for (const auto& [name, t] : params) {
            Tensor handle = t;
            for (double& g : handle.grad_mut()) g *= factor;
        }
    }
    return norm;
}

void zero_grads(const NamedParams& params) {
    for (const auto& [name, t] : params) t.zero_grad();
}

}  // namespace veco
