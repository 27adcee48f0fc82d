#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "veco/tensor.hpp"

namespace veco {

struct AdamConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-6;
    double weight_decay = 0.01;
};

struct Schedule {
    double peak_lr = 3e-4;
    std::int64_t warmup_steps = 200;
    std::int64_t total_steps = 1000;

    void validate() const;
};

/// Linear ramp 0..peak over warmup, then linear decay to 0 at total_steps.
double lr_at(std::int64_t step, const Schedule& schedule);

/// Bias-corrected Adam with decoupled weight decay. Moment buffers are keyed
/// by parameter name; parameters and moments are kept f32-representable after
/// every step so checkpoints round-trip bit-exactly.
struct AdamState {
    struct Moments {
        std::vector<double> m;
        std::vector<double> v;
    };
    AdamConfig config;
    std::map<std::string, Moments> moments;
    std::int64_t step = 0;
};

using NamedParams = std::vector<std::pair<std::string, Tensor>>;

/// One update over `params` at learning rate `lr`. Throws NumericError naming
/// the parameter if any gradient is non-finite; no parameter moves in that case.
void adam_step(const NamedParams& params, AdamState& state, double lr);

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the pre-clip norm.
double clip_grad_norm(const NamedParams& params, double max_norm);

void zero_grads(const NamedParams& params);

}  // namespace veco
