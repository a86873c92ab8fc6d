#pragma once

#include <cmath>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "tinymm/tensor.hpp"

namespace tinymm {

// Linear warmup over ceil(3% of total), cosine decay to zero afterwards.
inline double lr_schedule(int step, int total_steps, double base_lr) {
    if (step < 0 || step > total_steps) {
        throw ContractError("lr_schedule step " + std::to_string(step) + " outside [0, " +
                            std::to_string(total_steps) + "]");
    }
    const int warmup = static_cast<int>(std::ceil(0.03 * total_steps));
    if (step < warmup) return base_lr * step / warmup;
    if (total_steps == warmup) return step == total_steps ? 0.0 : base_lr;
    const double t = static_cast<double>(step - warmup) / (total_steps - warmup);
    return base_lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
};

// Decoupled-weight-decay Adam with bias correction. Moments are keyed by
// parameter name so checkpoints restore them stage-exactly; non-trainable
// parameters are never touched.
class AdamW {
public:
    explicit AdamW(AdamWConfig cfg = {}) : cfg_(cfg) {}

    const AdamWConfig& config() const { return cfg_; }
    int step_count() const { return step_; }

    void step(const std::vector<std::pair<std::string, Parameter*>>& params, double lr) {
        ++step_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, step_);
        const double bc2 = 1.0 - std::pow(cfg_.beta2, step_);
        for (const auto& [name, p] : params) {
            if (!p->trainable) continue;
            if (!p->has_grad()) {
                throw ContractError("adamw step: trainable parameter '" + name +
                                    "' has no gradient");
            }
            auto& [m, v] = moments_[name];
            if (m.empty()) {
                m = Tensor::zeros(p->value.shape());
                v = Tensor::zeros(p->value.shape());
            }
            for (size_t i = 0; i < p->value.numel(); ++i) {
                const double g = p->grad[i];
                m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * g;
                v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * g * g;
                const double mhat = m[i] / bc1;
                const double vhat = v[i] / bc2;
                p->value[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) +
                                     cfg_.weight_decay * p->value[i]);
            }
        }
    }

    const std::map<std::string, std::pair<Tensor, Tensor>>& moments() const { return moments_; }

    void restore(int step, std::map<std::string, std::pair<Tensor, Tensor>> moments) {
        step_ = step;
        moments_ = std::move(moments);
    }

private:
    AdamWConfig cfg_;
    int step_ = 0;
    std::map<std::string, std::pair<Tensor, Tensor>> moments_;
};

} // namespace tinymm
