#pragma once

// First-order moment-tracked optimizer (Adam) with decoupled weight decay
// and an optional warmup + cosine learning-rate schedule.

#include <cmath>
#include <cstdint>
#include <iostream>
#include <vector>

#include "lvr/param_store.hpp"

namespace lvr {

enum class LrSchedule { constant, warmup_cosine };

struct OptimConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    LrSchedule schedule = LrSchedule::constant;
    double warmup_ratio = 0.03;  // used by warmup_cosine
    long total_steps = 0;        // required by warmup_cosine

    // The hyperparameters reported for full-scale training; kept as a
    // ready-made alternative profile.
    static OptimConfig paper_profile(long total_steps) {
        OptimConfig c;
        c.lr = 5e-6;
        c.weight_decay = 0.1;
        c.schedule = LrSchedule::warmup_cosine;
        c.warmup_ratio = 0.03;
        c.total_steps = total_steps;
        return c;
    }
};

class AdamW {
public:
    explicit AdamW(OptimConfig cfg) : cfg_(cfg) {}

    const OptimConfig& config() const { return cfg_; }
    long steps_taken() const { return t_; }
    long steps_skipped() const { return skipped_; }

    double current_lr() const {
        if (cfg_.schedule == LrSchedule::constant || cfg_.total_steps <= 0) return cfg_.lr;
        const double progress = static_cast<double>(t_) / static_cast<double>(cfg_.total_steps);
        const double warmup = cfg_.warmup_ratio;
        if (warmup > 0.0 && progress < warmup) return cfg_.lr * progress / warmup;
        const double span = warmup < 1.0 ? (progress - warmup) / (1.0 - warmup) : 1.0;
        return cfg_.lr * 0.5 * (1.0 + std::cos(span * 3.14159265358979323846));
    }

    // Applies one update from the gradients currently held by `params`.
    // A non-finite gradient anywhere skips the whole step and logs the event.
    // Frozen parameters are left untouched. Gradients are not cleared here;
    // the caller zeroes them between steps.
    bool step(ParamStore& params) {
        ensure_state(params);
        for (const auto& e : params.entries()) {
            for (double g : *e.tensor.grad) {
                if (!std::isfinite(g)) {
                    ++skipped_;
                    std::cerr << "optimizer: non-finite gradient in " << e.name << ", step skipped\n";
                    return false;
                }
            }
        }
        const double lr = current_lr();
        ++t_;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
        size_t cursor = 0;
        for (auto& e : params.entries()) {
            const size_t n = e.tensor.numel();
            if (e.frozen) {
                cursor += n;
                continue;
            }
            double* p = e.tensor.ptr();
            const double* g = e.tensor.grad->data();
            for (size_t i = 0; i < n; ++i) {
                double& m = m_[cursor + i];
                double& v = v_[cursor + i];
                m = cfg_.beta1 * m + (1.0 - cfg_.beta1) * g[i];
                v = cfg_.beta2 * v + (1.0 - cfg_.beta2) * g[i] * g[i];
                const double mh = m / bc1;
                const double vh = v / bc2;
                p[i] -= lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p[i]);
            }
            cursor += n;
        }
        return true;
    }

private:
    void ensure_state(const ParamStore& params) {
        const size_t n = params.total_values();
        if (m_.size() != n) {
            m_.assign(n, 0.0);
            v_.assign(n, 0.0);
        }
    }

    OptimConfig cfg_;
    std::vector<double> m_, v_;
    long t_ = 0;
    long skipped_ = 0;
};

}  // namespace lvr
