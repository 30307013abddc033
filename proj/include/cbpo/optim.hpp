#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>

#include "cbpo/core.hpp"

namespace cbpo {

struct AdamWConfig {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.01;
    double warmup_ratio = 0.1;
};

/// Linear warm-up then linear decay to zero over `total_steps`.
inline double scheduled_lr(double base_lr, std::uint64_t step, std::uint64_t total_steps, double warmup_ratio) {
    if (total_steps == 0) return base_lr;
    const auto warm = std::max<std::uint64_t>(
        1, static_cast<std::uint64_t>(std::ceil(warmup_ratio * static_cast<double>(total_steps))));
    if (step <= warm) return base_lr * static_cast<double>(step) / static_cast<double>(warm);
    if (step >= total_steps) return 0.0;
    return base_lr * static_cast<double>(total_steps - step) / static_cast<double>(total_steps - warm);
}

/// AdamW with decoupled weight decay. `step` counts completed updates.
struct AdamW {
    AdamWConfig config;
    double learning_rate = 1e-3;
    std::uint64_t total_steps = 0;
    std::uint64_t step = 0;
    Matrix m;
    Matrix v;

    AdamW() = default;
    AdamW(const AdamWConfig& cfg, double lr, std::uint64_t total, std::size_t rows, std::size_t cols)
        : config(cfg), learning_rate(lr), total_steps(total), m(rows, cols), v(rows, cols) {}

    void apply(Matrix& params, const Matrix& grad) {
        if (!params.same_shape(grad) || !params.same_shape(m)) throw InputError("AdamW: shape mismatch");
        ++step;
        const double lr = scheduled_lr(learning_rate, step, total_steps, config.warmup_ratio);
        const double bc1 = 1.0 - std::pow(config.beta1, static_cast<double>(step));
        const double bc2 = 1.0 - std::pow(config.beta2, static_cast<double>(step));
        for (std::size_t i = 0; i < params.data.size(); ++i) {
            const double g = grad.data[i];
            m.data[i] = config.beta1 * m.data[i] + (1.0 - config.beta1) * g;
            v.data[i] = config.beta2 * v.data[i] + (1.0 - config.beta2) * g * g;
            const double mh = m.data[i] / bc1;
            const double vh = v.data[i] / bc2;
            params.data[i] -= lr * (mh / (std::sqrt(vh) + config.eps) + config.weight_decay * params.data[i]);
        }
    }
};

}  // namespace cbpo
