#pragma once

// Implicit rewards and the reference points that anchor them.

#include <algorithm>
#include <cmath>
#include <span>
#include <vector>

#include "cbpo/core.hpp"
#include "cbpo/policy.hpp"

namespace cbpo {

struct RewardConfig {
    double beta = 1.0;

    void validate() const {
        if (!(beta > 0.0) || !std::isfinite(beta)) throw ConfigError("beta must be a positive finite real");
    }
};

/// beta * (log pi(y|x) - log pi_ref(y|x)).
inline double implicit_reward(const PolicyParams& policy, const PolicyParams& reference,
                              const RewardConfig& config, const TokenSeq& x, const TokenSeq& y) {
    if (!policy.same_shape(reference)) throw InputError("policy/reference shape mismatch");
    config.validate();
    return config.beta * (log_prob(policy, x, y) - log_prob(reference, x, y));
}

inline double implicit_reward(const PolicyParams& policy, const PolicyParams& reference,
                              const RewardConfig& config, const Sample& s) {
    return implicit_reward(policy, reference, config, s.x, s.y);
}

/// Mean of the positive-set and auxiliary-set mean rewards.
inline double delta_bco(std::span<const double> pos_rewards, std::span<const double> aux_rewards) {
    if (pos_rewards.empty() || aux_rewards.empty()) throw InputError("delta_bco: empty reward list");
    return 0.5 * (mean(pos_rewards) + mean(aux_rewards));
}

/// Pooled mean of all rewards in a batch. Drifts toward the larger set when
/// the batch is imbalanced.
inline double delta_joint(std::span<const double> pos_rewards, std::span<const double> aux_rewards) {
    if (pos_rewards.empty() && aux_rewards.empty()) throw InputError("delta_joint: empty batch");
    double s = 0.0;
    for (double r : pos_rewards) s += r;
    for (double r : aux_rewards) s += r;
    return s / static_cast<double>(pos_rewards.size() + aux_rewards.size());
}

/// Leave-one-out batch mean, clipped at zero.
inline double kto_zref(std::span<const double> batch_rewards, std::size_t index) {
    if (batch_rewards.size() < 2) throw InputError("kto_zref: batch size must be >= 2");
    if (index >= batch_rewards.size()) throw InputError("kto_zref: index out of range");
    double s = 0.0;
    for (std::size_t i = 0; i < batch_rewards.size(); ++i) {
        if (i != index) s += batch_rewards[i];
    }
    return std::max(0.0, s / static_cast<double>(batch_rewards.size() - 1));
}

/// Decoupled exponential moving averages of positive and auxiliary rewards.
struct ReferenceState {
    double ema_pos = 0.0;
    double ema_aux = 0.0;
    double decay = 0.99;
    bool initialized = false;

    explicit ReferenceState(double d = 0.99) : decay(d) {
        if (!(d > 0.0 && d < 1.0)) throw ConfigError("EMA decay must lie in (0,1)");
    }

    bool operator==(const ReferenceState&) const = default;
};

/// The first update seeds both averages with the raw batch means.
inline ReferenceState ema_update(ReferenceState state, double batch_pos_mean, double batch_aux_mean) {
    if (!std::isfinite(batch_pos_mean) || !std::isfinite(batch_aux_mean)) {
        throw NumericError("ema_update: non-finite batch mean");
    }
    if (!state.initialized) {
        state.ema_pos = batch_pos_mean;
        state.ema_aux = batch_aux_mean;
        state.initialized = true;
        return state;
    }
    state.ema_pos = state.decay * state.ema_pos + (1.0 - state.decay) * batch_pos_mean;
    state.ema_aux = state.decay * state.ema_aux + (1.0 - state.decay) * batch_aux_mean;
    return state;
}

inline double delta_ema(const ReferenceState& state) {
    if (!state.initialized) throw StateError("delta_ema: reference state not initialized");
    return 0.5 * (state.ema_pos + state.ema_aux);
}

}  // namespace cbpo
