#pragma once

// Correction-coefficient estimation by labeling propensity: a logistic proxy
// classifier separates target history (label 1) from auxiliary history
// (label 0); its mean output on held-out target samples is the propensity c,
// and alpha = mean output on the auxiliary set / c.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/core.hpp"
#include "cbpo/losses.hpp"
#include "cbpo/policy.hpp"

namespace cbpo {

inline constexpr double kAlphaCeiling = 0.99;

/// L2-normalized bag-of-tokens frequency vector of the completion.
inline std::vector<double> embed(const Sample& s, std::size_t vocab_size) {
    std::vector<double> e(vocab_size, 0.0);
    for (Token t : s.y) {
        if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw InputError("embed: token out of range");
        e[static_cast<std::size_t>(t)] += 1.0;
    }
    double norm = 0.0;
    for (double v : e) norm += v * v;
    if (norm > 0.0) {
        norm = std::sqrt(norm);
        for (double& v : e) v /= norm;
    }
    return e;
}

struct ProxyClassifier {
    std::vector<double> weights;
    double bias = 0.0;

    double predict(std::span<const double> embedding) const {
        double z = bias;
        for (std::size_t i = 0; i < weights.size(); ++i) z += weights[i] * embedding[i];
        return sigmoid(z);
    }

    double predict(const Sample& s) const { return predict(embed(s, weights.size())); }

    bool operator==(const ProxyClassifier&) const = default;
};

struct ProxyTrainingConfig {
    std::size_t epochs = 40;
    double learning_rate = 0.5;
    std::size_t batch_size = 32;
    double l2 = 1e-4;
};

/// Mini-batch logistic regression on {target -> 1, aux -> 0}. The seed
/// controls only the per-epoch shuffle; weights start at zero.
inline ProxyClassifier train_proxy(std::span<const Sample> target_samples, std::span<const Sample> aux_samples,
                                   std::size_t vocab_size, const ProxyTrainingConfig& cfg, std::uint64_t seed) {
    if (target_samples.empty() || aux_samples.empty()) throw InputError("train_proxy: empty class");
    if (cfg.batch_size == 0 || !(cfg.learning_rate > 0.0)) throw ConfigError("train_proxy: invalid config");

    std::vector<std::vector<double>> xs;
    std::vector<double> labels;
    xs.reserve(target_samples.size() + aux_samples.size());
    for (const auto& s : target_samples) {
        xs.push_back(embed(s, vocab_size));
        labels.push_back(1.0);
    }
    for (const auto& s : aux_samples) {
        xs.push_back(embed(s, vocab_size));
        labels.push_back(0.0);
    }

    ProxyClassifier clf{std::vector<double>(vocab_size, 0.0), 0.0};
    std::vector<std::size_t> order(xs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(seed);
    std::vector<double> gw(vocab_size);
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        rng.shuffle(order);
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::fill(gw.begin(), gw.end(), 0.0);
            double gb = 0.0;
            for (std::size_t k = start; k < end; ++k) {
                const std::size_t i = order[k];
                const double err = clf.predict(xs[i]) - labels[i];
                for (std::size_t d = 0; d < vocab_size; ++d) gw[d] += err * xs[i][d];
                gb += err;
            }
            const double inv = 1.0 / static_cast<double>(end - start);
            for (std::size_t d = 0; d < vocab_size; ++d) {
                clf.weights[d] -= cfg.learning_rate * (gw[d] * inv + cfg.l2 * clf.weights[d]);
            }
            clf.bias -= cfg.learning_rate * gb * inv;
        }
    }
    return clf;
}

inline double estimate_propensity(const ProxyClassifier& clf, std::span<const Sample> heldout_target) {
    if (heldout_target.empty()) throw InputError("estimate_propensity: empty held-out set");
    double s = 0.0;
    for (const auto& smp : heldout_target) s += clf.predict(smp);
    return s / static_cast<double>(heldout_target.size());
}

struct AlphaEstimate {
    double c_hat = 0.0;
    double alpha_raw = 0.0;  // before clipping
    double alpha_hat = 0.0;  // clipped to [0, kAlphaCeiling]
    bool clipped = false;
    std::size_t n_heldout = 0;
    std::size_t n_aux = 0;
    ProxyClassifier classifier;

    nlohmann::json to_json() const {
        return {{"c_hat", c_hat},         {"alpha_raw", alpha_raw},     {"alpha_hat", alpha_hat},
                {"clipped", clipped},     {"n_heldout", n_heldout},     {"n_aux", n_aux},
                {"proxy_weights", classifier.weights}, {"proxy_bias", classifier.bias}};
    }
};

inline AlphaEstimate estimate_alpha(const ProxyClassifier& clf, std::span<const Sample> aux_samples, double c_hat) {
    if (!(c_hat > 0.0)) throw EstimationError("estimate_alpha: c_hat must be > 0");
    if (aux_samples.empty()) throw InputError("estimate_alpha: empty auxiliary set");
    double s = 0.0;
    for (const auto& smp : aux_samples) s += clf.predict(smp);
    AlphaEstimate est;
    est.c_hat = c_hat;
    est.alpha_raw = s / (static_cast<double>(aux_samples.size()) * c_hat);
    est.alpha_hat = std::clamp(est.alpha_raw, 0.0, kAlphaCeiling);
    est.clipped = est.alpha_hat != est.alpha_raw;
    est.n_aux = aux_samples.size();
    est.classifier = clf;
    return est;
}

/// Seeded partition of a target history into classifier-training and
/// propensity-estimation indices.
struct TargetSplit {
    std::vector<std::size_t> heldout;
    std::vector<std::size_t> train;
};

inline TargetSplit split_target(std::size_t n, double heldout_fraction, std::uint64_t seed) {
    if (n < 2) throw InputError("estimate_alpha: target history needs >= 2 samples");
    if (!(heldout_fraction > 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must lie in (0,1)");
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
    Rng rng(derive_seed(seed, 1));
    rng.shuffle(idx);
    std::size_t n_held = static_cast<std::size_t>(std::ceil(heldout_fraction * static_cast<double>(n)));
    n_held = std::clamp<std::size_t>(n_held, 1, n - 1);
    TargetSplit out;
    out.heldout.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_held));
    out.train.assign(idx.begin() + static_cast<std::ptrdiff_t>(n_held), idx.end());
    return out;
}

/// Full procedure on one (target history, auxiliary pool) pair: a seeded
/// `heldout_fraction` of the target history is withheld from classifier
/// training and used only for the propensity.
inline AlphaEstimate estimate_alpha_from_sets(std::span<const Sample> target, std::span<const Sample> aux,
                                              std::size_t vocab_size, const ProxyTrainingConfig& cfg,
                                              std::uint64_t seed, double heldout_fraction = 0.2) {
    const TargetSplit split = split_target(target.size(), heldout_fraction, seed);
    std::vector<Sample> held, train;
    for (std::size_t i : split.heldout) held.push_back(target[i]);
    for (std::size_t i : split.train) train.push_back(target[i]);
    const ProxyClassifier clf = train_proxy(train, aux, vocab_size, cfg, derive_seed(seed, 2));
    const double c_hat = estimate_propensity(clf, held);
    AlphaEstimate est = estimate_alpha(clf, aux, c_hat);
    est.n_heldout = held.size();
    return est;
}

}  // namespace cbpo
