#pragma once

// Property suites exposed to users through the verify command: central
// finite-difference checks of every objective's analytic gradient, and the
// Monte-Carlo unbiasedness checks of the PU negative-risk estimator.

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/core.hpp"
#include "cbpo/losses.hpp"
#include "cbpo/policy.hpp"
#include "cbpo/pu.hpp"
#include "cbpo/rewards.hpp"

namespace cbpo {

/// One randomly drawn objective evaluation point.
struct GradientCase {
    PolicyParams policy;
    PolicyParams reference;
    Batch batch;
    ObjectiveConfig config;
    double delta = 0.0;
};

namespace detail {

inline TokenSeq random_tokens(Rng& rng, std::size_t len, std::size_t vocab) {
    TokenSeq t(len);
    for (auto& v : t) v = static_cast<Token>(rng.below(vocab));
    return t;
}

inline PolicyParams random_policy(Rng& rng, std::size_t vocab, std::size_t context, double scale) {
    PolicyParams p(vocab, context);
    for (double& v : p.logits.data) v = scale * rng.normal();
    return p;
}

inline std::vector<int> kto_labels(const Batch& b) {
    std::vector<int> labels(b.pos.size(), 1);
    labels.insert(labels.end(), b.aux.size(), -1);
    return labels;
}

inline std::vector<double> kto_rewards(const Batch& b, const PolicyParams& policy, const PolicyParams& reference,
                                       double beta) {
    const RewardConfig rc{beta};
    std::vector<double> r;
    for (const auto& s : b.pos) r.push_back(implicit_reward(policy, reference, rc, s));
    for (const auto& s : b.aux) r.push_back(implicit_reward(policy, reference, rc, s));
    return r;
}

}  // namespace detail

/// Draws a small random configuration for `method`. For CBPO the draw is
/// repeated until the clamp is inactive with a margin.
inline GradientCase random_gradient_case(Method method, Rng& rng) {
    for (;;) {
        GradientCase c;
        const std::size_t vocab = 3 + rng.below(4);
        const std::size_t context = 1 + rng.below(3);
        const std::size_t seq_len = 1 + rng.below(3);
        c.policy = detail::random_policy(rng, vocab, context, 0.7);
        c.reference = detail::random_policy(rng, vocab, context, 0.7);
        auto sample = [&] {
            Sample s;
            s.x = detail::random_tokens(rng, 1 + rng.below(2), vocab);
            s.y = detail::random_tokens(rng, seq_len, vocab);
            return s;
        };
        const std::size_t n_pos = 1 + rng.below(4);
        const std::size_t n_aux = 1 + rng.below(4);
        for (std::size_t i = 0; i < n_pos; ++i) c.batch.pos.push_back(sample());
        for (std::size_t i = 0; i < n_aux; ++i) c.batch.aux.push_back(sample());
        for (std::size_t i = 0; i < n_pos; ++i) {
            const Sample s = sample();
            c.batch.pairs.push_back(PreferencePair{s.x, s.y, detail::random_tokens(rng, seq_len, vocab)});
        }
        c.config.beta = 0.5 + 1.5 * rng.uniform();
        c.config.calibration.alpha = 0.9 * rng.uniform();
        c.config.calibration.pi_n = 1.0 - c.config.calibration.alpha;
        c.config.lambda_d = 0.5 + rng.uniform();
        c.config.lambda_u = 0.5 + rng.uniform();
        c.delta = 0.3 * rng.normal();
        if (method == Method::CBPO) {
            const auto b = evaluate_objective(method, c.batch, c.policy, c.reference, c.config, c.delta).breakdown;
            if (!(b.pure_neg_raw > 1e-3)) continue;
        }
        return c;
    }
}

/// Loss value with delta and (for KTO) the reference points held fixed.
inline double objective_value(Method method, const GradientCase& c, const PolicyParams& policy,
                              const std::vector<double>& frozen_zrefs) {
    if (method == Method::KTO) {
        const auto r = detail::kto_rewards(c.batch, policy, c.reference, c.config.beta);
        return kto_loss_with_refs(r, detail::kto_labels(c.batch), frozen_zrefs, c.config.lambda_d, c.config.lambda_u);
    }
    return evaluate_objective(method, c.batch, policy, c.reference, c.config, c.delta).breakdown.total;
}

/// ||analytic - numeric||_2 / max(||numeric||_2, 1e-8) with central differences.
inline double gradient_relative_error(Method method, const GradientCase& c, double step) {
    const Matrix analytic = loss_gradients(method, c.batch, c.policy, c.reference, c.config, c.delta);
    std::vector<double> zrefs;
    if (method == Method::KTO) zrefs = kto_zrefs(detail::kto_rewards(c.batch, c.policy, c.reference, c.config.beta));
    PolicyParams p = c.policy;
    double diff = 0.0;
    double norm = 0.0;
    for (std::size_t i = 0; i < p.logits.data.size(); ++i) {
        const double orig = p.logits.data[i];
        p.logits.data[i] = orig + step;
        const double up = objective_value(method, c, p, zrefs);
        p.logits.data[i] = orig - step;
        const double down = objective_value(method, c, p, zrefs);
        p.logits.data[i] = orig;
        const double numeric = (up - down) / (2.0 * step);
        diff += (analytic.data[i] - numeric) * (analytic.data[i] - numeric);
        norm += numeric * numeric;
    }
    return std::sqrt(diff) / std::max(std::sqrt(norm), 1e-8);
}

struct GradientCheckReport {
    Method method = Method::SFT;
    std::size_t configurations = 0;
    double max_relative_error = 0.0;
    double tolerance = 0.0;
    bool passed = false;

    nlohmann::ordered_json to_json() const {
        return {{"name", std::string("gradient_") + cbpo::to_string(method)},
                {"passed", passed},
                {"configurations", configurations},
                {"max_relative_error", max_relative_error},
                {"tolerance", tolerance}};
    }
};

inline GradientCheckReport check_gradients(Method method, std::size_t configurations, std::uint64_t seed,
                                           double step = 1e-5, double tolerance = 1e-4) {
    GradientCheckReport rep;
    rep.method = method;
    rep.configurations = configurations;
    rep.tolerance = tolerance;
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(method) + 1));
    for (std::size_t k = 0; k < configurations; ++k) {
        const GradientCase c = random_gradient_case(method, rng);
        rep.max_relative_error = std::max(rep.max_relative_error, gradient_relative_error(method, c, step));
    }
    rep.passed = rep.max_relative_error < tolerance;
    return rep;
}

// ---------------------------------------------------------------------------

struct VerifyConfig {
    std::uint64_t seed = 0;
    std::size_t gradient_configurations = 50;
    std::size_t pu_replications = 200;
    std::size_t pu_n = 10000;
    std::vector<std::size_t> slope_sizes{100, 300, 1000, 3000, 10000};
    double slope_target = -0.5;
    double slope_tolerance = 0.1;
};

struct VerifyReport {
    nlohmann::ordered_json checks = nlohmann::ordered_json::array();
    bool passed = true;

    void add(const nlohmann::ordered_json& check) {
        passed = passed && check.at("passed").get<bool>();
        checks.push_back(check);
    }

    std::vector<std::string> failures() const {
        std::vector<std::string> out;
        for (const auto& c : checks) {
            if (!c.at("passed").get<bool>()) out.push_back(c.at("name").get<std::string>());
        }
        return out;
    }

    nlohmann::ordered_json to_json() const { return {{"passed", passed}, {"checks", checks}}; }
};

inline VerifyReport run_verify(const VerifyConfig& cfg, const NegativeRiskEstimator& estimator = negative_risk_pu) {
    VerifyReport rep;
    const GaussianScoreMixture mix;

    const auto unb = check_unbiasedness(mix, cfg.pu_n, cfg.pu_replications, derive_seed(cfg.seed, 11), 4.0, estimator);
    nlohmann::ordered_json u = {{"name", "pu_unbiasedness"}, {"passed", unb.passed}};
    const nlohmann::json details = unb.to_json();
    for (const auto& [k, v] : details.items()) {
        if (k != "passed") u[k] = v;
    }
    rep.add(u);

    std::vector<double> ns, sds;
    for (std::size_t i = 0; i < cfg.slope_sizes.size(); ++i) {
        const auto r = check_unbiasedness(mix, cfg.slope_sizes[i], cfg.pu_replications, derive_seed(cfg.seed, 20 + i),
                                          4.0, estimator);
        ns.push_back(static_cast<double>(cfg.slope_sizes[i]));
        sds.push_back(r.replication_sd);
    }
    const double slope = log_log_slope(ns, sds);
    rep.add({{"name", "pu_sd_slope"},
             {"passed", std::abs(slope - cfg.slope_target) <= cfg.slope_tolerance},
             {"slope", slope},
             {"sizes", cfg.slope_sizes},
             {"replication_sd", sds}});

    for (Method m : {Method::SFT, Method::DPO, Method::KTO, Method::BCO, Method::CBPO_RAW, Method::CBPO}) {
        rep.add(check_gradients(m, cfg.gradient_configurations, cfg.seed).to_json());
    }
    return rep;
}

}  // namespace cbpo
