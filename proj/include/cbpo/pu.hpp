#pragma once

// Positive-unlabeled risk estimators and a Monte-Carlo harness that checks
// them against ground truth computed with access to the true negatives.

#include <cmath>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/core.hpp"

namespace cbpo {

/// An abstract instance carrying its losses under both labels, plus the
/// hidden class it was drawn from.
struct Instance {
    double loss_as_pos = 0.0;
    double loss_as_neg = 0.0;
    bool is_positive = false;
};

using InstanceSampler = std::function<Instance(Rng&)>;

/// p_u = pi_p * p_pos + (1 - pi_p) * p_neg.
struct MixtureSpec {
    double pi_p = 0.5;
    InstanceSampler p_pos;
    InstanceSampler p_neg;

    double pi_n() const { return 1.0 - pi_p; }
};

inline std::vector<Instance> sample_unlabeled(const MixtureSpec& spec, std::size_t n, std::uint64_t seed) {
    if (n == 0) throw InputError("sample_unlabeled: n must be >= 1");
    if (!(spec.pi_p >= 0.0 && spec.pi_p <= 1.0)) throw InputError("sample_unlabeled: pi_p outside [0,1]");
    Rng rng(seed);
    std::vector<Instance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const bool pos = rng.uniform() < spec.pi_p;
        Instance inst = pos ? spec.p_pos(rng) : spec.p_neg(rng);
        inst.is_positive = pos;
        out.push_back(inst);
    }
    return out;
}

inline std::vector<Instance> sample_class(const InstanceSampler& sampler, bool positive, std::size_t n,
                                          std::uint64_t seed) {
    Rng rng(seed);
    std::vector<Instance> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        Instance inst = sampler(rng);
        inst.is_positive = positive;
        out.push_back(inst);
    }
    return out;
}

/// Estimates pi_n * R_n^-(g) as mean(unlabeled) - pi_p * mean(positive).
inline double negative_risk_pu(std::span<const double> pos_losses, std::span<const double> unlabeled_losses,
                               double pi_p) {
    if (pos_losses.empty() || unlabeled_losses.empty()) throw InputError("negative_risk_pu: empty list");
    if (!(pi_p >= 0.0 && pi_p <= 1.0)) throw InputError("negative_risk_pu: pi_p outside [0,1]");
    return mean(unlabeled_losses) - pi_p * mean(pos_losses);
}

/// pi_p * R_p^+ + R_u^- - pi_p * R_p^-.
inline double pu_total_risk(std::span<const double> pos_losses_as_pos, std::span<const double> pos_losses_as_neg,
                            std::span<const double> unlabeled_losses_as_neg, double pi_p) {
    if (pos_losses_as_pos.empty() || pos_losses_as_neg.empty() || unlabeled_losses_as_neg.empty()) {
        throw InputError("pu_total_risk: empty set");
    }
    if (pos_losses_as_pos.size() != pos_losses_as_neg.size()) {
        throw InputError("pu_total_risk: positive-set loss lists differ in length");
    }
    return pi_p * mean(pos_losses_as_pos) + mean(unlabeled_losses_as_neg) - pi_p * mean(pos_losses_as_neg);
}

/// Fully labeled risk pi_p * R_p^+ + pi_n * R_n^-.
inline double pn_risk(std::span<const double> pos_losses_as_pos, std::span<const double> neg_losses_as_neg,
                      double pi_p) {
    return pi_p * mean(pos_losses_as_pos) + (1.0 - pi_p) * mean(neg_losses_as_neg);
}

using NegativeRiskEstimator = std::function<double(std::span<const double>, std::span<const double>, double)>;

/// A reference mixture whose true risks are known in closed form.
///
/// Instances carry a score s; losses are the logistic losses of s. Positives
/// draw s ~ N(mu_pos, 1), negatives s ~ N(mu_neg, 1). The exact expected
/// negative-label loss of the negatives is computed by quadrature.
struct GaussianScoreMixture {
    double pi_p = 0.3;
    double mu_pos = 1.0;
    double mu_neg = -1.0;

    static Instance make(double score) {
        return Instance{std::log1p(std::exp(-score)), std::log1p(std::exp(score)), false};
    }

    MixtureSpec spec() const {
        const double mp = mu_pos;
        const double mn = mu_neg;
        return MixtureSpec{pi_p, [mp](Rng& r) { return make(mp + r.normal()); },
                           [mn](Rng& r) { return make(mn + r.normal()); }};
    }

    /// E_{s ~ N(mu, 1)}[log(1 + e^{sign * s})] via composite Simpson on +/-12 sigma.
    static double expected_loss(double mu, double sign) {
        const int n = 4000;
        const double lo = mu - 12.0;
        const double hi = mu + 12.0;
        const double h = (hi - lo) / n;
        double acc = 0.0;
        for (int i = 0; i <= n; ++i) {
            const double s = lo + h * i;
            const double z = sign * s;
            const double loss = std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z)));
            const double pdf = std::exp(-0.5 * (s - mu) * (s - mu)) / std::sqrt(2.0 * 3.14159265358979323846);
            const double w = (i == 0 || i == n) ? 1.0 : (i % 2 == 1 ? 4.0 : 2.0);
            acc += w * loss * pdf;
        }
        return acc * h / 3.0;
    }

    double true_negative_risk() const { return (1.0 - pi_p) * expected_loss(mu_neg, 1.0); }
    double true_total_risk() const {
        return pi_p * expected_loss(mu_pos, -1.0) + (1.0 - pi_p) * expected_loss(mu_neg, 1.0);
    }
};

struct UnbiasednessReport {
    double estimate = 0.0;        // mean of the estimator over replications
    double truth = 0.0;           // pi_n * R_n^- in closed form
    double standard_error = 0.0;  // of the replication mean
    double replication_sd = 0.0;
    std::size_t replications = 0;
    std::size_t n = 0;
    bool passed = false;

    nlohmann::json to_json() const {
        return {{"estimate", estimate},         {"truth", truth},   {"standard_error", standard_error},
                {"replication_sd", replication_sd}, {"replications", replications}, {"n", n},
                {"passed", passed}};
    }
};

/// Runs `replications` independent draws of (positive set, unlabeled set) of
/// size n each and compares the mean estimate with the truth. Replication r
/// uses seeds derived from (seed, r); aggregation is in replication order.
inline UnbiasednessReport check_unbiasedness(const GaussianScoreMixture& mix, std::size_t n,
                                             std::size_t replications, std::uint64_t seed,
                                             double max_standard_errors = 4.0,
                                             const NegativeRiskEstimator& estimator = negative_risk_pu) {
    if (replications < 2) throw InputError("check_unbiasedness: need >= 2 replications");
    const MixtureSpec spec = mix.spec();
    std::vector<double> estimates;
    estimates.reserve(replications);
    std::vector<double> pos_neg(n), unl_neg(n);
    for (std::size_t r = 0; r < replications; ++r) {
        const auto pos = sample_class(spec.p_pos, true, n, derive_seed(seed, 2 * r));
        const auto unl = sample_unlabeled(spec, n, derive_seed(seed, 2 * r + 1));
        for (std::size_t i = 0; i < n; ++i) {
            pos_neg[i] = pos[i].loss_as_neg;
            unl_neg[i] = unl[i].loss_as_neg;
        }
        estimates.push_back(estimator(pos_neg, unl_neg, mix.pi_p));
    }
    UnbiasednessReport rep;
    rep.replications = replications;
    rep.n = n;
    rep.truth = mix.true_negative_risk();
    rep.estimate = mean(estimates);
    double ss = 0.0;
    for (double e : estimates) ss += (e - rep.estimate) * (e - rep.estimate);
    rep.replication_sd = std::sqrt(ss / static_cast<double>(replications - 1));
    rep.standard_error = rep.replication_sd / std::sqrt(static_cast<double>(replications));
    rep.passed = std::abs(rep.estimate - rep.truth) < max_standard_errors * rep.standard_error;
    return rep;
}

/// Least-squares slope of log(sd) against log(n).
inline double log_log_slope(std::span<const double> ns, std::span<const double> sds) {
    if (ns.size() != sds.size() || ns.size() < 2) throw InputError("log_log_slope: need >= 2 points");
    std::vector<double> lx, ly;
    for (std::size_t i = 0; i < ns.size(); ++i) {
        lx.push_back(std::log(ns[i]));
        ly.push_back(std::log(sds[i]));
    }
    const double mx = mean(lx);
    const double my = mean(ly);
    double sxy = 0.0, sxx = 0.0;
    for (std::size_t i = 0; i < lx.size(); ++i) {
        sxy += (lx[i] - mx) * (ly[i] - my);
        sxx += (lx[i] - mx) * (lx[i] - mx);
    }
    return sxy / sxx;
}

}  // namespace cbpo
