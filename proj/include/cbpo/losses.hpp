#pragma once

// Training objectives over implicit rewards: binary-feedback losses (BCO and
// the calibrated purified-negative objective), DPO, KTO and SFT, each with an
// analytic gradient with respect to the policy logits.
//
// Reference points (delta, z_ref) are constants for differentiation.

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

#include "cbpo/core.hpp"
#include "cbpo/policy.hpp"
#include "cbpo/rewards.hpp"

namespace cbpo {

enum class Method { SFT, DPO, KTO, BCO, CBPO_RAW, CBPO };

inline const char* to_string(Method m) {
    switch (m) {
        case Method::SFT: return "sft";
        case Method::DPO: return "dpo";
        case Method::KTO: return "kto";
        case Method::BCO: return "bco";
        case Method::CBPO_RAW: return "cbpo_raw";
        case Method::CBPO: return "cbpo";
    }
    return "?";
}

inline Method parse_method(const std::string& s) {
    if (s == "sft") return Method::SFT;
    if (s == "dpo") return Method::DPO;
    if (s == "kto") return Method::KTO;
    if (s == "bco") return Method::BCO;
    if (s == "cbpo_raw") return Method::CBPO_RAW;
    if (s == "cbpo") return Method::CBPO;
    throw ConfigError("unknown method '" + s + "'");
}

/// Binary-feedback methods consume a positive and an auxiliary set and a delta.
inline bool uses_binary_feedback(Method m) {
    return m == Method::BCO || m == Method::CBPO_RAW || m == Method::CBPO;
}

struct CalibrationConfig {
    double alpha = 0.0;  // correction coefficient, [0, 1)
    double pi_n = 1.0;   // class prior for the unclamped form, (0, 1]

    void validate() const {
        if (!(alpha >= 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in [0, 1)");
        if (!(pi_n > 0.0 && pi_n <= 1.0)) throw ConfigError("pi_n must lie in (0, 1]");
    }
};

struct LossBreakdown {
    double l_pos = 0.0;
    double l_aux_neg = 0.0;
    double l_tar_neg = 0.0;
    double pure_neg_raw = 0.0;
    double pure_neg_clamped = 0.0;
    double total = 0.0;
    Method method = Method::BCO;

    bool all_finite() const {
        return std::isfinite(l_pos) && std::isfinite(l_aux_neg) && std::isfinite(l_tar_neg) &&
               std::isfinite(pure_neg_raw) && std::isfinite(pure_neg_clamped) && std::isfinite(total);
    }
};

inline double sigmoid(double z) {
    if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
    const double e = std::exp(z);
    return e / (1.0 + e);
}

/// log(1 + e^z) without overflow or cancellation.
inline double softplus(double z) { return std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))); }

/// -log sigma(z).
inline double neg_log_sigmoid(double z) { return softplus(-z); }

inline double loss_positive(double reward, double delta) { return neg_log_sigmoid(reward - delta); }
inline double loss_negative(double reward, double delta) { return neg_log_sigmoid(-(reward - delta)); }

inline double dpo_loss(double reward_w, double reward_l) { return neg_log_sigmoid(reward_w - reward_l); }

/// KTO loss with the per-sample reference points supplied by the caller.
inline double kto_loss_with_refs(std::span<const double> rewards, std::span<const int> labels,
                                 std::span<const double> zrefs, double lambda_d, double lambda_u) {
    if (rewards.size() != labels.size() || rewards.size() != zrefs.size()) {
        throw InputError("kto_loss: rewards/labels length mismatch");
    }
    if (rewards.size() < 2) throw InputError("kto_loss: batch size must be >= 2");
    double s = 0.0;
    for (std::size_t i = 0; i < rewards.size(); ++i) {
        const double z = zrefs[i];
        double v;
        double w;
        if (labels[i] == 1) {
            v = sigmoid(rewards[i] - z);
            w = lambda_d;
        } else if (labels[i] == -1) {
            v = sigmoid(z - rewards[i]);
            w = lambda_u;
        } else {
            throw InputError("kto_loss: labels must be +1 or -1");
        }
        s += w * (1.0 - v);
    }
    return s / static_cast<double>(rewards.size());
}

inline std::vector<double> kto_zrefs(std::span<const double> rewards) {
    std::vector<double> z(rewards.size());
    for (std::size_t i = 0; i < rewards.size(); ++i) z[i] = kto_zref(rewards, i);
    return z;
}

inline double kto_loss(std::span<const double> rewards, std::span<const int> labels, double lambda_d,
                       double lambda_u) {
    if (rewards.size() != labels.size()) throw InputError("kto_loss: rewards/labels length mismatch");
    if (rewards.size() < 2) throw InputError("kto_loss: batch size must be >= 2");
    return kto_loss_with_refs(rewards, labels, kto_zrefs(rewards), lambda_d, lambda_u);
}

namespace detail {

inline double mean_loss(std::span<const double> rewards, double delta, bool positive) {
    double s = 0.0;
    for (double r : rewards) s += positive ? loss_positive(r, delta) : loss_negative(r, delta);
    return s / static_cast<double>(rewards.size());
}

inline void require_sets(std::span<const double> pos, std::span<const double> aux) {
    if (pos.empty()) throw InputError("empty positive set");
    if (aux.empty()) throw InputError("empty auxiliary set");
}

}  // namespace detail

inline LossBreakdown bco_loss(std::span<const double> pos_rewards, std::span<const double> aux_rewards,
                              double delta) {
    detail::require_sets(pos_rewards, aux_rewards);
    LossBreakdown out;
    out.method = Method::BCO;
    out.l_pos = detail::mean_loss(pos_rewards, delta, true);
    out.l_aux_neg = detail::mean_loss(aux_rewards, delta, false);
    out.l_tar_neg = detail::mean_loss(pos_rewards, delta, false);
    out.pure_neg_raw = out.l_aux_neg;
    out.pure_neg_clamped = std::max(0.0, out.pure_neg_raw);
    out.total = out.l_pos + out.l_aux_neg;
    return out;
}

/// Unclamped PU form: l_pos + (l_aux_neg - alpha * l_tar_neg) / pi_n.
inline LossBreakdown cbpo_raw_loss(std::span<const double> pos_rewards, std::span<const double> aux_rewards,
                                   double delta, const CalibrationConfig& config) {
    config.validate();
    detail::require_sets(pos_rewards, aux_rewards);
    LossBreakdown out;
    out.method = Method::CBPO_RAW;
    out.l_pos = detail::mean_loss(pos_rewards, delta, true);
    out.l_aux_neg = detail::mean_loss(aux_rewards, delta, false);
    out.l_tar_neg = detail::mean_loss(pos_rewards, delta, false);
    out.pure_neg_raw = out.l_aux_neg - config.alpha * out.l_tar_neg;
    out.pure_neg_clamped = std::max(0.0, out.pure_neg_raw);
    out.total = out.l_pos + out.pure_neg_raw / config.pi_n;
    return out;
}

/// l_pos + max(0, l_aux_neg - alpha * l_tar_neg) / (1 - alpha).
inline LossBreakdown cbpo_loss(std::span<const double> pos_rewards, std::span<const double> aux_rewards,
                               double delta, const CalibrationConfig& config) {
    config.validate();
    detail::require_sets(pos_rewards, aux_rewards);
    LossBreakdown out;
    out.method = Method::CBPO;
    out.l_pos = detail::mean_loss(pos_rewards, delta, true);
    out.l_aux_neg = detail::mean_loss(aux_rewards, delta, false);
    out.l_tar_neg = detail::mean_loss(pos_rewards, delta, false);
    out.pure_neg_raw = out.l_aux_neg - config.alpha * out.l_tar_neg;
    out.pure_neg_clamped = std::max(0.0, out.pure_neg_raw);
    out.total = out.l_pos + out.pure_neg_clamped / (1.0 - config.alpha);
    return out;
}

/// Per-token normalized negative log-likelihood.
inline double sft_loss(const PolicyParams& policy, std::span<const Sample> batch) {
    if (batch.empty()) throw InputError("sft_loss: empty batch");
    double s = 0.0;
    std::size_t tokens = 0;
    for (const auto& smp : batch) {
        s += log_prob(policy, smp);
        tokens += smp.y.size();
    }
    return -s / static_cast<double>(tokens);
}

struct PreferencePair {
    TokenSeq x;
    TokenSeq y_w;
    TokenSeq y_l;

    bool operator==(const PreferencePair&) const = default;
};

/// One optimization step's worth of data. Which fields are used depends on
/// the method: SFT reads pos; binary-feedback methods and KTO read pos and
/// aux; DPO reads pairs.
struct Batch {
    std::vector<Sample> pos;
    std::vector<Sample> aux;
    std::vector<PreferencePair> pairs;
};

struct ObjectiveConfig {
    double beta = 1.0;
    CalibrationConfig calibration;
    double lambda_d = 1.0;
    double lambda_u = 1.0;
};

struct ObjectiveResult {
    LossBreakdown breakdown;
    Matrix gradient;
};

namespace detail {

inline std::vector<double> rewards_of(const PolicyParams& policy, const PolicyParams& reference, double beta,
                                      std::span<const Sample> samples) {
    const RewardConfig rc{beta};
    std::vector<double> out;
    out.reserve(samples.size());
    for (const auto& s : samples) out.push_back(implicit_reward(policy, reference, rc, s));
    return out;
}

}  // namespace detail

/// Value and analytic logit gradient of the selected objective on one batch.
///
/// Gradient accumulation runs over positives, then auxiliaries (or pairs) in
/// batch order so that results are reproducible bit for bit.
inline ObjectiveResult evaluate_objective(Method method, const Batch& batch, const PolicyParams& policy,
                                          const PolicyParams& reference, const ObjectiveConfig& config,
                                          double delta) {
    if (!policy.same_shape(reference)) throw InputError("policy/reference shape mismatch");
    ObjectiveResult res;
    res.gradient = Matrix(policy.context_size, policy.vocab_size);
    Matrix& g = res.gradient;
    const double beta = config.beta;
    LossBreakdown& out = res.breakdown;
    out.method = method;

    switch (method) {
        case Method::SFT: {
            out.total = sft_loss(policy, batch.pos);
            std::size_t tokens = 0;
            for (const auto& s : batch.pos) tokens += s.y.size();
            const double coef = -1.0 / static_cast<double>(tokens);
            for (const auto& s : batch.pos) accumulate_log_prob_grad(policy, s.x, s.y, coef, g);
            out.l_pos = out.total;
            return res;
        }
        case Method::DPO: {
            if (batch.pairs.empty()) throw InputError("DPO batch has no preference pairs");
            const RewardConfig rc{beta};
            const double n = static_cast<double>(batch.pairs.size());
            double s = 0.0;
            for (const auto& p : batch.pairs) {
                const double rw = implicit_reward(policy, reference, rc, p.x, p.y_w);
                const double rl = implicit_reward(policy, reference, rc, p.x, p.y_l);
                s += dpo_loss(rw, rl);
                const double w = sigmoid(rl - rw) / n;
                accumulate_log_prob_grad(policy, p.x, p.y_w, -beta * w, g);
                accumulate_log_prob_grad(policy, p.x, p.y_l, beta * w, g);
            }
            out.total = s / n;
            return res;
        }
        case Method::KTO: {
            std::vector<const Sample*> all;
            std::vector<int> labels;
            for (const auto& s : batch.pos) {
                all.push_back(&s);
                labels.push_back(1);
            }
            for (const auto& s : batch.aux) {
                all.push_back(&s);
                labels.push_back(-1);
            }
            if (all.size() < 2) throw InputError("KTO batch size must be >= 2");
            const RewardConfig rc{beta};
            std::vector<double> rewards;
            for (const Sample* s : all) rewards.push_back(implicit_reward(policy, reference, rc, *s));
            out.total = kto_loss(rewards, labels, config.lambda_d, config.lambda_u);
            const double n = static_cast<double>(all.size());
            for (std::size_t i = 0; i < all.size(); ++i) {
                const double z = kto_zref(rewards, i);
                const double sg = sigmoid(rewards[i] - z);
                const double dv = sg * (1.0 - sg);  // sigma'(r - z)
                const double dr = labels[i] == 1 ? -config.lambda_d * dv / n : config.lambda_u * dv / n;
                accumulate_log_prob_grad(policy, all[i]->x, all[i]->y, beta * dr, g);
            }
            return res;
        }
        case Method::BCO:
        case Method::CBPO_RAW:
        case Method::CBPO: {
            const auto rp = detail::rewards_of(policy, reference, beta, batch.pos);
            const auto ra = detail::rewards_of(policy, reference, beta, batch.aux);
            const auto& cal = config.calibration;
            if (method == Method::BCO) {
                out = bco_loss(rp, ra, delta);
            } else if (method == Method::CBPO_RAW) {
                out = cbpo_raw_loss(rp, ra, delta, cal);
            } else {
                out = cbpo_loss(rp, ra, delta, cal);
            }

            // Weights on d/dr of the negative-set terms.
            double aux_scale = 1.0;
            double tar_neg_scale = 0.0;
            if (method == Method::CBPO_RAW) {
                aux_scale = 1.0 / cal.pi_n;
                tar_neg_scale = -cal.alpha / cal.pi_n;
            } else if (method == Method::CBPO) {
                // Zero subgradient on the clamped branch, kink included.
                if (out.pure_neg_raw > 0.0) {
                    aux_scale = 1.0 / (1.0 - cal.alpha);
                    tar_neg_scale = -cal.alpha / (1.0 - cal.alpha);
                } else {
                    aux_scale = 0.0;
                }
            }

            const double np = static_cast<double>(rp.size());
            const double na = static_cast<double>(ra.size());
            for (std::size_t i = 0; i < rp.size(); ++i) {
                double dr = -sigmoid(delta - rp[i]) / np;
                dr += tar_neg_scale * sigmoid(rp[i] - delta) / np;
                accumulate_log_prob_grad(policy, batch.pos[i].x, batch.pos[i].y, beta * dr, g);
            }
            if (aux_scale != 0.0) {
                for (std::size_t j = 0; j < ra.size(); ++j) {
                    const double dr = aux_scale * sigmoid(ra[j] - delta) / na;
                    accumulate_log_prob_grad(policy, batch.aux[j].x, batch.aux[j].y, beta * dr, g);
                }
            }
            return res;
        }
    }
    throw InputError("unknown method");
}

inline Matrix loss_gradients(Method method, const Batch& batch, const PolicyParams& policy,
                             const PolicyParams& reference, const ObjectiveConfig& config, double delta) {
    return evaluate_objective(method, batch, policy, reference, config, delta).gradient;
}

}  // namespace cbpo
