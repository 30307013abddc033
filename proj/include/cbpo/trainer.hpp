#pragma once

// Training driver: batching, reference-point wiring, optimizer steps,
// warm start and run-state checkpoints.

#include <cmath>
#include <cstdio>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/alpha.hpp"
#include "cbpo/core.hpp"
#include "cbpo/datagen.hpp"
#include "cbpo/losses.hpp"
#include "cbpo/optim.hpp"
#include "cbpo/policy.hpp"
#include "cbpo/rewards.hpp"

namespace cbpo {

/// How delta is formed for the binary-feedback methods.
enum class ReferenceMode {
    ema,    // decoupled EMAs of the per-set batch means
    batch,  // per-batch mean of the two per-set means
    joint,  // per-batch pooled mean over all rewards
};

inline const char* to_string(ReferenceMode m) {
    switch (m) {
        case ReferenceMode::ema: return "ema";
        case ReferenceMode::batch: return "batch";
        case ReferenceMode::joint: return "joint";
    }
    return "?";
}

inline ReferenceMode parse_reference_mode(const std::string& s) {
    if (s == "ema") return ReferenceMode::ema;
    if (s == "batch") return ReferenceMode::batch;
    if (s == "joint") return ReferenceMode::joint;
    throw ConfigError("unknown reference_mode '" + s + "'");
}

struct TrainConfig {
    Method method = Method::CBPO;
    std::size_t epochs = 3;
    std::size_t batch_size_pos = 8;
    std::size_t batch_size_aux = 0;  // 0: round(ratio_x * batch_size_pos)
    double learning_rate = 0.05;
    double beta = 1.0;
    std::optional<double> alpha;     // nullopt: estimate before training
    std::optional<double> pi_n;      // nullopt: 1 - alpha
    double ema_decay = 0.99;
    ReferenceMode reference_mode = ReferenceMode::ema;
    std::uint64_t seed = 0;
    AdamWConfig adam;
    double lambda_d = 1.0;
    double lambda_u = 1.0;
    std::size_t context_size = 4;
    std::size_t warm_start_epochs = 2;
    double warm_start_lr = 0.1;
    std::size_t warm_start_batch = 16;
    std::size_t dpo_sampling_budget = 16;
    ProxyTrainingConfig proxy;

    void validate() const {
        if (epochs < 1) throw ConfigError("epochs must be >= 1");
        if (batch_size_pos < 1) throw ConfigError("batch_size_pos must be >= 1");
        if (!(learning_rate >= 0.0) || !(warm_start_lr >= 0.0)) throw ConfigError("learning rates must be >= 0");
        if (!(beta > 0.0)) throw ConfigError("beta must be > 0");
        if (alpha && !(*alpha >= 0.0 && *alpha < 1.0)) throw ConfigError("alpha must lie in [0,1)");
        if (pi_n && !(*pi_n > 0.0 && *pi_n <= 1.0)) throw ConfigError("pi_n must lie in (0,1]");
        if (!(ema_decay > 0.0 && ema_decay < 1.0)) throw ConfigError("ema_decay must lie in (0,1)");
        if (context_size < 1) throw ConfigError("context_size must be >= 1");
        if (warm_start_batch < 1) throw ConfigError("warm_start_batch must be >= 1");
    }

    std::size_t aux_batch_size(double ratio_x) const {
        if (batch_size_aux > 0) return batch_size_aux;
        const auto derived = static_cast<std::size_t>(std::floor(ratio_x * static_cast<double>(batch_size_pos) + 0.5));
        return derived > 0 ? derived : 1;
    }

    ObjectiveConfig objective(double alpha_value) const {
        ObjectiveConfig oc;
        oc.beta = beta;
        oc.calibration.alpha = alpha_value;
        oc.calibration.pi_n = pi_n.value_or(1.0 - alpha_value);
        oc.lambda_d = lambda_d;
        oc.lambda_u = lambda_u;
        return oc;
    }
};

// ---------------------------------------------------------------------------
// Batching

/// One epoch of batches. Positives are shuffled and consumed once; the
/// auxiliary stream is shuffled independently and cycles when exhausted.
/// DPO batches are drawn from `pairs` instead.
inline std::vector<Batch> make_batches(const UserDataset& d, const TrainConfig& cfg, std::uint64_t epoch_seed,
                                       const std::vector<PreferencePair>* pairs = nullptr) {
    std::vector<Batch> out;
    Rng rng(epoch_seed);
    if (cfg.method == Method::DPO) {
        if (pairs == nullptr || pairs->empty()) throw ConfigError("DPO requires preference pairs");
        std::vector<std::size_t> order(pairs->size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        rng.shuffle(order);
        for (std::size_t s = 0; s < order.size(); s += cfg.batch_size_pos) {
            Batch b;
            for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size_pos); ++k) {
                b.pairs.push_back((*pairs)[order[k]]);
            }
            out.push_back(std::move(b));
        }
        return out;
    }
    if (d.h_tar.empty()) throw InputError("make_batches: empty target set");
    const bool needs_aux = cfg.method != Method::SFT;
    if (needs_aux && d.h_aux.empty()) throw InputError("make_batches: empty auxiliary set");

    std::vector<std::size_t> pos_order(d.h_tar.size());
    for (std::size_t i = 0; i < pos_order.size(); ++i) pos_order[i] = i;
    rng.shuffle(pos_order);

    Rng aux_rng(derive_seed(epoch_seed, 1));
    std::vector<std::size_t> aux_order(d.h_aux.size());
    for (std::size_t i = 0; i < aux_order.size(); ++i) aux_order[i] = i;
    std::size_t aux_cursor = aux_order.size();
    const std::size_t bsa = cfg.aux_batch_size(d.ratio_x);

    for (std::size_t s = 0; s < pos_order.size(); s += cfg.batch_size_pos) {
        Batch b;
        for (std::size_t k = s; k < std::min(pos_order.size(), s + cfg.batch_size_pos); ++k) {
            b.pos.push_back(d.h_tar[pos_order[k]]);
        }
        if (needs_aux) {
            for (std::size_t k = 0; k < bsa; ++k) {
                if (aux_cursor == aux_order.size()) {
                    aux_rng.shuffle(aux_order);
                    aux_cursor = 0;
                }
                b.aux.push_back(d.h_aux[aux_order[aux_cursor++]]);
            }
        }
        out.push_back(std::move(b));
    }
    return out;
}

inline std::size_t steps_per_epoch(std::size_t n_items, std::size_t batch_size) {
    return (n_items + batch_size - 1) / batch_size;
}

// ---------------------------------------------------------------------------
// Run state and a single optimization step

struct RunState {
    PolicyParams policy;
    PolicyParams reference;
    ReferenceState ema{0.99};
    AdamW optimizer;
    std::uint64_t step = 0;
};

struct StepRecord {
    std::uint64_t step = 0;
    std::size_t epoch = 0;
    LossBreakdown loss;
    double delta = 0.0;
    double ema_pos = 0.0;
    double ema_aux = 0.0;
};

inline nlohmann::ordered_json dump_batch(const Batch& b, std::span<const double> rp, std::span<const double> ra) {
    nlohmann::ordered_json j;
    j["pos"] = nlohmann::ordered_json::array();
    for (const auto& s : b.pos) j["pos"].push_back(to_json(s));
    j["aux"] = nlohmann::ordered_json::array();
    for (const auto& s : b.aux) j["aux"].push_back(to_json(s));
    j["pairs"] = nlohmann::ordered_json::array();
    for (const auto& p : b.pairs) {
        j["pairs"].push_back(nlohmann::ordered_json{{"x", p.x}, {"y_w", p.y_w}, {"y_l", p.y_l}});
    }
    j["pos_rewards"] = std::vector<double>(rp.begin(), rp.end());
    j["aux_rewards"] = std::vector<double>(ra.begin(), ra.end());
    return j;
}

/// Raised when a step produces a non-finite loss; carries the batch dump.
struct NonFiniteLoss : NumericError {
    nlohmann::ordered_json dump;
    NonFiniteLoss(const std::string& what, nlohmann::ordered_json d) : NumericError(what), dump(std::move(d)) {}
};

/// Rewards -> EMA update -> delta -> objective -> one AdamW update.
inline StepRecord train_step(RunState& state, const Batch& batch, const TrainConfig& cfg, double alpha_value) {
    StepRecord rec;
    const ObjectiveConfig oc = cfg.objective(alpha_value);
    std::vector<double> rp, ra;
    double delta = 0.0;
    if (uses_binary_feedback(cfg.method)) {
        if (batch.pos.empty() || batch.aux.empty()) throw InputError("binary-feedback batch needs both sets");
        const RewardConfig rc{cfg.beta};
        for (const auto& s : batch.pos) rp.push_back(implicit_reward(state.policy, state.reference, rc, s));
        for (const auto& s : batch.aux) ra.push_back(implicit_reward(state.policy, state.reference, rc, s));
        switch (cfg.reference_mode) {
            case ReferenceMode::ema:
                if (!all_finite(rp) || !all_finite(ra)) {
                    throw NonFiniteLoss("non-finite implicit reward", dump_batch(batch, rp, ra));
                }
                state.ema = ema_update(state.ema, mean(rp), mean(ra));
                delta = delta_ema(state.ema);
                break;
            case ReferenceMode::batch: delta = delta_bco(rp, ra); break;
            case ReferenceMode::joint: delta = delta_joint(rp, ra); break;
        }
    }
    ObjectiveResult res = evaluate_objective(cfg.method, batch, state.policy, state.reference, oc, delta);
    if (!res.breakdown.all_finite() || !all_finite(res.gradient.data)) {
        throw NonFiniteLoss("non-finite loss at step " + std::to_string(state.step + 1), dump_batch(batch, rp, ra));
    }
    state.optimizer.apply(state.policy.logits, res.gradient);
    ++state.step;
    rec.step = state.step;
    rec.loss = res.breakdown;
    rec.delta = delta;
    rec.ema_pos = state.ema.ema_pos;
    rec.ema_aux = state.ema.ema_aux;
    return rec;
}

// ---------------------------------------------------------------------------
// Synthetic DPO pairs

struct PairSet {
    std::vector<PreferencePair> pairs;
    std::size_t skipped = 0;
};

/// For each target (x, y_w), samples y_l from `policy` at x, rejecting draws
/// equal to y_w; a sample whose budget runs out is skipped and counted.
inline PairSet synth_dpo_pairs(const UserDataset& d, const PolicyParams& policy, std::uint64_t seed,
                               std::size_t budget = 16) {
    PairSet out;
    Rng rng(seed);
    for (const auto& s : d.h_tar) {
        bool found = false;
        for (std::size_t attempt = 0; attempt < budget; ++attempt) {
            TokenSeq y = sample_completion(policy, s.x, s.y.size(), rng);
            if (y != s.y) {
                out.pairs.push_back(PreferencePair{s.x, s.y, std::move(y)});
                found = true;
                break;
            }
        }
        if (!found) ++out.skipped;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Full pipeline

struct RunResult {
    PolicyParams policy;
    PolicyParams reference;
    std::vector<StepRecord> log;
    std::optional<AlphaEstimate> alpha_estimate;
    double alpha_used = 0.0;
    std::size_t skipped_pairs = 0;
    std::uint64_t reference_fingerprint_before = 0;
    std::uint64_t reference_fingerprint_after = 0;
    RunState final_state;
};

/// Per-token SFT over `samples`, in place. Used for the warm start.
inline void sft_fit(PolicyParams& policy, std::span<const Sample> samples, std::size_t epochs, double lr,
                    std::size_t batch_size, const AdamWConfig& adam, std::uint64_t seed) {
    if (samples.empty()) throw InputError("sft_fit: empty training set");
    const std::size_t spe = steps_per_epoch(samples.size(), batch_size);
    AdamW opt(adam, lr, spe * epochs, policy.context_size, policy.vocab_size);
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    for (std::size_t e = 0; e < epochs; ++e) {
        Rng rng(derive_seed(seed, e));
        rng.shuffle(order);
        for (std::size_t s = 0; s < order.size(); s += batch_size) {
            Batch b;
            for (std::size_t k = s; k < std::min(order.size(), s + batch_size); ++k) b.pos.push_back(samples[order[k]]);
            const auto res = evaluate_objective(Method::SFT, b, policy, policy, ObjectiveConfig{}, 0.0);
            opt.apply(policy.logits, res.gradient);
        }
    }
}

inline PolicyParams warm_start_policy(const UserDataset& d, const TrainConfig& cfg) {
    PolicyParams p(d.vocab_size, cfg.context_size);
    sft_fit(p, d.pool, cfg.warm_start_epochs, cfg.warm_start_lr, cfg.warm_start_batch, cfg.adam,
            derive_seed(cfg.seed, 0x5f7));
    return p;
}

/// Runs the preference phase from a given warm-start policy.
inline RunResult run_from(const UserDataset& d, const TrainConfig& cfg, const PolicyParams& warm) {
    cfg.validate();
    RunResult out;
    RunState st;
    st.policy = warm;
    st.reference = snapshot_reference(warm);
    st.ema = ReferenceState(cfg.ema_decay);
    out.reference_fingerprint_before = fingerprint(st.reference);

    double alpha_value = cfg.alpha.value_or(0.0);
    if (!cfg.alpha && (cfg.method == Method::CBPO || cfg.method == Method::CBPO_RAW)) {
        out.alpha_estimate =
            estimate_alpha_from_sets(d.h_tar, d.h_aux, d.vocab_size, cfg.proxy, derive_seed(cfg.seed, 0xa1));
        alpha_value = out.alpha_estimate->alpha_hat;
    }
    out.alpha_used = alpha_value;

    PairSet pairs;
    if (cfg.method == Method::DPO) {
        pairs = synth_dpo_pairs(d, st.policy, derive_seed(cfg.seed, 0xd0), cfg.dpo_sampling_budget);
        out.skipped_pairs = pairs.skipped;
        if (pairs.pairs.empty()) throw ConfigError("DPO: no preference pairs could be synthesized");
    }
    const std::size_t n_items = cfg.method == Method::DPO ? pairs.pairs.size() : d.h_tar.size();
    const std::size_t spe = steps_per_epoch(n_items, cfg.batch_size_pos);
    st.optimizer = AdamW(cfg.adam, cfg.learning_rate, spe * cfg.epochs, warm.context_size, warm.vocab_size);

    for (std::size_t e = 0; e < cfg.epochs; ++e) {
        const auto batches = make_batches(d, cfg, derive_seed(cfg.seed, 1000 + e), &pairs.pairs);
        for (const auto& b : batches) {
            StepRecord rec = train_step(st, b, cfg, alpha_value);
            rec.epoch = e + 1;
            out.log.push_back(rec);
        }
    }
    out.reference_fingerprint_after = fingerprint(st.reference);
    out.policy = st.policy;
    out.reference = st.reference;
    out.final_state = std::move(st);
    return out;
}

/// Warm start on the auxiliary pool, freeze the reference, then train.
inline RunResult run(const UserDataset& d, const TrainConfig& cfg) {
    cfg.validate();
    return run_from(d, cfg, warm_start_policy(d, cfg));
}

// ---------------------------------------------------------------------------
// Metrics log and checkpoints

inline std::string format_real(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

inline std::string metrics_csv(const std::vector<StepRecord>& log) {
    std::string out =
        "step,epoch,method,l_pos,l_aux_neg,l_tar_neg,pure_neg_raw,pure_neg_clamped,total,delta,ema_pos,ema_aux\n";
    for (const auto& r : log) {
        out += std::to_string(r.step) + ',' + std::to_string(r.epoch) + ',' + to_string(r.loss.method) + ',' +
               format_real(r.loss.l_pos) + ',' + format_real(r.loss.l_aux_neg) + ',' + format_real(r.loss.l_tar_neg) +
               ',' + format_real(r.loss.pure_neg_raw) + ',' + format_real(r.loss.pure_neg_clamped) + ',' +
               format_real(r.loss.total) + ',' + format_real(r.delta) + ',' + format_real(r.ema_pos) + ',' +
               format_real(r.ema_aux) + '\n';
    }
    return out;
}

inline constexpr int kCheckpointVersion = 1;

inline nlohmann::json to_json(const Matrix& m) {
    return {{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

inline Matrix matrix_from_json(const nlohmann::json& j) {
    Matrix m;
    m.rows = j.at("rows").get<std::size_t>();
    m.cols = j.at("cols").get<std::size_t>();
    m.data = j.at("data").get<std::vector<double>>();
    if (m.data.size() != m.rows * m.cols) throw InputError("matrix data has wrong length");
    return m;
}

inline nlohmann::json to_json(const PolicyParams& p) {
    return {{"vocab_size", p.vocab_size}, {"context_size", p.context_size}, {"logits", to_json(p.logits)}};
}

inline PolicyParams policy_from_json(const nlohmann::json& j) {
    PolicyParams p(j.at("vocab_size").get<std::size_t>(), j.at("context_size").get<std::size_t>());
    p.logits = matrix_from_json(j.at("logits"));
    if (p.logits.rows != p.context_size || p.logits.cols != p.vocab_size) throw InputError("policy logits shape mismatch");
    return p;
}

inline nlohmann::json to_json(const RunState& s) {
    const auto& o = s.optimizer;
    return {{"version", kCheckpointVersion},
            {"policy", to_json(s.policy)},
            {"reference", to_json(s.reference)},
            {"ema", {{"ema_pos", s.ema.ema_pos}, {"ema_aux", s.ema.ema_aux}, {"decay", s.ema.decay},
                     {"initialized", s.ema.initialized}}},
            {"optimizer", {{"beta1", o.config.beta1}, {"beta2", o.config.beta2}, {"eps", o.config.eps},
                           {"weight_decay", o.config.weight_decay}, {"warmup_ratio", o.config.warmup_ratio},
                           {"learning_rate", o.learning_rate}, {"total_steps", o.total_steps}, {"step", o.step},
                           {"m", to_json(o.m)}, {"v", to_json(o.v)}}},
            {"step", s.step}};
}

inline RunState run_state_from_json(const nlohmann::json& j) {
    try {
        if (j.at("version").get<int>() != kCheckpointVersion) throw InputError("unsupported checkpoint version");
        RunState s;
        s.policy = policy_from_json(j.at("policy"));
        s.reference = policy_from_json(j.at("reference"));
        const auto& e = j.at("ema");
        s.ema = ReferenceState(e.at("decay").get<double>());
        s.ema.ema_pos = e.at("ema_pos").get<double>();
        s.ema.ema_aux = e.at("ema_aux").get<double>();
        s.ema.initialized = e.at("initialized").get<bool>();
        const auto& o = j.at("optimizer");
        AdamWConfig ac{o.at("beta1").get<double>(), o.at("beta2").get<double>(), o.at("eps").get<double>(),
                       o.at("weight_decay").get<double>(), o.at("warmup_ratio").get<double>()};
        s.optimizer.config = ac;
        s.optimizer.learning_rate = o.at("learning_rate").get<double>();
        s.optimizer.total_steps = o.at("total_steps").get<std::uint64_t>();
        s.optimizer.step = o.at("step").get<std::uint64_t>();
        s.optimizer.m = matrix_from_json(o.at("m"));
        s.optimizer.v = matrix_from_json(o.at("v"));
        s.step = j.at("step").get<std::uint64_t>();
        return s;
    } catch (const nlohmann::json::exception& ex) {
        throw InputError(std::string("malformed checkpoint: ") + ex.what());
    }
}

}  // namespace cbpo
