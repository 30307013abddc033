#pragma once

#include <cmath>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/datagen.hpp"
#include "cbpo/policy.hpp"
#include "cbpo/rewards.hpp"

namespace cbpo {

struct EvalReport {
    double heldout_nll = 0.0;     // per-token, target held-out samples
    double pref_acc = 0.0;        // P(reward(target) > reward(aux)), ties count half
    double delta_logp_aux = 0.0;  // per-token log pi - log pi_ref on auxiliary held-out samples
    std::size_t n_tar_heldout = 0;
    std::size_t n_aux_heldout = 0;
    std::string target_user;

    nlohmann::ordered_json to_json() const {
        return {{"heldout_nll", heldout_nll},       {"pref_acc", pref_acc},
                {"delta_logp_aux", delta_logp_aux}, {"n_tar_heldout", n_tar_heldout},
                {"n_aux_heldout", n_aux_heldout},   {"target_user", target_user}};
    }
};

/// Scores `policy` against the frozen warm-start `reference` on the held-out
/// sides of a user dataset.
inline EvalReport evaluate(const PolicyParams& policy, const PolicyParams& reference, const UserDataset& d,
                           double beta) {
    if (!policy.same_shape(reference)) throw InputError("evaluate: policy/reference shape mismatch");
    if (policy.vocab_size != d.vocab_size) throw InputError("evaluate: vocabulary size mismatch");
    if (d.tar_heldout.empty() || d.aux_heldout.empty()) throw InputError("evaluate: empty held-out set");
    EvalReport rep;
    rep.target_user = d.target_user;
    rep.n_tar_heldout = d.tar_heldout.size();
    rep.n_aux_heldout = d.aux_heldout.size();
    const RewardConfig rc{beta};

    double nll = 0.0;
    std::size_t tokens = 0;
    std::vector<double> tar_r;
    for (const auto& s : d.tar_heldout) {
        nll -= log_prob(policy, s);
        tokens += s.y.size();
        tar_r.push_back(implicit_reward(policy, reference, rc, s));
    }
    rep.heldout_nll = nll / static_cast<double>(tokens);

    double shift = 0.0;
    std::size_t aux_tokens = 0;
    std::vector<double> aux_r;
    for (const auto& s : d.aux_heldout) {
        const double lp = log_prob(policy, s);
        const double lr = log_prob(reference, s);
        shift += lp - lr;
        aux_tokens += s.y.size();
        aux_r.push_back(beta * (lp - lr));
    }
    rep.delta_logp_aux = shift / static_cast<double>(aux_tokens);

    double wins = 0.0;
    for (double a : tar_r) {
        for (double b : aux_r) {
            if (a > b) wins += 1.0;
            else if (a == b) wins += 0.5;
        }
    }
    rep.pref_acc = wins / (static_cast<double>(tar_r.size()) * static_cast<double>(aux_r.size()));
    return rep;
}

}  // namespace cbpo
