#pragma once

// Synthetic multi-user preference population.
//
// Every completion token of user u is drawn from
//     lambda * p_gen + (1 - lambda) * p_u
// where p_gen is a shared distribution over a "general" token block and p_u
// concentrates on a user-private token block (blocks are disjoint), plus a
// small uniform background. lambda is therefore the ground-truth overlap.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cbpo/alpha.hpp"
#include "cbpo/core.hpp"
#include "cbpo/policy.hpp"

namespace cbpo {

struct PopulationSpec {
    std::size_t n_users = 8;
    std::size_t vocab_size = 32;
    double overlap_lambda = 0.5;
    std::size_t samples_per_user = 200;
    std::size_t prompt_pool_size = 16;
    std::size_t seq_len = 1;
    std::uint64_t seed = 0;
    // Shape of the ground-truth distributions.
    std::size_t general_support = 8;
    std::size_t user_support = 3;
    double background = 0.2;
    std::size_t prompt_len = 2;
    double heldout_fraction = 0.5;

    void validate() const {
        if (!(overlap_lambda >= 0.0 && overlap_lambda <= 1.0)) throw ConfigError("overlap_lambda must lie in [0,1]");
        if (n_users < 1 || vocab_size < 2 || samples_per_user < 1 || prompt_pool_size < 1 || seq_len < 1 ||
            prompt_len < 1 || general_support < 1 || user_support < 1) {
            throw ConfigError("population counts must be >= 1 (vocab_size >= 2)");
        }
        if (general_support + n_users * user_support > vocab_size) {
            throw ConfigError("vocab_size too small for disjoint general and per-user token blocks");
        }
        if (!(background >= 0.0 && background <= 1.0)) throw ConfigError("background must lie in [0,1]");
        if (!(heldout_fraction >= 0.0 && heldout_fraction < 1.0)) throw ConfigError("heldout_fraction must lie in [0,1)");
    }

    bool operator==(const PopulationSpec&) const = default;
};

inline nlohmann::ordered_json to_json(const PopulationSpec& s) {
    return {{"n_users", s.n_users},
            {"vocab_size", s.vocab_size},
            {"overlap_lambda", s.overlap_lambda},
            {"samples_per_user", s.samples_per_user},
            {"prompt_pool_size", s.prompt_pool_size},
            {"seq_len", s.seq_len},
            {"seed", s.seed},
            {"general_support", s.general_support},
            {"user_support", s.user_support},
            {"background", s.background},
            {"prompt_len", s.prompt_len},
            {"heldout_fraction", s.heldout_fraction}};
}

/// Strict parse: unknown keys are rejected, missing keys keep defaults.
inline PopulationSpec population_spec_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ConfigError("population spec must be a JSON object");
    PopulationSpec s;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "n_users") s.n_users = value.get<std::size_t>();
            else if (key == "vocab_size") s.vocab_size = value.get<std::size_t>();
            else if (key == "overlap_lambda") s.overlap_lambda = value.get<double>();
            else if (key == "samples_per_user") s.samples_per_user = value.get<std::size_t>();
            else if (key == "prompt_pool_size") s.prompt_pool_size = value.get<std::size_t>();
            else if (key == "seq_len") s.seq_len = value.get<std::size_t>();
            else if (key == "seed") s.seed = value.get<std::uint64_t>();
            else if (key == "general_support") s.general_support = value.get<std::size_t>();
            else if (key == "user_support") s.user_support = value.get<std::size_t>();
            else if (key == "background") s.background = value.get<double>();
            else if (key == "prompt_len") s.prompt_len = value.get<std::size_t>();
            else if (key == "heldout_fraction") s.heldout_fraction = value.get<double>();
            else throw ConfigError("unknown population field '" + key + "'");
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError("population field '" + key + "': " + e.what());
        }
    }
    s.validate();
    return s;
}

inline std::string user_name(std::size_t index) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "u%03zu", index);
    return buf;
}

struct Population {
    PopulationSpec spec;
    std::vector<std::string> user_ids;          // sorted
    std::vector<double> p_gen;                  // over the vocabulary
    std::vector<std::vector<double>> p_user;    // user-specific component, with background
    std::vector<TokenSeq> prompts;
    std::vector<Sample> samples;                // by user id, then sample index

    std::vector<double> token_distribution(std::size_t user) const {
        std::vector<double> q(spec.vocab_size);
        const double lam = spec.overlap_lambda;
        for (std::size_t v = 0; v < q.size(); ++v) q[v] = lam * p_gen[v] + (1.0 - lam) * p_user[user][v];
        return q;
    }

    std::size_t user_index(const std::string& id) const {
        const auto it = std::lower_bound(user_ids.begin(), user_ids.end(), id);
        if (it == user_ids.end() || *it != id) throw InputError("unknown user '" + id + "'");
        return static_cast<std::size_t>(it - user_ids.begin());
    }

    std::vector<Sample> samples_of(const std::string& id, Split split) const {
        std::vector<Sample> out;
        for (const auto& s : samples) {
            if (s.user_id == id && s.split == split) out.push_back(s);
        }
        return out;
    }
};

namespace detail {

inline std::vector<double> random_weights(Rng& rng, std::size_t n) {
    std::vector<double> w(n);
    double total = 0.0;
    for (auto& v : w) {
        v = rng.exponential() + 0.5;
        total += v;
    }
    for (auto& v : w) v /= total;
    return w;
}

}  // namespace detail

/// Builds the ground-truth distributions from the spec alone (no samples).
inline Population population_skeleton(const PopulationSpec& spec) {
    spec.validate();
    Population pop;
    pop.spec = spec;
    const std::size_t V = spec.vocab_size;
    Rng rng(derive_seed(spec.seed, 0));
    std::vector<std::size_t> perm(V);
    for (std::size_t i = 0; i < V; ++i) perm[i] = i;
    rng.shuffle(perm);

    pop.p_gen.assign(V, 0.0);
    const auto gw = detail::random_weights(rng, spec.general_support);
    for (std::size_t k = 0; k < spec.general_support; ++k) pop.p_gen[perm[k]] = gw[k];

    for (std::size_t u = 0; u < spec.n_users; ++u) {
        std::vector<double> p(V, spec.background / static_cast<double>(V));
        const auto uw = detail::random_weights(rng, spec.user_support);
        const std::size_t base = spec.general_support + u * spec.user_support;
        for (std::size_t k = 0; k < spec.user_support; ++k) p[perm[base + k]] += (1.0 - spec.background) * uw[k];
        pop.p_user.push_back(std::move(p));
        pop.user_ids.push_back(user_name(u));
    }

    for (std::size_t i = 0; i < spec.prompt_pool_size; ++i) {
        TokenSeq x(spec.prompt_len);
        for (auto& t : x) t = static_cast<Token>(rng.below(V));
        pop.prompts.push_back(std::move(x));
    }
    return pop;
}

inline Population generate_population(const PopulationSpec& spec) {
    Population pop = population_skeleton(spec);
    const std::size_t n = spec.samples_per_user;
    const std::size_t n_held = static_cast<std::size_t>(std::ceil(spec.heldout_fraction * static_cast<double>(n)));
    for (std::size_t u = 0; u < spec.n_users; ++u) {
        Rng rng(derive_seed(spec.seed, 100 + u));
        const auto q = pop.token_distribution(u);
        for (std::size_t i = 0; i < n; ++i) {
            Sample s;
            s.user_id = pop.user_ids[u];
            s.x = pop.prompts[rng.below(pop.prompts.size())];
            s.y.resize(spec.seq_len);
            for (auto& t : s.y) t = static_cast<Token>(rng.categorical(q));
            s.split = i + n_held >= n ? Split::heldout : Split::train;
            pop.samples.push_back(std::move(s));
        }
    }
    return pop;
}

// ---------------------------------------------------------------------------
// Corpus files

inline nlohmann::ordered_json to_json(const Sample& s) {
    return {{"user_id", s.user_id}, {"x", s.x}, {"y", s.y}, {"split", to_string(s.split)}};
}

inline Sample sample_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw InputError("corpus line is not a JSON object");
    Sample s;
    std::size_t seen = 0;
    for (const auto& [key, value] : j.items()) {
        if (key == "user_id") s.user_id = value.get<std::string>();
        else if (key == "x") s.x = value.get<TokenSeq>();
        else if (key == "y") s.y = value.get<TokenSeq>();
        else if (key == "split") s.split = parse_split(value.get<std::string>());
        else throw InputError("unknown corpus field '" + key + "'");
        ++seen;
    }
    if (seen != 4) throw InputError("corpus line must have user_id, x, y, split");
    if (s.y.empty()) throw InputError("corpus sample with empty completion");
    return s;
}

inline std::string corpus_jsonl(const std::vector<Sample>& samples) {
    std::string out;
    for (const auto& s : samples) {
        out += to_json(s).dump();
        out += '\n';
    }
    return out;
}

inline std::vector<Sample> read_corpus(const std::string& path, std::size_t vocab_size) {
    std::ifstream in(path);
    if (!in) throw InputError("cannot open corpus '" + path + "'");
    std::vector<Sample> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            Sample s = sample_from_json(nlohmann::json::parse(line));
            for (Token t : s.y) {
                if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw InputError("token out of range");
            }
            for (Token t : s.x) {
                if (t < 0 || static_cast<std::size_t>(t) >= vocab_size) throw InputError("token out of range");
            }
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw InputError("corpus line " + std::to_string(lineno) + ": " + e.what());
        } catch (const InputError& e) {
            throw InputError("corpus line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

/// Rebuilds a Population from a spec and its persisted samples.
inline Population population_from_corpus(const PopulationSpec& spec, std::vector<Sample> samples) {
    Population pop = population_skeleton(spec);
    const std::set<std::string> known(pop.user_ids.begin(), pop.user_ids.end());
    for (const auto& s : samples) {
        if (!known.count(s.user_id)) throw InputError("corpus references unknown user '" + s.user_id + "'");
    }
    pop.samples = std::move(samples);
    return pop;
}

// ---------------------------------------------------------------------------
// Per-user datasets

enum class Grouping { random, unique, non_unique };

inline const char* to_string(Grouping g) {
    switch (g) {
        case Grouping::random: return "random";
        case Grouping::unique: return "unique";
        case Grouping::non_unique: return "non_unique";
    }
    return "?";
}

inline Grouping parse_grouping(const std::string& s) {
    if (s == "random") return Grouping::random;
    if (s == "unique") return Grouping::unique;
    if (s == "non_unique") return Grouping::non_unique;
    throw ConfigError("unknown grouping '" + s + "'");
}

struct UserDataset {
    std::string target_user;
    std::vector<Sample> h_tar;
    std::vector<Sample> h_aux;
    double ratio_x = 1.0;
    Grouping grouping = Grouping::random;
    std::size_t vocab_size = 0;
    // Non-target training samples; the warm-start policy is fit on these.
    std::vector<Sample> pool;
    std::vector<Sample> tar_heldout;
    // Held-out samples of the users that contributed to h_aux.
    std::vector<Sample> aux_heldout;
    std::vector<std::string> aux_users;
};

inline std::vector<double> mean_embedding(std::span<const Sample> samples, std::size_t vocab_size) {
    if (samples.empty()) throw InputError("mean_embedding: empty set");
    std::vector<double> m(vocab_size, 0.0);
    for (const auto& s : samples) {
        const auto e = embed(s, vocab_size);
        for (std::size_t i = 0; i < vocab_size; ++i) m[i] += e[i];
    }
    for (double& v : m) v /= static_cast<double>(samples.size());
    return m;
}

inline double euclidean(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// Mean distance of each auxiliary sample's embedding to the target's mean embedding.
inline double aux_distance_to_target(const UserDataset& d) {
    const auto centre = mean_embedding(d.h_tar, d.vocab_size);
    double s = 0.0;
    for (const auto& smp : d.h_aux) s += euclidean(embed(smp, d.vocab_size), centre);
    return s / static_cast<double>(d.h_aux.size());
}

namespace detail {

inline std::size_t round_half_up(double v) { return static_cast<std::size_t>(std::floor(v + 0.5)); }

/// Picks `count` samples uniformly without replacement, preserving nothing
/// about input order.
inline std::vector<Sample> draw_without_replacement(std::vector<Sample> candidates, std::size_t count, Rng& rng) {
    if (count > candidates.size()) throw InputError("insufficient auxiliary data for requested ratio");
    // Partial Fisher-Yates.
    for (std::size_t i = 0; i < count; ++i) {
        std::swap(candidates[i], candidates[i + rng.below(candidates.size() - i)]);
    }
    candidates.resize(count);
    return candidates;
}

}  // namespace detail

inline UserDataset build_user_dataset(const Population& pop, const std::string& target_user, double ratio_x,
                                      Grouping grouping, std::uint64_t seed) {
    if (!(ratio_x >= 0.0) || !std::isfinite(ratio_x)) throw InputError("ratio_x must be a non-negative real");
    pop.user_index(target_user);
    UserDataset d;
    d.target_user = target_user;
    d.ratio_x = ratio_x;
    d.grouping = grouping;
    d.vocab_size = pop.spec.vocab_size;
    d.h_tar = pop.samples_of(target_user, Split::train);
    d.tar_heldout = pop.samples_of(target_user, Split::heldout);
    if (d.h_tar.empty()) throw InputError("target user has no training samples");

    std::map<std::string, std::vector<Sample>> by_user;
    for (const auto& s : pop.samples) {
        if (s.user_id != target_user && s.split == Split::train) {
            d.pool.push_back(s);
            by_user[s.user_id].push_back(s);
        }
    }
    const std::size_t n_aux = detail::round_half_up(ratio_x * static_cast<double>(d.h_tar.size()));
    if (n_aux == 0) throw InputError("ratio_x yields an empty auxiliary set");
    if (n_aux > d.pool.size()) throw InputError("insufficient auxiliary data for requested ratio");

    Rng rng(derive_seed(seed, 17));
    std::vector<Sample> candidates;
    if (grouping == Grouping::random) {
        candidates = d.pool;
    } else {
        const auto centre = mean_embedding(d.h_tar, d.vocab_size);
        std::vector<std::pair<double, std::string>> ranked;
        for (const auto& [uid, smps] : by_user) {
            ranked.emplace_back(euclidean(mean_embedding(smps, d.vocab_size), centre), uid);
        }
        std::sort(ranked.begin(), ranked.end());
        if (grouping == Grouping::unique) {
            std::stable_sort(ranked.begin(), ranked.end(),
                             [](const auto& a, const auto& b) { return a.first > b.first; });
        }
        for (const auto& [dist, uid] : ranked) {
            if (candidates.size() >= n_aux) break;
            const auto& smps = by_user[uid];
            candidates.insert(candidates.end(), smps.begin(), smps.end());
        }
    }
    d.h_aux = detail::draw_without_replacement(std::move(candidates), n_aux, rng);

    std::set<std::string> users;
    for (const auto& s : d.h_aux) users.insert(s.user_id);
    d.aux_users.assign(users.begin(), users.end());
    for (const auto& s : pop.samples) {
        if (s.split == Split::heldout && users.count(s.user_id)) d.aux_heldout.push_back(s);
    }
    return d;
}

/// Keeps the first ceil(fraction * |h_tar|) target samples and the first
/// round(ratio_x * kept) auxiliary samples.
inline UserDataset truncate_history(const UserDataset& d, double fraction) {
    if (!(fraction > 0.0 && fraction <= 1.0)) throw InputError("history fraction must lie in (0,1]");
    const std::size_t keep = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(d.h_tar.size())));
    if (keep == 0) throw InputError("history fraction leaves no target samples");
    const std::size_t keep_aux = detail::round_half_up(d.ratio_x * static_cast<double>(keep));
    if (keep_aux > d.h_aux.size()) throw InputError("truncate_history: auxiliary set too small for ratio");
    UserDataset out = d;
    out.h_tar.resize(keep);
    out.h_aux.resize(keep_aux);
    return out;
}

}  // namespace cbpo
